#!/usr/bin/env python3

import opera.corpus
import opera.corpus.synthetic
import opera.errors
import opera.rules
import pytest

Operation = opera.rules.Operation


def _match(question, rules):
    return opera.rules.match_operations(opera.corpus.tokenize(question), rules)


@pytest.mark.parametrize(
    "question, expected",
    [
        (
            "How many more yards was Kris Browns's first field goal over his second?",
            {Operation.ADDITION},
        ),
        ("How many yards was the longest field goal in the game?", {Operation.MAX}),
        ("Which player had the longest touchdown reception?", {Operation.ARGMAX}),
        ("Who scored more field goals, David Akers or John Potter?", {Operation.ARGMORE}),
        ("How many field goals did Kris Brown kick?", {Operation.COUNT}),
        ("How many percent of Forth Worth households owned a car?", {Operation.KEY_VALUE}),
        ("Which team scored the final TD of the game?", {Operation.SPAN}),
    ],
)
def test_representative_questions(question, expected, default_rules):
    assert _match(question, default_rules) == expected


@pytest.mark.parametrize(
    "question, expected",
    [
        ("How many yards was the longest field goals", {Operation.MAX}),
        ("How many yards was the shortest field goal?", {Operation.MIN}),
        ("Which player had the shortest touchdown reception?", {Operation.ARGMIN}),
        ("Who scored less field goals, David Akers or John Potter?", {Operation.ARGLESS}),
        ("How many yards less was the second field goal over the first?", {Operation.DIFF}),
        ("Who threw the longest touchdown pass?", {Operation.ARGMAX, Operation.KEY_VALUE}),
        ("Which players caught touchdown passes?", {Operation.SPAN}),
        ("What happened in the game?", set()),
    ],
)
def test_alternations_and_extensions(question, expected, default_rules):
    assert _match(question, default_rules) == expected


def test_matching_ignores_case_and_punctuation():
    rules = opera.rules.compile_rules_text("COUNT ::= How many field goals [slot]?")
    assert _match("HOW MANY FIELD GOALS, DID HE KICK", rules) == {Operation.COUNT}
    assert _match("how many field goals", rules) == {Operation.COUNT}


def test_template_must_cover_the_whole_question():
    rules = opera.rules.compile_rules_text("SPAN ::= which team")
    assert _match("Which team?", rules) == {Operation.SPAN}
    assert _match("Which team won?", rules) == set()


def test_compile_alternation():
    rules = opera.rules.compile_rules_text(
        "MAX/MIN ::= how many yards [Slot] longest/shortest [Slot]"
    )
    (template,) = rules.templates
    assert template.operations == (Operation.MAX, Operation.MIN)
    alternation = template.alternation()
    assert alternation is not None
    assert alternation.alternatives == (("longest",), ("shortest",))
    assert sum(isinstance(e, opera.rules.Slot) for e in template.pattern) == 2


def test_compile_single_operation():
    rules = opera.rules.compile_rules_text("COUNT ::= how many field goals [slot]")
    (template,) = rules.templates
    assert template.operations == (Operation.COUNT,)
    assert template.alternation() is None


def test_comments_and_blank_lines():
    rules = opera.rules.compile_rules_text("# comment\n\nSPAN ::= which team [Slot]\n")
    assert len(rules.templates) == 1


@pytest.mark.parametrize(
    "text, line_number",
    [
        ("SPAN ::= which team\nwhich team [Slot]", 2),
        ("SPAN ::= which ::= team", 1),
        ("\n\nSUM ::= how many [Slot]", 3),
        ("MAX/MIN ::= how many [Slot] longest/shortest/highest", 1),
        ("MAX/MIN ::= how many longest/shortest [Slot] more/less", 1),
        ("SPAN ::= [Slot]", 1),
    ],
)
def test_compile_errors(text, line_number):
    with pytest.raises(opera.errors.RuleCompileError) as e:
        opera.rules.compile_rules_text(text)
    assert e.value.line_number == line_number


def test_missing_rule_file(tmp_path):
    with pytest.raises(opera.errors.DataError):
        opera.rules.compile_ruleset(tmp_path / "missing.rules")


def test_version_tracks_rule_text():
    first = opera.rules.compile_rules_text("SPAN ::= which team [Slot]")
    same = opera.rules.compile_rules_text("SPAN ::= which team [Slot]")
    other = opera.rules.compile_rules_text("SPAN ::= which teams [Slot]")
    assert first.version == same.version
    assert first.version != other.version


def test_operation_distribution():
    distribution = opera.rules.operation_distribution(
        [("a", {Operation.MAX}), ("b", {Operation.MAX, Operation.COUNT})]
    )
    assert not distribution.empty
    assert distribution.fractions[Operation.MAX] == pytest.approx(2 / 3)
    assert distribution.fractions[Operation.COUNT] == pytest.approx(1 / 3)
    assert distribution.fractions[Operation.SPAN] == 0.0


def test_empty_distribution():
    distribution = opera.rules.operation_distribution([("a", set())])
    assert distribution.empty
    assert set(distribution.fractions.values()) == {0.0}


def test_synthetic_questions_cover_every_operation(default_rules):
    kinds = len(opera.corpus.synthetic.QUESTION_KINDS)
    corpus = opera.corpus.synthetic.generate_synthetic_corpus(kinds, seed=7)
    matched = [
        _match(entry["qa_pairs"][0]["question"], default_rules) for entry in corpus.values()
    ]
    assert matched == [
        {Operation.ADDITION},
        {Operation.DIFF},
        {Operation.MAX},
        {Operation.MIN},
        {Operation.ARGMAX},
        {Operation.ARGMIN},
        {Operation.ARGMORE},
        {Operation.ARGLESS},
        {Operation.COUNT},
        {Operation.KEY_VALUE},
        {Operation.SPAN},
        {Operation.SPAN},
    ]


def test_more_and_less_follow_the_listed_order(default_rules):
    question = "How many {} yards was the first field goal over the second?"
    assert _match(question.format("more"), default_rules) == {Operation.ADDITION}
    assert _match(question.format("less"), default_rules) == {Operation.DIFF}
    swapped = opera.rules.compile_rules_text(
        "DIFF/ADDITION ::= How many [Slot] more/less [Slot] over [Slot]?"
    )
    assert _match(question.format("more"), swapped) == {Operation.DIFF}
