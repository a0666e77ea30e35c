#!/usr/bin/env python3
#
# Shared fixtures. Tests marked "acceptance" train full-size models and only
# run when OPERA_ACCEPTANCE=1.

import json
import opera.configuration
import opera.corpus
import opera.corpus.synthetic
import opera.rules
import opera.utility
import os
import pathlib
import pytest
import typing


def pytest_collection_modifyitems(config, items):
    if os.getenv("OPERA_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="set OPERA_ACCEPTANCE=1 to run")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


def make_raw(
    question: str,
    passage: str,
    *,
    number: typing.Optional[str] = None,
    spans: typing.Sequence[str] = (),
    id: str = "q0",
) -> opera.corpus.RawInstance:
    if number is not None:
        answer = opera.corpus.GoldAnswer(kind="number", number_text=number)
    else:
        answer = opera.corpus.GoldAnswer(kind="spans", spans=tuple(spans))
    return opera.corpus.RawInstance(
        id=id,
        passage_id=f"{id}_passage",
        passage_text=passage,
        question_text=question,
        answers=(answer,),
    )


def prepare(
    raw: opera.corpus.RawInstance, *, max_seq_len: int = 128
) -> opera.corpus.PreparedInstance:
    vocabulary = opera.corpus.build_vocabulary([raw], min_count=1)
    return opera.corpus.prepare_instance(raw, vocabulary, max_seq_len)


def write_synthetic(
    path: pathlib.Path, n: int, *, seed: int, prefix: str = "synthetic"
) -> pathlib.Path:
    corpus = opera.corpus.synthetic.generate_synthetic_corpus(n, seed=seed, prefix=prefix)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(corpus, f)
    return path


def small_configuration(**overrides) -> opera.configuration.TrainingConfiguration:
    data = opera.utility.merge_complex_dictionaries(
        {
            "epochs": 2,
            "batch_size": 8,
            "vocab_min_count": 1,
            "model": {"d_h": 16, "n_h": 4, "encoder_layers": 1, "max_seq_len": 96},
        },
        overrides,
    )
    return opera.configuration.configuration_from_dict(data)


@pytest.fixture(scope="session")
def default_rules() -> opera.rules.RuleSet:
    return opera.rules.default_ruleset()


# The passage and question of a field-goal game whose answer, 80, is derivable
# both as a passage span and as a one-term expression
TOUCHDOWN_PASSAGE = (
    "Oakland would take the lead in the third quarter with wide receiver "
    "Johnnie Lee Higgins catching a 29-yard touchdown pass from Russell, "
    "followed up by an 80-yard punt return for a touchdown."
)
TOUCHDOWN_QUESTION = "How many yards was the longest touchdown?"


@pytest.fixture
def touchdown_instance() -> opera.corpus.PreparedInstance:
    return prepare(make_raw(TOUCHDOWN_QUESTION, TOUCHDOWN_PASSAGE, number="80"))
