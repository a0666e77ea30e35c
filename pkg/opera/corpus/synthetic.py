#!/usr/bin/env python3
#
# This module generates small DROP-format corpora of game summaries. Each
# passage carries one question; questions rotate through a fixed set of
# kinds so that every operation of the bundled rule file and every answer
# type is represented. Passages behind longest/shortest questions only
# mention the yardages being compared.

import numpy
import opera.logging
import typing

logger = opera.logging.get_logger(__name__)

KICKERS = (
    "David Akers",
    "John Potter",
    "Kris Brown",
    "Neil Rackers",
    "Jason Elam",
    "Matt Stover",
    "Adam Vinatieri",
    "Jeff Reed",
)
RECEIVERS = (
    "Terrell Owens",
    "Hines Ward",
    "Randy Moss",
    "Reggie Wayne",
    "Marvin Harrison",
    "Steve Smith",
    "Chad Johnson",
    "Torry Holt",
)
TEAMS = ("Eagles", "Steelers", "Patriots", "Colts", "Broncos", "Ravens", "Texans", "Cardinals")
TOWNS = ("Springfield", "Riverton", "Lakeside", "Fairview")
BELONGINGS = ("a car", "a bicycle", "a computer", "a dog")
# Yardages and percentages; kept narrow so every value recurs across passages
VALUES = tuple(range(10, 51))

QuestionKind = typing.Callable[[numpy.random.Generator], typing.Tuple[str, str, dict]]


def _pick(rng: numpy.random.Generator, pool: typing.Sequence, n: int) -> list:
    return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]


def _numbers(rng: numpy.random.Generator, n: int) -> typing.List[int]:
    return [int(v) for v in _pick(rng, VALUES, n)]


def _number_answer(value: int) -> dict:
    return {"number": str(value), "spans": [], "date": {"day": "", "month": "", "year": ""}}


def _span_answer(*spans: str) -> dict:
    return {"number": "", "spans": list(spans), "date": {"day": "", "month": "", "year": ""}}


def _game(
    rng: numpy.random.Generator,
    *,
    touchdowns: typing.Sequence[typing.Tuple[str, int]],
    field_goals: typing.Sequence[typing.Tuple[str, int]],
) -> str:
    home, away = _pick(rng, TEAMS, 2)
    sentences = [f"The {home} played the {away}."]
    sentences += [f"{r} caught a {y}-yard touchdown pass." for r, y in touchdowns]
    sentences += [f"{k} kicked a {y}-yard field goal." for k, y in field_goals]
    return " ".join(sentences)


def _addition(rng):
    while True:
        values = _numbers(rng, 5)
        count = int(rng.integers(2, 4))
        touchdowns = list(zip(_pick(rng, RECEIVERS, count), values[:count]))
        field_goals = list(zip(_pick(rng, KICKERS, 2), values[3:5]))
        total = sum(values[:count])
        if total not in values:
            break
    passage = _game(rng, touchdowns=touchdowns, field_goals=field_goals)
    question = "How many total yards of touchdown passes were there?"
    return passage, question, _number_answer(total)


def _difference(rng):
    while True:
        first, second = _numbers(rng, 2)
        touchdown = _numbers(rng, 1)[0]
        if first - second >= 10 and first - second not in (first, second, touchdown):
            break
    kickers = _pick(rng, KICKERS, 2)
    passage = _game(
        rng,
        touchdowns=[(_pick(rng, RECEIVERS, 1)[0], touchdown)],
        field_goals=[(kickers[0], first), (kickers[1], second)],
    )
    question = "How many yards difference was there between the first and second field goal?"
    return passage, question, _number_answer(first - second)


def _extreme_field_goal(longest: bool):
    def kind(rng):
        values = _numbers(rng, 3)
        passage = _game(
            rng, touchdowns=[], field_goals=list(zip(_pick(rng, KICKERS, 3), values))
        )
        word = "longest" if longest else "shortest"
        answer = max(values) if longest else min(values)
        return passage, f"How many yards was the {word} field goal?", _number_answer(answer)

    return kind


def _extreme_receiver(longest: bool):
    def kind(rng):
        touchdowns = list(zip(_pick(rng, RECEIVERS, 3), _numbers(rng, 3)))
        passage = _game(rng, touchdowns=touchdowns, field_goals=[])
        pick = max if longest else min
        receiver = pick(touchdowns, key=lambda t: t[1])[0]
        word = "longest" if longest else "shortest"
        return (
            passage,
            f"Which player had the {word} touchdown reception?",
            _span_answer(receiver),
        )

    return kind


def _comparison(more: bool):
    def kind(rng):
        a, b = _pick(rng, KICKERS, 2)
        made_a, made_b = (int(v) for v in rng.choice(numpy.arange(1, 6), size=2, replace=False))
        passage = (
            f"{a} made {made_a} field goals and {b} made {made_b} field goals "
            f"in the game."
        )
        winner = a if (made_a > made_b) == more else b
        word = "more" if more else "less"
        return passage, f"Who scored {word} field goals, {a} or {b}?", _span_answer(winner)

    return kind


def _count(rng):
    kicker, other = _pick(rng, KICKERS, 2)
    count = int(rng.integers(1, 5))
    values = _numbers(rng, count + 2)
    field_goals = [(kicker, y) for y in values[:count]] + [(other, values[count])]
    order = rng.permutation(len(field_goals))
    passage = _game(
        rng,
        touchdowns=[(_pick(rng, RECEIVERS, 1)[0], values[-1])],
        field_goals=[field_goals[i] for i in order],
    )
    return passage, f"How many field goals did {kicker} kick?", _number_answer(count)


def _percentage(rng):
    town = _pick(rng, TOWNS, 1)[0]
    asked, other = _pick(rng, BELONGINGS, 2)
    first, second = _numbers(rng, 2)
    passage = (
        f"In {town}, {first} percent of households owned {asked} and "
        f"{second} percent of households owned {other}."
    )
    question = f"How many percent of households owned {asked}?"
    return passage, question, _number_answer(first)


def _final_touchdown(rng):
    winner, loser = _pick(rng, TEAMS, 2)
    values = _numbers(rng, 2)
    receiver = _pick(rng, RECEIVERS, 1)[0]
    passage = (
        f"The {loser} played the {winner}. {receiver} caught a {values[0]}-yard "
        f"touchdown pass. The {winner} scored the final touchdown on a {values[1]}-yard run."
    )
    return passage, "Which team scored the final touchdown?", _span_answer(winner)


def _touchdown_receivers(rng):
    receivers = _pick(rng, RECEIVERS, 2)
    values = _numbers(rng, 3)
    passage = _game(
        rng,
        touchdowns=list(zip(receivers, values[:2])),
        field_goals=[(_pick(rng, KICKERS, 1)[0], values[2])],
    )
    return passage, "Which players caught touchdown passes?", _span_answer(*receivers)


QUESTION_KINDS: typing.Tuple[QuestionKind, ...] = (
    _addition,
    _difference,
    _extreme_field_goal(longest=True),
    _extreme_field_goal(longest=False),
    _extreme_receiver(longest=True),
    _extreme_receiver(longest=False),
    _comparison(more=True),
    _comparison(more=False),
    _count,
    _percentage,
    _final_touchdown,
    _touchdown_receivers,
)


def generate_synthetic_corpus(n: int, *, seed: int, prefix: str = "synthetic") -> dict:
    "Return n passages in DROP layout, one question each"
    rng = numpy.random.default_rng(seed)
    corpus = {}
    for i in range(n):
        passage, question, answer = QUESTION_KINDS[i % len(QUESTION_KINDS)](rng)
        passage_id = f"{prefix}_{i:04d}"
        corpus[passage_id] = {
            "passage": passage,
            "qa_pairs": [
                {
                    "query_id": f"{passage_id}_q",
                    "question": question,
                    "answer": answer,
                    "validated_answers": [],
                }
            ],
        }
    logger.info(f"Generated {n} synthetic passages with seed {seed}")
    return corpus
