#!/usr/bin/env python3
#
# This module contains DROP-style answer normalization and the EM/F1 metrics.
# Derivation search reuses normalize() so that "this derivation yields the
# gold answer" and "this prediction is correct" mean the same thing.

import collections
import dataclasses
import numpy
import re
import scipy.optimize
import string
import typing

_ARTICLES = {"a", "an", "the"}
_NUMBER = re.compile(r"[+-]?\d+(?:\.\d+)?")
# Punctuation other than hyphens is always removed; hyphens survive only
# between two characters of a token ("1963-1974").
_PUNCTUATION = set(string.punctuation) - {"-"}


@dataclasses.dataclass(frozen=True)
class NormalizedAnswer:
    text: str
    tokens: typing.Tuple[str, ...]


def _canonical_number(token: str) -> typing.Optional[str]:
    stripped = token.replace(",", "")
    if not _NUMBER.fullmatch(stripped):
        return None
    value = float(stripped)
    if value.is_integer():
        return str(int(value))
    return repr(value)


def _normalize_token(token: str) -> str:
    number = _canonical_number(token)
    if number is not None:
        return number
    token = "".join(c for c in token if c not in _PUNCTUATION).strip("-")
    if token in _ARTICLES:
        return ""
    return token


def normalize(answer: str) -> NormalizedAnswer:
    """
    Lower-case, canonicalize numbers (73.0 == 73), strip punctuation, drop
    articles and collapse whitespace.
    """
    tokens = tuple(
        t for t in (_normalize_token(raw) for raw in answer.lower().split()) if t
    )
    return NormalizedAnswer(text=" ".join(tokens), tokens=tokens)


def answers_match(
    predicted: typing.Sequence[str], gold: typing.Sequence[str]
) -> bool:
    "True when both answers normalize to the same set of strings"
    return {normalize(p).text for p in predicted} == {normalize(g).text for g in gold}


def _is_number(token: str) -> bool:
    return _NUMBER.fullmatch(token) is not None


def _bag_f1(predicted: NormalizedAnswer, gold: NormalizedAnswer) -> float:
    if not predicted.tokens and not gold.tokens:
        return 1.0
    if not predicted.tokens or not gold.tokens:
        return 0.0
    # A numeric gold answer is only matched by a prediction sharing a number
    gold_numbers = {t for t in gold.tokens if _is_number(t)}
    if gold_numbers and not gold_numbers & set(predicted.tokens):
        return 0.0
    common = collections.Counter(predicted.tokens) & collections.Counter(gold.tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted.tokens)
    recall = overlap / len(gold.tokens)
    return 2 * precision * recall / (precision + recall)


def em_f1(
    predicted: typing.Sequence[str], gold: typing.Sequence[str]
) -> typing.Tuple[float, float]:
    """
    EM is 1 when the normalized multisets are equal. F1 aligns predicted and
    gold spans one-to-one so that the summed bag-of-words F1 is maximal, then
    averages over the larger of the two span counts.
    """
    predicted_norm = [normalize(p) for p in predicted]
    gold_norm = [normalize(g) for g in gold]
    em = float(
        collections.Counter(p.text for p in predicted_norm)
        == collections.Counter(g.text for g in gold_norm)
    )
    if not predicted_norm or not gold_norm:
        return em, em
    scores = numpy.array(
        [[_bag_f1(p, g) for g in gold_norm] for p in predicted_norm], dtype=numpy.float64
    )
    rows, columns = scipy.optimize.linear_sum_assignment(scores, maximize=True)
    f1 = float(scores[rows, columns].sum()) / max(len(predicted_norm), len(gold_norm))
    return em, max(em, round(f1, 12))


def best_em_f1(
    predicted: typing.Sequence[str], alternatives: typing.Sequence[typing.Sequence[str]]
) -> typing.Tuple[float, float]:
    "Score against several gold alternates and keep the best EM and F1"
    scores = [em_f1(predicted, gold) for gold in alternatives]
    return max(s[0] for s in scores), max(s[1] for s in scores)
