#!/usr/bin/env python3
#
# This package maps questions to the operations they call for, using slot
# templates. The matched operations are weak labels for the operation
# selector.
#
# Rule file syntax, one rule per line:
#
#   MAX/MIN ::= how many yards [Slot] longest/shortest [Slot]
#
# "[Slot]" matches zero or more tokens. "a/b" is an alternation whose
# alternatives select, in order, the operations listed left of "::=". Lines
# starting with "#" are comments.

import collections
import dataclasses
import enum
import opera.corpus
import opera.errors
import opera.logging
import opera.utility
import pathlib
import re
import typing

logger = opera.logging.get_logger(__name__)


class Operation(enum.Enum):
    "Enumerates the symbolic reasoning units. Values are stable ordinals."
    ADDITION = 0
    DIFF = 1
    MAX = 2
    MIN = 3
    ARGMAX = 4
    ARGMIN = 5
    ARGMORE = 6
    ARGLESS = 7
    COUNT = 8
    KEY_VALUE = 9
    SPAN = 10

    @property
    def index(self) -> int:
        return self.value

    @classmethod
    def from_index(cls, index: int) -> "Operation":
        return cls(index)


OPERATIONS: typing.Tuple[Operation, ...] = tuple(Operation)

_SLOT_PATTERN = re.compile(r"\[slot\]", re.IGNORECASE)
_SLOT_SENTINEL = "\x00slot\x00"


@dataclasses.dataclass(frozen=True)
class Slot:
    pass


@dataclasses.dataclass(frozen=True)
class Literal:
    # Each alternative is a run of lower-cased words
    alternatives: typing.Tuple[typing.Tuple[str, ...], ...]

    @property
    def is_alternation(self) -> bool:
        return len(self.alternatives) > 1


PatternElement = typing.Union[Slot, Literal]


@dataclasses.dataclass(frozen=True)
class Template:
    pattern: typing.Tuple[PatternElement, ...]
    operations: typing.Tuple[Operation, ...]
    # Source line, kept for error messages and reports
    text: str = ""

    def alternation(self) -> typing.Optional[Literal]:
        for element in self.pattern:
            if isinstance(element, Literal) and element.is_alternation:
                return element
        return None


@dataclasses.dataclass(frozen=True)
class RuleSet:
    templates: typing.Tuple[Template, ...]
    version: str


@dataclasses.dataclass(frozen=True)
class OperationDistribution:
    fractions: typing.Dict[Operation, float]
    # Set when no instance carried any operation label
    empty: bool


def _words(text: str) -> typing.Tuple[str, ...]:
    "Lower-cased tokens with punctuation-only tokens removed"
    return tuple(
        token.text.lower()
        for token in opera.corpus.tokenize(text)
        if any(c.isalnum() for c in token.text)
    )


def _parse_operations(text: str, line_number: int) -> typing.Tuple[Operation, ...]:
    operations = []
    for tag in text.split("/"):
        tag = tag.strip().upper()
        if tag not in Operation.__members__:
            raise opera.errors.RuleCompileError(
                f"unknown operation {tag!r}", line_number=line_number
            )
        operations.append(Operation[tag])
    return tuple(operations)


def _parse_pattern(text: str, line_number: int) -> typing.Tuple[PatternElement, ...]:
    elements: typing.List[PatternElement] = []
    spaced = _SLOT_PATTERN.sub(f" {_SLOT_SENTINEL} ", text)
    for chunk in spaced.split():
        if chunk == _SLOT_SENTINEL:
            if not elements or not isinstance(elements[-1], Slot):
                elements.append(Slot())
        elif "/" in chunk:
            alternatives = tuple(_words(part) for part in chunk.split("/"))
            if not all(alternatives):
                raise opera.errors.RuleCompileError(
                    f"empty alternative in {chunk!r}", line_number=line_number
                )
            elements.append(Literal(alternatives=alternatives))
        else:
            elements.extend(Literal(alternatives=((word,),)) for word in _words(chunk))
    if not any(isinstance(e, Literal) for e in elements):
        raise opera.errors.RuleCompileError(
            "template needs at least one literal word", line_number=line_number
        )
    return tuple(elements)


def compile_rules_text(text: str) -> RuleSet:
    templates = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.count("::=") != 1:
            raise opera.errors.RuleCompileError(
                "expected 'OPERATION ::= pattern'", line_number=line_number
            )
        left, right = line.split("::=")
        operations = _parse_operations(left, line_number)
        pattern = _parse_pattern(right, line_number)
        alternations = [
            e for e in pattern if isinstance(e, Literal) and e.is_alternation
        ]
        if len(alternations) > 1:
            raise opera.errors.RuleCompileError(
                "at most one alternation per template", line_number=line_number
            )
        if alternations and len(alternations[0].alternatives) != len(operations):
            raise opera.errors.RuleCompileError(
                f"{len(alternations[0].alternatives)} alternatives but "
                f"{len(operations)} operations",
                line_number=line_number,
            )
        templates.append(Template(pattern=pattern, operations=operations, text=line))
    return RuleSet(
        templates=tuple(templates), version=opera.utility.sha512_hash(text)[:16]
    )


def compile_ruleset(path: typing.Union[str, pathlib.Path]) -> RuleSet:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Cannot read rule file {path}: {e}")
        raise opera.errors.DataError(f"{path}: {e}") from e
    ruleset = compile_rules_text(text)
    logger.info(f"Compiled {len(ruleset.templates)} rules from {path}")
    return ruleset


def default_rules_path() -> pathlib.Path:
    return opera.utility.resource_path("rules", "default.rules")


def default_ruleset() -> RuleSet:
    return compile_ruleset(default_rules_path())


def _matching_alternatives(
    pattern: typing.Tuple[PatternElement, ...], words: typing.Tuple[str, ...]
) -> typing.Set[typing.Optional[int]]:
    """
    Return the alternative indices chosen by every way the pattern can match
    the whole word sequence. None stands for "matched without alternation".
    An empty set means no match.
    """
    cache: typing.Dict[typing.Tuple[int, int], typing.FrozenSet[typing.Optional[int]]] = {}

    def match(element: int, position: int) -> typing.FrozenSet[typing.Optional[int]]:
        key = (element, position)
        if key in cache:
            return cache[key]
        found: typing.Set[typing.Optional[int]] = set()
        if element == len(pattern):
            if position == len(words):
                found.add(None)
        elif isinstance(pattern[element], Slot):
            for next_position in range(position, len(words) + 1):
                found |= match(element + 1, next_position)
        else:
            literal = typing.cast(Literal, pattern[element])
            for choice, run in enumerate(literal.alternatives):
                if words[position : position + len(run)] == run:
                    rest = match(element + 1, position + len(run))
                    if literal.is_alternation:
                        found |= {choice} if rest else set()
                    else:
                        found |= rest
        cache[key] = frozenset(found)
        return cache[key]

    return set(match(0, 0))


def match_operations(
    question: typing.Sequence[opera.corpus.Token], rules: RuleSet
) -> typing.Set[Operation]:
    """
    Return the union of the operations of every template matching the
    question. Matching ignores case and punctuation.
    """
    words = tuple(
        token.text.lower() for token in question if any(c.isalnum() for c in token.text)
    )
    operations: typing.Set[Operation] = set()
    for template in rules.templates:
        choices = _matching_alternatives(template.pattern, words)
        if not choices:
            continue
        if template.alternation() is None:
            operations.update(template.operations)
        else:
            operations.update(template.operations[c] for c in choices if c is not None)
    return operations


def operation_distribution(
    instances: typing.Iterable[typing.Tuple[str, typing.AbstractSet[Operation]]]
) -> OperationDistribution:
    "Share of each operation among all emitted operation labels"
    counts: typing.Counter[Operation] = collections.Counter()
    for _, operations in instances:
        counts.update(operations)
    total = sum(counts.values())
    if total == 0:
        return OperationDistribution(
            fractions={op: 0.0 for op in OPERATIONS}, empty=True
        )
    return OperationDistribution(
        fractions={op: counts[op] / total for op in OPERATIONS}, empty=False
    )
