#!/usr/bin/env python3
#
# This package searches the derivations (answer type, label) whose execution
# yields an instance's gold answer, and executes derivations back to answer
# text. The labelled instances it produces are the training set.

import dataclasses
import decimal
import enum
import itertools
import opera.corpus
import opera.errors
import opera.logging
import opera.metrics
import opera.rules
import typing

logger = opera.logging.get_logger(__name__)

ARITHMETIC_TOLERANCE = decimal.Decimal("1e-5")
MAX_COUNT = 9
BIO_TAGS = ("B", "I", "O")


class AnswerType(enum.Enum):
    QUESTION_SPAN = 0
    PASSAGE_SPAN = 1
    COUNT = 2
    ARITHMETIC_EXPRESSION = 3
    MULTI_SPANS = 4

    @property
    def index(self) -> int:
        return self.value

    @property
    def tag(self) -> str:
        "Name used in labelled files and reports"
        return "".join(part.capitalize() for part in self.name.split("_"))

    @classmethod
    def from_index(cls, index: int) -> "AnswerType":
        return cls(index)

    @classmethod
    def from_tag(cls, tag: str) -> "AnswerType":
        for answer_type in cls:
            if answer_type.tag == tag:
                return answer_type
        raise ValueError(f"unknown answer type {tag!r}")


ANSWER_TYPES: typing.Tuple[AnswerType, ...] = tuple(AnswerType)


@dataclasses.dataclass(frozen=True)
class SpanLabel:
    # Inclusive joint-sequence positions
    start: int
    end: int


@dataclasses.dataclass(frozen=True)
class SignVector:
    # One of -1, 0, +1 per number mention, in mention order
    signs: typing.Tuple[int, ...]


@dataclasses.dataclass(frozen=True)
class CountLabel:
    k: int


@dataclasses.dataclass(frozen=True)
class BioLabel:
    # One of B, I, O per joint-sequence position
    tags: typing.Tuple[str, ...]


Label = typing.Union[SpanLabel, SignVector, CountLabel, BioLabel]

_LABEL_TYPES: typing.Dict[AnswerType, type] = {
    AnswerType.QUESTION_SPAN: SpanLabel,
    AnswerType.PASSAGE_SPAN: SpanLabel,
    AnswerType.COUNT: CountLabel,
    AnswerType.ARITHMETIC_EXPRESSION: SignVector,
    AnswerType.MULTI_SPANS: BioLabel,
}


@dataclasses.dataclass(frozen=True)
class Derivation:
    answer_type: AnswerType
    label: Label

    def __post_init__(self):
        expected = _LABEL_TYPES[self.answer_type]
        if not isinstance(self.label, expected):
            raise opera.errors.ExecutionError(
                f"{self.answer_type.tag} needs a {expected.__name__}, "
                f"got {type(self.label).__name__}"
            )

    def to_json(self) -> dict:
        data: typing.Dict[str, typing.Any] = {"type": self.answer_type.tag}
        if isinstance(self.label, SpanLabel):
            data.update(start=self.label.start, end=self.label.end)
        elif isinstance(self.label, SignVector):
            data["signs"] = list(self.label.signs)
        elif isinstance(self.label, CountLabel):
            data["count"] = self.label.k
        else:
            data["tags"] = "".join(self.label.tags)
        return data


@dataclasses.dataclass(frozen=True)
class DerivationSet:
    derivations: typing.Tuple[Derivation, ...]
    gold_answer: opera.corpus.GoldAnswer
    # Candidates dropped because they did not execute to the gold answer
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.derivations)

    def __iter__(self) -> typing.Iterator[Derivation]:
        return iter(self.derivations)


@dataclasses.dataclass(frozen=True)
class LabeledInstance:
    prepared: opera.corpus.PreparedInstance
    operations: typing.FrozenSet[opera.rules.Operation]
    derivations: DerivationSet

    @property
    def usable(self) -> bool:
        return len(self.derivations) > 0

    @property
    def id(self) -> str:
        return self.prepared.raw.id

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "operations": [
                op.name for op in sorted(self.operations, key=lambda op: op.index)
            ],
            "derivations": [d.to_json() for d in self.derivations],
            "usable": self.usable,
        }


def format_decimal(value: decimal.Decimal) -> str:
    "Integral values print without a fractional part"
    if value == value.to_integral_value():
        return str(int(value))
    return format(value.normalize(), "f")


def bio_spans(tags: typing.Sequence[str]) -> typing.List[typing.Tuple[int, int]]:
    """
    Return the inclusive (start, end) positions of the maximal B/I runs. An I
    after O or at the start is a malformed tagging and raises.
    """
    spans: typing.List[typing.Tuple[int, int]] = []
    start: typing.Optional[int] = None
    for i, tag in enumerate(tags):
        if tag == "B":
            if start is not None:
                spans.append((start, i - 1))
            start = i
        elif tag == "I":
            if start is None:
                raise opera.errors.ExecutionError(f"I tag without B at position {i}")
        elif tag == "O":
            if start is not None:
                spans.append((start, i - 1))
            start = None
        else:
            raise opera.errors.ExecutionError(f"unknown BIO tag {tag!r}")
    if start is not None:
        spans.append((start, len(tags) - 1))
    return spans


def bio_tags(
    spans: typing.Iterable[typing.Tuple[int, int]], length: int
) -> typing.Tuple[str, ...]:
    tags = ["O"] * length
    for start, end in spans:
        tags[start] = "B"
        for i in range(start + 1, end + 1):
            tags[i] = "I"
    return tuple(tags)


def _check_span(
    start: int, end: int, ctx: opera.corpus.Context
) -> opera.corpus.Source:
    segment = ctx.segment_of(start)
    if start > end or segment is None or ctx.segment_of(end) != segment:
        raise opera.errors.ExecutionError(
            f"span ({start}, {end}) does not lie inside one segment"
        )
    return segment


def validate(
    d: Derivation,
    ctx: opera.corpus.Context,
    numbers: typing.Sequence[opera.corpus.NumberMention],
) -> None:
    "Raise ExecutionError when the derivation's label does not fit the context"
    label = d.label
    if isinstance(label, SpanLabel):
        segment = _check_span(label.start, label.end, ctx)
        expected = (
            AnswerType.QUESTION_SPAN if segment == "question" else AnswerType.PASSAGE_SPAN
        )
        if d.answer_type != expected:
            raise opera.errors.ExecutionError(
                f"{d.answer_type.tag} label lies in the {segment}"
            )
    elif isinstance(label, SignVector):
        if len(label.signs) != len(numbers):
            raise opera.errors.ExecutionError(
                f"{len(label.signs)} signs for {len(numbers)} numbers"
            )
        if any(s not in (-1, 0, 1) for s in label.signs):
            raise opera.errors.ExecutionError(f"invalid signs {label.signs}")
    elif isinstance(label, CountLabel):
        if not 0 <= label.k <= MAX_COUNT:
            raise opera.errors.ExecutionError(f"count {label.k} out of range")
    else:
        if len(label.tags) != len(ctx):
            raise opera.errors.ExecutionError(
                f"{len(label.tags)} BIO tags for a sequence of {len(ctx)}"
            )
        for start, end in bio_spans(label.tags):
            _check_span(start, end, ctx)


def execute(
    d: Derivation,
    ctx: opera.corpus.Context,
    numbers: typing.Sequence[opera.corpus.NumberMention],
) -> typing.List[str]:
    "Render a derivation's answer; the result is a list of answer strings"
    validate(d, ctx, numbers)
    label = d.label
    if isinstance(label, SpanLabel):
        return [ctx.surface_text(label.start, label.end)]
    if isinstance(label, SignVector):
        total = sum(
            (sign * mention.value for sign, mention in zip(label.signs, numbers)),
            decimal.Decimal(0),
        )
        return [format_decimal(total)]
    if isinstance(label, CountLabel):
        return [str(label.k)]
    return [ctx.surface_text(start, end) for start, end in bio_spans(label.tags)]


def _words(text: str) -> typing.Tuple[str, ...]:
    return tuple(token.text.lower() for token in opera.corpus.tokenize(text))


def _occurrences(
    ctx: opera.corpus.Context, segment: opera.corpus.Source, text: str
) -> typing.List[typing.Tuple[int, int]]:
    "Token-aligned occurrences of text in a segment, as joint positions"
    needle = _words(text)
    if not needle:
        return []
    haystack = [token.text.lower() for token in ctx.segment_tokens(segment)]
    offset = ctx.segment_range(segment)[0]
    return [
        (offset + i, offset + i + len(needle) - 1)
        for i in range(len(haystack) - len(needle) + 1)
        if tuple(haystack[i : i + len(needle)]) == needle
    ]


def _single_span_text(gold: opera.corpus.GoldAnswer) -> typing.Optional[str]:
    if gold.kind == "number":
        return gold.number_text
    texts = gold.texts()
    return texts[0] if len(texts) == 1 else None


def search_spans(
    ctx: opera.corpus.Context, gold: opera.corpus.GoldAnswer
) -> typing.List[Derivation]:
    text = _single_span_text(gold)
    if text is None:
        return []
    derivations = []
    for segment, answer_type in (
        ("question", AnswerType.QUESTION_SPAN),
        ("passage", AnswerType.PASSAGE_SPAN),
    ):
        for start, end in _occurrences(ctx, typing.cast(opera.corpus.Source, segment), text):
            derivations.append(Derivation(answer_type, SpanLabel(start=start, end=end)))
    return derivations


def _gold_number(gold: opera.corpus.GoldAnswer) -> typing.Optional[decimal.Decimal]:
    if gold.kind != "number" or gold.number_text is None:
        return None
    try:
        value = decimal.Decimal(gold.number_text.replace(",", "").strip())
    except decimal.InvalidOperation:
        return None
    # NaN and Infinity parse but cannot be counted or reached by a sum
    return value if value.is_finite() else None


def search_arithmetic(
    numbers: typing.Sequence[opera.corpus.NumberMention],
    gold: opera.corpus.GoldAnswer,
    max_terms: int = 3,
    tol: decimal.Decimal = ARITHMETIC_TOLERANCE,
) -> typing.List[Derivation]:
    """
    Enumerate every sign vector with 1..max_terms non-zero signs whose signed
    sum is within tol of the gold number. Mentions at different positions are
    distinct even when their values are equal.
    """
    target = _gold_number(gold)
    if target is None or not numbers:
        return []
    tol = decimal.Decimal(tol)
    derivations = []
    for terms in range(1, min(max_terms, len(numbers)) + 1):
        for indices in itertools.combinations(range(len(numbers)), terms):
            for chosen in itertools.product((1, -1), repeat=terms):
                total = sum(
                    (s * numbers[i].value for s, i in zip(chosen, indices)),
                    decimal.Decimal(0),
                )
                if abs(total - target) <= tol:
                    signs = [0] * len(numbers)
                    for s, i in zip(chosen, indices):
                        signs[i] = s
                    derivations.append(
                        Derivation(
                            AnswerType.ARITHMETIC_EXPRESSION, SignVector(signs=tuple(signs))
                        )
                    )
    return derivations


def search_count(gold: opera.corpus.GoldAnswer) -> typing.List[Derivation]:
    value = _gold_number(gold)
    if value is None or value != value.to_integral_value():
        return []
    k = int(value)
    if not 0 <= k <= MAX_COUNT:
        return []
    return [Derivation(AnswerType.COUNT, CountLabel(k=k))]


def search_multispan(
    ctx: opera.corpus.Context, gold: opera.corpus.GoldAnswer
) -> typing.List[Derivation]:
    """
    Tag every passage occurrence of every gold span. Overlapping occurrences
    are resolved longest first, then left to right.
    """
    if gold.kind == "number":
        return []
    occurrences = []
    for text in gold.texts():
        found = _occurrences(ctx, "passage", text)
        if not found:
            return []
        occurrences.extend(found)
    occurrences.sort(key=lambda span: (-(span[1] - span[0]), span[0]))
    taken: typing.Set[int] = set()
    kept = []
    for start, end in occurrences:
        positions = set(range(start, end + 1))
        if positions & taken:
            continue
        taken |= positions
        kept.append((start, end))
    return [Derivation(AnswerType.MULTI_SPANS, BioLabel(tags=bio_tags(kept, len(ctx))))]


def search_all(
    ctx: opera.corpus.Context,
    numbers: typing.Sequence[opera.corpus.NumberMention],
    gold: opera.corpus.GoldAnswer,
    *,
    max_terms: int = 3,
) -> DerivationSet:
    candidates = (
        search_spans(ctx, gold)
        + search_arithmetic(numbers, gold, max_terms=max_terms)
        + search_count(gold)
        + search_multispan(ctx, gold)
    )
    gold_texts = gold.texts()
    kept: typing.List[Derivation] = []
    rejected = 0
    for d in candidates:
        if d in kept:
            continue
        if opera.metrics.answers_match(execute(d, ctx, numbers), gold_texts):
            kept.append(d)
        else:
            rejected += 1
    if rejected:
        logger.warning(f"Rejected {rejected} derivations not yielding {gold_texts}")
    return DerivationSet(derivations=tuple(kept), gold_answer=gold, rejected=rejected)


def label_instance(
    prepared: opera.corpus.PreparedInstance,
    rules: opera.rules.RuleSet,
    *,
    max_terms: int = 3,
) -> LabeledInstance:
    operations = opera.rules.match_operations(prepared.context.question_tokens, rules)
    derivations = search_all(
        prepared.context, prepared.numbers, prepared.raw.answer, max_terms=max_terms
    )
    return LabeledInstance(
        prepared=prepared, operations=frozenset(operations), derivations=derivations
    )


def label_dataset(
    prepared: typing.Iterable[opera.corpus.PreparedInstance],
    rules: opera.rules.RuleSet,
    *,
    max_terms: int = 3,
) -> typing.List[LabeledInstance]:
    labeled = [label_instance(p, rules, max_terms=max_terms) for p in prepared]
    unusable = sum(1 for instance in labeled if not instance.usable)
    logger.info(
        f"Labelled {len(labeled)} instances; {unusable} have no derivation and are unusable"
    )
    return labeled
