#!/usr/bin/env python3
#
# This package ingests DROP-format data: it tokenizes passages and questions,
# extracts number mentions and builds the joint question-passage sequence
# consumed by the model.

import collections
import dataclasses
import decimal
import json
import opera.errors
import opera.logging
import pathlib
import re
import typing

logger = opera.logging.get_logger(__name__)

Source = typing.Literal["question", "passage"]
AnswerKind = typing.Literal["number", "spans", "date"]

# Numbers are tried first so that "53-yard" yields "53" and "3rd" yields "3".
# Letter runs exclude digits so every digit run ends up inside a number token.
_TOKEN_PATTERN = re.compile(
    r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|[^\W\d_]+|\S", re.UNICODE
)
_NUMBER_PATTERN = re.compile(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?")

WORD_NUMBERS = {
    "zero": 0,
    "one": 1,
    "two": 2,
    "three": 3,
    "four": 4,
    "five": 5,
    "six": 6,
    "seven": 7,
    "eight": 8,
    "nine": 9,
    "ten": 10,
}

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED_TOKENS = (PAD, UNK, CLS, SEP)


@dataclasses.dataclass(frozen=True)
class Token:
    text: str
    # Offsets into the source string, end exclusive
    char_start: int
    char_end: int


@dataclasses.dataclass(frozen=True)
class NumberMention:
    value: decimal.Decimal
    # Index into the token sequence of the owning segment
    token_index: int
    source: Source


@dataclasses.dataclass(frozen=True)
class GoldAnswer:
    kind: AnswerKind
    number_text: typing.Optional[str] = None
    spans: typing.Tuple[str, ...] = ()
    # (day, month, year)
    date: typing.Optional[typing.Tuple[str, str, str]] = None

    def __post_init__(self):
        if self.kind == "number":
            assert self.number_text and not self.spans and self.date is None
        elif self.kind == "spans":
            assert self.spans and self.number_text is None and self.date is None
        else:
            assert self.date is not None and any(self.date)
            assert self.number_text is None and not self.spans

    def texts(self) -> typing.List[str]:
        """
        Return the answer as a list of strings. Dates are flattened to a
        single span made of their non-empty day, month and year fields.
        """
        if self.kind == "number":
            assert self.number_text is not None
            return [self.number_text]
        if self.kind == "spans":
            return list(self.spans)
        assert self.date is not None
        return [" ".join(part for part in self.date if part)]

    def to_json(self) -> dict:
        if self.kind == "number":
            return {"kind": "number", "number": self.number_text}
        if self.kind == "spans":
            return {"kind": "spans", "spans": list(self.spans)}
        assert self.date is not None
        day, month, year = self.date
        return {"kind": "date", "date": {"day": day, "month": month, "year": year}}


@dataclasses.dataclass(frozen=True)
class RawInstance:
    id: str
    passage_id: str
    passage_text: str
    question_text: str
    # The first answer is primary; the rest are validation alternates
    answers: typing.Tuple[GoldAnswer, ...]

    @property
    def answer(self) -> GoldAnswer:
        return self.answers[0]


@dataclasses.dataclass(frozen=True)
class IngestReport:
    instances: int
    # (passage id, query id) of every qa_pair without any answer field
    skipped: typing.Tuple[typing.Tuple[str, str], ...]


class Vocabulary:
    """
    Maps lower-cased tokens to integer ids. Ids 0-3 are reserved for the pad,
    unknown and the two separator tokens.
    """

    def __init__(self, tokens: typing.Sequence[str]):
        assert tuple(tokens[: len(RESERVED_TOKENS)]) == RESERVED_TOKENS
        assert len(set(tokens)) == len(tokens), "vocabulary tokens must be unique"
        self.__tokens = list(tokens)
        self.__ids = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.__tokens)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.__ids

    @property
    def tokens(self) -> typing.List[str]:
        return list(self.__tokens)

    @property
    def unk_id(self) -> int:
        return self.__ids[UNK]

    @property
    def cls_id(self) -> int:
        return self.__ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.__ids[SEP]

    def lookup(self, token: str) -> int:
        return self.__ids.get(token.lower(), self.unk_id)


@dataclasses.dataclass(frozen=True)
class Context:
    question_tokens: typing.Tuple[Token, ...]
    # Passage tokens after truncation
    passage_tokens: typing.Tuple[Token, ...]
    joint_ids: typing.Tuple[int, ...]
    # Half-open index intervals into joint_ids
    q_range: typing.Tuple[int, int]
    p_range: typing.Tuple[int, int]
    question_text: str
    passage_text: str

    def __len__(self) -> int:
        return len(self.joint_ids)

    def joint_index(self, mention: NumberMention) -> int:
        "Return the joint-sequence position of a number mention"
        start = self.q_range[0] if mention.source == "question" else self.p_range[0]
        return start + mention.token_index

    def segment_of(self, index: int) -> typing.Optional[Source]:
        if self.q_range[0] <= index < self.q_range[1]:
            return "question"
        if self.p_range[0] <= index < self.p_range[1]:
            return "passage"
        return None

    def surface_text(self, start: int, end: int) -> str:
        """
        Return the source text covered by the joint positions start..end
        (inclusive). Both positions must lie in the same segment.
        """
        segment = self.segment_of(start)
        assert segment is not None and segment == self.segment_of(end)
        assert start <= end
        if segment == "question":
            tokens, text, offset = self.question_tokens, self.question_text, self.q_range[0]
        else:
            tokens, text, offset = self.passage_tokens, self.passage_text, self.p_range[0]
        return text[tokens[start - offset].char_start : tokens[end - offset].char_end]

    def segment_tokens(self, segment: Source) -> typing.Tuple[Token, ...]:
        return self.question_tokens if segment == "question" else self.passage_tokens

    def segment_range(self, segment: Source) -> typing.Tuple[int, int]:
        return self.q_range if segment == "question" else self.p_range


@dataclasses.dataclass(frozen=True)
class PreparedInstance:
    raw: RawInstance
    context: Context
    # Question mentions then passage mentions, in token order; mentions
    # removed by truncation are dropped
    numbers: typing.Tuple[NumberMention, ...]


def tokenize(text: str) -> typing.List[Token]:
    """
    Split text on whitespace and punctuation. Numbers are always their own
    token, including inside hyphenated compounds and ordinals.
    """
    return [
        Token(text=match.group(), char_start=match.start(), char_end=match.end())
        for match in _TOKEN_PATTERN.finditer(text)
    ]


def parse_number(text: str) -> typing.Optional[decimal.Decimal]:
    "Parse a token's text as a number, or return None"
    if _NUMBER_PATTERN.fullmatch(text):
        return decimal.Decimal(text.replace(",", ""))
    lowered = text.lower()
    if lowered in WORD_NUMBERS:
        return decimal.Decimal(WORD_NUMBERS[lowered])
    return None


def extract_numbers(
    tokens: typing.Sequence[Token], source: Source
) -> typing.List[NumberMention]:
    mentions = []
    for i, token in enumerate(tokens):
        value = parse_number(token.text)
        if value is not None:
            mentions.append(NumberMention(value=value, token_index=i, source=source))
    return mentions


def build_vocabulary(
    instances: typing.Iterable[RawInstance], *, min_count: int = 2
) -> Vocabulary:
    counts: typing.Counter[str] = collections.Counter()
    for instance in instances:
        for text in (instance.question_text, instance.passage_text):
            counts.update(token.text.lower() for token in tokenize(text))
    kept = sorted(
        (token for token, count in counts.items() if count >= min_count),
        key=lambda token: (-counts[token], token),
    )
    return Vocabulary(list(RESERVED_TOKENS) + [t for t in kept if t not in RESERVED_TOKENS])


def build_context(
    q_tokens: typing.Sequence[Token],
    p_tokens: typing.Sequence[Token],
    vocab: Vocabulary,
    max_seq_len: int,
    *,
    question_text: str = "",
    passage_text: str = "",
) -> Context:
    """
    Build [CLS] question [SEP] passage [SEP]. The passage is truncated from
    the right when the sequence would exceed max_seq_len; the question never
    is.
    """
    question_length = len(q_tokens)
    if question_length + 3 > max_seq_len:
        raise opera.errors.DataError(
            f"question of {question_length} tokens does not fit in max_seq_len={max_seq_len}"
        )
    passage_budget = max_seq_len - question_length - 3
    kept_passage = tuple(p_tokens[:passage_budget])

    joint_ids = (
        [vocab.cls_id]
        + [vocab.lookup(t.text) for t in q_tokens]
        + [vocab.sep_id]
        + [vocab.lookup(t.text) for t in kept_passage]
        + [vocab.sep_id]
    )
    q_start = 1
    p_start = question_length + 2
    return Context(
        question_tokens=tuple(q_tokens),
        passage_tokens=kept_passage,
        joint_ids=tuple(joint_ids),
        q_range=(q_start, q_start + question_length),
        p_range=(p_start, p_start + len(kept_passage)),
        question_text=question_text,
        passage_text=passage_text,
    )


def prepare_instance(
    raw: RawInstance, vocab: Vocabulary, max_seq_len: int
) -> PreparedInstance:
    q_tokens = tokenize(raw.question_text)
    p_tokens = tokenize(raw.passage_text)
    context = build_context(
        q_tokens,
        p_tokens,
        vocab,
        max_seq_len,
        question_text=raw.question_text,
        passage_text=raw.passage_text,
    )
    numbers = extract_numbers(q_tokens, "question") + [
        mention
        for mention in extract_numbers(p_tokens, "passage")
        if mention.token_index < len(context.passage_tokens)
    ]
    return PreparedInstance(raw=raw, context=context, numbers=tuple(numbers))


def prepare_dataset(
    instances: typing.Iterable[RawInstance], vocab: Vocabulary, max_seq_len: int
) -> typing.List[PreparedInstance]:
    "Prepare every instance, skipping those whose question does not fit"
    prepared = []
    for raw in instances:
        try:
            prepared.append(prepare_instance(raw, vocab, max_seq_len))
        except opera.errors.DataError as e:
            logger.warning(f"Skipping {raw.id}: {e}")
    return prepared


def _parse_answer(answer: dict) -> typing.Optional[GoldAnswer]:
    # Precedence when several fields are filled: number > spans > date
    number = str(answer.get("number") or "").strip()
    if number:
        return GoldAnswer(kind="number", number_text=number)
    spans = tuple(s for s in answer.get("spans") or [] if s.strip())
    if spans:
        return GoldAnswer(kind="spans", spans=spans)
    date = answer.get("date") or {}
    parts = tuple(str(date.get(k) or "").strip() for k in ("day", "month", "year"))
    if any(parts):
        return GoldAnswer(kind="date", date=typing.cast(typing.Tuple[str, str, str], parts))
    return None


def read_drop_json(
    path: typing.Union[str, pathlib.Path]
) -> typing.Tuple[typing.List[RawInstance], IngestReport]:
    """
    Read a file in DROP layout. Returns one RawInstance per answerable
    qa_pair, in file order, and a report of the skipped ones.
    """
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Cannot parse {path}: {e}")
        raise opera.errors.DataError(f"{path}: invalid JSON: {e}") from e
    except OSError as e:
        logger.error(f"Cannot read {path}: {e}")
        raise opera.errors.DataError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise opera.errors.DataError(f"{path}: top level must map passage ids to passages")

    instances: typing.List[RawInstance] = []
    skipped: typing.List[typing.Tuple[str, str]] = []
    for passage_id, entry in data.items():
        try:
            passage_text = entry["passage"]
            for qa_pair in entry["qa_pairs"]:
                query_id = qa_pair["query_id"]
                answers = [_parse_answer(qa_pair["answer"])] + [
                    _parse_answer(a) for a in qa_pair.get("validated_answers") or []
                ]
                if answers[0] is None:
                    logger.warning(f"Skipping {passage_id}/{query_id}: empty answer")
                    skipped.append((passage_id, query_id))
                    continue
                instances.append(
                    RawInstance(
                        id=query_id,
                        passage_id=passage_id,
                        passage_text=passage_text,
                        question_text=qa_pair["question"],
                        answers=tuple(a for a in answers if a is not None),
                    )
                )
        except (KeyError, TypeError, AttributeError) as e:
            raise opera.errors.DataError(
                f"{path}: malformed passage {passage_id!r}: {e!r}"
            ) from e

    seen: typing.Set[str] = set()
    for instance in instances:
        if instance.id in seen:
            raise opera.errors.DataError(f"{path}: duplicate query_id {instance.id!r}")
        seen.add(instance.id)

    if skipped:
        logger.warning(f"Skipped {len(skipped)} qa_pairs without an answer in {path}")
    return instances, IngestReport(instances=len(instances), skipped=tuple(skipped))


def load_drop_json(path: typing.Union[str, pathlib.Path]) -> typing.List[RawInstance]:
    instances, _ = read_drop_json(path)
    return instances


def instance_to_json(prepared: PreparedInstance) -> dict:
    return {
        "id": prepared.raw.id,
        "question": prepared.raw.question_text,
        "passage": prepared.raw.passage_text,
        "answer": prepared.raw.answer.to_json(),
        "numbers": [
            {"value": str(m.value), "token_index": m.token_index, "source": m.source}
            for m in prepared.numbers
        ],
    }


def dump_dataset(
    instances: typing.Iterable[PreparedInstance], path: typing.Union[str, pathlib.Path]
) -> int:
    "Write one JSON object per line; returns the number of lines written"
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for prepared in instances:
            f.write(json.dumps(instance_to_json(prepared), sort_keys=True) + "\n")
            count += 1
    logger.info(f"Wrote {count} instances to {path}")
    return count
