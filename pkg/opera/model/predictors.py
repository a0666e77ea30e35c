#!/usr/bin/env python3
#
# This module contains the forward-pass result and one answer predictor per
# answer type. A predictor reads its own log-probability table from the
# forward output, both to score a derivation label during training and to
# decode the best label at inference, so the two always agree on layout.

import abc
import dataclasses
import numpy
import opera.corpus
import opera.derivations
import opera.tensor
import typing

AnswerType = opera.derivations.AnswerType
# Sign classes in head output order
SIGN_CLASSES = (0, 1, -1)
_SIGN_COLUMN = {sign: column for column, sign in enumerate(SIGN_CLASSES)}
_BIO_COLUMN = {tag: column for column, tag in enumerate(opera.derivations.BIO_TAGS)}


@dataclasses.dataclass(frozen=True)
class ForwardOutput:
    context: opera.corpus.Context
    numbers: typing.Tuple[opera.corpus.NumberMention, ...]
    # 1x11 operation distribution and its logarithm
    p_op: opera.tensor.Tensor
    log_p_op: opera.tensor.Tensor
    # 1x5 answer type distribution and its logarithm
    p_type: opera.tensor.Tensor
    log_p_type: opera.tensor.Tensor
    # Per segment, 1xn start and end log-probabilities over the segment's
    # positions; None for an empty segment
    span_start: typing.Dict[str, typing.Optional[opera.tensor.Tensor]]
    span_end: typing.Dict[str, typing.Optional[opera.tensor.Tensor]]
    # 1x10
    log_p_count: opera.tensor.Tensor
    # Nx3 in SIGN_CLASSES order; None without numbers
    log_p_sign: typing.Optional[opera.tensor.Tensor]
    # lx3 in B, I, O order
    log_p_bio: opera.tensor.Tensor
    h_op: opera.tensor.Tensor
    h_e: opera.tensor.Tensor

    @property
    def operation_probabilities(self) -> numpy.ndarray:
        return self.p_op.numpy().reshape(-1)

    @property
    def type_probabilities(self) -> numpy.ndarray:
        return self.p_type.numpy().reshape(-1)


@dataclasses.dataclass(frozen=True)
class Decoded:
    texts: typing.Tuple[str, ...]
    label: opera.derivations.Label


class AnswerPredictor(abc.ABC):
    answer_type: AnswerType

    @abc.abstractmethod
    def label_log_probability(
        self, out: ForwardOutput, label: opera.derivations.Label
    ) -> opera.tensor.Tensor:
        """
        Return the scalar log-probability the head assigns to the label.
        """
        pass

    @abc.abstractmethod
    def decode(self, out: ForwardOutput, *, max_span_len: int) -> typing.Optional[Decoded]:
        """
        Return the most probable answer of this type, or None when the head's
        best guess is degenerate.
        """
        pass

    def _execute(
        self, out: ForwardOutput, label: opera.derivations.Label
    ) -> typing.Tuple[str, ...]:
        derivation = opera.derivations.Derivation(self.answer_type, label)
        return tuple(opera.derivations.execute(derivation, out.context, out.numbers))


def _pick(table: opera.tensor.Tensor, rows, cols) -> opera.tensor.Tensor:
    return opera.tensor.sum(opera.tensor.take(table, rows, cols))


class SpanPredictor(AnswerPredictor):
    def __init__(self, answer_type: AnswerType, segment: opera.corpus.Source):
        self.answer_type = answer_type
        self.segment = segment

    def label_log_probability(self, out, label):
        assert isinstance(label, opera.derivations.SpanLabel)
        start_table = out.span_start[self.segment]
        end_table = out.span_end[self.segment]
        assert start_table is not None and end_table is not None
        offset = out.context.segment_range(self.segment)[0]
        return opera.tensor.add(
            _pick(start_table, [0], [label.start - offset]),
            _pick(end_table, [0], [label.end - offset]),
        )

    def decode(self, out, *, max_span_len):
        start_table = out.span_start[self.segment]
        end_table = out.span_end[self.segment]
        if start_table is None or end_table is None:
            return None
        starts = start_table.data.reshape(-1)
        ends = end_table.data.reshape(-1)
        n = starts.size
        scores = starts[:, None] + ends[None, :]
        offsets = numpy.arange(n)[None, :] - numpy.arange(n)[:, None]
        scores[(offsets < 0) | (offsets > max_span_len)] = -numpy.inf
        s, e = numpy.unravel_index(int(numpy.argmax(scores)), scores.shape)
        base = out.context.segment_range(self.segment)[0]
        label = opera.derivations.SpanLabel(start=base + int(s), end=base + int(e))
        return Decoded(texts=self._execute(out, label), label=label)


class CountPredictor(AnswerPredictor):
    answer_type = AnswerType.COUNT

    def label_log_probability(self, out, label):
        assert isinstance(label, opera.derivations.CountLabel)
        return _pick(out.log_p_count, [0], [label.k])

    def decode(self, out, *, max_span_len):
        label = opera.derivations.CountLabel(k=int(numpy.argmax(out.log_p_count.data)))
        return Decoded(texts=self._execute(out, label), label=label)


class ArithmeticPredictor(AnswerPredictor):
    answer_type = AnswerType.ARITHMETIC_EXPRESSION

    def label_log_probability(self, out, label):
        assert isinstance(label, opera.derivations.SignVector)
        assert out.log_p_sign is not None
        return _pick(
            out.log_p_sign,
            list(range(len(label.signs))),
            [_SIGN_COLUMN[s] for s in label.signs],
        )

    def decode(self, out, *, max_span_len):
        if out.log_p_sign is None:
            return None
        columns = numpy.argmax(out.log_p_sign.data, axis=-1)
        signs = tuple(SIGN_CLASSES[int(c)] for c in columns)
        # An all-zero expression would answer "0" whatever the question
        if not any(signs):
            return None
        label = opera.derivations.SignVector(signs=signs)
        return Decoded(texts=self._execute(out, label), label=label)


class MultiSpanPredictor(AnswerPredictor):
    answer_type = AnswerType.MULTI_SPANS

    def label_log_probability(self, out, label):
        assert isinstance(label, opera.derivations.BioLabel)
        return _pick(
            out.log_p_bio,
            list(range(len(label.tags))),
            [_BIO_COLUMN[t] for t in label.tags],
        )

    def decode(self, out, *, max_span_len):
        start, stop = out.context.p_range
        best = numpy.argmax(out.log_p_bio.data, axis=-1)
        tags = ["O"] * len(out.context)
        previous = "O"
        for i in range(start, stop):
            tag = opera.derivations.BIO_TAGS[int(best[i])]
            if tag == "I" and previous == "O":
                tag = "B"
            tags[i] = previous = tag
        label = opera.derivations.BioLabel(tags=tuple(tags))
        texts = self._execute(out, label)
        if not texts:
            return None
        return Decoded(texts=tuple(dict.fromkeys(texts)), label=label)


PREDICTORS: typing.Dict[AnswerType, AnswerPredictor] = {
    AnswerType.QUESTION_SPAN: SpanPredictor(AnswerType.QUESTION_SPAN, "question"),
    AnswerType.PASSAGE_SPAN: SpanPredictor(AnswerType.PASSAGE_SPAN, "passage"),
    AnswerType.COUNT: CountPredictor(),
    AnswerType.ARITHMETIC_EXPRESSION: ArithmeticPredictor(),
    AnswerType.MULTI_SPANS: MultiSpanPredictor(),
}
