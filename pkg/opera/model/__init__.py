#!/usr/bin/env python3
#
# This package contains the operation-pivoted reader: a small transformer
# context encoder, the operation selector, one attention executor per
# operation, the soft mixture of their results and the answer heads.

import bisect
import numpy
import opera.configuration
import opera.corpus
import opera.derivations
import opera.errors
import opera.logging
import opera.model.layers
import opera.model.predictors
from opera.model.predictors import PREDICTORS, ForwardOutput
import opera.tensor
import typing

logger = opera.logging.get_logger(__name__)

Tensor = opera.tensor.Tensor

# Rank rows per direction; row 0 is for tokens that are not number mentions
NUMBER_RANKS = 8


def magnitude_ranks(
    ctx: opera.corpus.Context, numbers: typing.Sequence[opera.corpus.NumberMention]
) -> typing.Tuple[typing.List[int], typing.List[int]]:
    """
    Return, per joint-sequence position, the dense rank of a number mention's
    value among the distinct values of its segment, counted from the largest
    and from the smallest. Ranks are 1-based and clipped to NUMBER_RANKS;
    positions without a mention get 0.
    """
    descending = [0] * len(ctx)
    ascending = [0] * len(ctx)
    for source in ("question", "passage"):
        mentions = [m for m in numbers if m.source == source]
        values = sorted({m.value for m in mentions})
        for m in mentions:
            below = bisect.bisect_left(values, m.value)
            above = len(values) - 1 - below
            i = ctx.joint_index(m)
            descending[i] = 1 + min(above, NUMBER_RANKS - 1)
            ascending[i] = 1 + min(below, NUMBER_RANKS - 1)
    return descending, ascending


def mix(p_op: Tensor, executions: typing.Sequence[Tensor]) -> Tensor:
    "Expectation of the execution vectors under the operation distribution"
    return opera.tensor.matmul(p_op, opera.tensor.concat(executions, axis=0))


class OperaModel:
    def __init__(self, config: opera.configuration.ModelConfiguration):
        assert config.vocab_size > len(opera.corpus.RESERVED_TOKENS), "vocab_size not set"
        self.config = config
        d, n_h = config.d_h, config.n_h
        d_ffn = config.feed_forward_dim
        store = opera.model.layers.ParameterStore(d_h=d, seed=config.seed)
        self.store = store

        self.token_embedding = store.embedding(
            "encoder.token_embedding", config.vocab_size, d
        )
        self.position_embedding = store.embedding(
            "encoder.position_embedding", config.max_seq_len, d
        )
        self.rank_embeddings = [
            store.embedding(f"encoder.number_rank.{direction}", NUMBER_RANKS + 1, d)
            for direction in ("descending", "ascending")
        ]
        self.blocks = [
            opera.model.layers.EncoderBlock(store, f"encoder.blocks.{i}", d, n_h, d_ffn)
            for i in range(config.encoder_layers)
        ]

        # Operation bank: embeddings plus one executor per operation
        self.operation_embedding = store.embedding("operations.embedding", config.n_ops, d)
        self.executors = [
            (
                store.matrix(f"operations.{i}.wq", d, d),
                store.matrix(f"operations.{i}.wk", d, d),
                store.matrix(f"operations.{i}.wv", d, d),
            )
            for i in range(config.n_ops)
        ]

        self.selector = store.matrix("selector.bilinear", d, d)
        self.question_pooling = opera.model.layers.WeightedPooling(
            store, "selector.question_pooling", d
        )
        self.passage_pooling = opera.model.layers.WeightedPooling(
            store, "heads.passage_pooling", d
        )
        self.span_question_pooling = opera.model.layers.WeightedPooling(
            store, "heads.span_question_pooling", d
        )
        self.number_pooling = opera.model.layers.WeightedPooling(
            store, "heads.number_pooling", d
        )

        def ffn(name: str, d_in: int, d_out: int):
            return opera.model.layers.FeedForward(store, f"heads.{name}", d_in, d_ffn, d_out)

        self.type_head = ffn("type", 3 * d, config.n_types)
        self.span_head = ffn("span", 3 * d, 2)
        self.count_head = ffn("count", 4 * d, config.count_classes)
        self.sign_head = ffn("sign", 4 * d, len(opera.model.predictors.SIGN_CLASSES))
        self.bio_head = ffn("bio", 2 * d, len(opera.derivations.BIO_TAGS))

        logger.debug(
            f"Built model with {len(self.parameters())} params, "
            f"{sum(p.data.size for p in self.parameters())} values"
        )

    def parameters(self) -> typing.List[opera.tensor.Param]:
        return self.store.parameters()

    def operation_bank(self) -> typing.List[opera.tensor.Param]:
        return [p for p in self.parameters() if p.name.startswith("operations.")]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def encode(
        self,
        ctx: opera.corpus.Context,
        numbers: typing.Sequence[opera.corpus.NumberMention] = (),
    ) -> Tensor:
        """
        Return H, one row per joint-sequence position. Number mentions add the
        embeddings of their magnitude ranks to their token embedding.
        """
        if len(ctx) > self.config.max_seq_len:
            raise opera.errors.DataError(
                f"sequence of {len(ctx)} exceeds max_seq_len={self.config.max_seq_len}"
            )
        x = opera.tensor.add(
            opera.tensor.embedding_lookup(self.token_embedding, ctx.joint_ids),
            opera.tensor.slice_rows(self.position_embedding, 0, len(ctx)),
        )
        for table, ranks in zip(self.rank_embeddings, magnitude_ranks(ctx, numbers)):
            x = opera.tensor.add(x, opera.tensor.embedding_lookup(table, ranks))
        for block in self.blocks:
            x = block(x)
        return x

    def select_operations(self, h_q: Tensor) -> typing.Tuple[Tensor, Tensor]:
        "Return p_op and log p_op, both 1x11"
        logits = opera.tensor.transpose(
            opera.tensor.matmul(
                opera.tensor.matmul(self.operation_embedding, self.selector),
                opera.tensor.transpose(h_q),
            )
        )
        return opera.tensor.softmax(logits), opera.tensor.log_softmax(logits)

    def execute_operation(self, i: int, H: Tensor) -> Tensor:
        "Cross-attend from operation i's embedding over H; returns 1xd"
        wq, wk, wv = self.executors[i]
        query = opera.tensor.matmul(
            opera.tensor.slice_rows(self.operation_embedding, i, i + 1), wq
        )
        return opera.model.layers.attend(
            query,
            opera.tensor.matmul(H, wk),
            opera.tensor.matmul(H, wv),
            n_h=self.config.n_h,
        )

    def predict_type(self, h_e: Tensor, h_q: Tensor, h_p: Tensor) -> Tensor:
        "Return log p_type, 1x5"
        return opera.tensor.log_softmax(
            self.type_head(opera.tensor.concat([h_e, h_q, h_p], axis=-1))
        )

    def predict_span(
        self, span_logits: Tensor, segment: typing.Tuple[int, int]
    ) -> typing.Tuple[Tensor, Tensor]:
        """
        Normalize the start and end columns of the span logits over the rows of
        one segment. Returns 1xn start and end log-probabilities.
        """
        start, stop = segment
        if start >= stop:
            raise opera.errors.ShapeError("span prediction over an empty segment")
        rows = opera.tensor.slice_rows(span_logits, start, stop)
        return (
            opera.tensor.log_softmax(
                opera.tensor.transpose(opera.tensor.slice_cols(rows, 0, 1))
            ),
            opera.tensor.log_softmax(
                opera.tensor.transpose(opera.tensor.slice_cols(rows, 1, 2))
            ),
        )

    def predict_count(
        self, h_op: Tensor, U: typing.Optional[Tensor], h_q: Tensor, h_p: Tensor
    ) -> Tensor:
        "Return the 1x10 count log-probabilities; U holds the number rows of H"
        h_u = self.number_pooling(U) if U is not None else opera.tensor.zeros(1, self.config.d_h)
        return opera.tensor.log_softmax(
            self.count_head(opera.tensor.concat([h_op, h_u, h_q, h_p], axis=-1))
        )

    def predict_signs(self, h_op: Tensor, U: Tensor, h_q: Tensor, h_p: Tensor) -> Tensor:
        "Return Nx3 sign log-probabilities, one row per number mention"
        n = U.shape[0]
        return opera.tensor.log_softmax(
            self.sign_head(
                opera.tensor.concat(
                    [
                        U,
                        opera.tensor.expand_rows(h_op, n),
                        opera.tensor.expand_rows(h_q, n),
                        opera.tensor.expand_rows(h_p, n),
                    ],
                    axis=-1,
                )
            )
        )

    def predict_bio(self, H: Tensor, h_op: Tensor) -> Tensor:
        "Return lx3 BIO log-probabilities over the joint sequence"
        return opera.tensor.log_softmax(
            self.bio_head(
                opera.tensor.concat([H, opera.tensor.expand_rows(h_op, H.shape[0])], axis=-1)
            )
        )

    def forward(
        self,
        ctx: opera.corpus.Context,
        numbers: typing.Sequence[opera.corpus.NumberMention],
    ) -> ForwardOutput:
        if ctx.q_range[0] >= ctx.q_range[1]:
            raise opera.errors.DataError("operation selection needs a non-empty question")
        config = self.config
        d = config.d_h
        length = len(ctx)
        H = self.encode(ctx, numbers)
        H_q = opera.tensor.slice_rows(H, *ctx.q_range)
        h_q = self.question_pooling(H_q)
        if ctx.p_range[0] < ctx.p_range[1]:
            h_p = self.passage_pooling(opera.tensor.slice_rows(H, *ctx.p_range))
        else:
            h_p = opera.tensor.zeros(1, d)

        if config.ablate_op:
            uniform = numpy.full((1, config.n_ops), 1.0 / config.n_ops)
            p_op = opera.tensor.constant(uniform)
            log_p_op = opera.tensor.constant(numpy.log(uniform))
            h_op = opera.tensor.zeros(1, d)
            h_e = opera.tensor.zeros(1, d)
        else:
            p_op, log_p_op = self.select_operations(h_q)
            h_op = mix(p_op, [self.execute_operation(i, H) for i in range(config.n_ops)])
            h_e = opera.tensor.matmul(p_op, self.operation_embedding)

        log_p_type = self.predict_type(h_e, h_q, h_p)

        g_q = self.span_question_pooling(H_q)
        span_logits = self.span_head(
            opera.tensor.concat(
                [
                    opera.tensor.expand_rows(h_op, length),
                    H,
                    opera.tensor.mul(H, opera.tensor.expand_rows(g_q, length)),
                ],
                axis=-1,
            )
        )
        span_start: typing.Dict[str, typing.Optional[Tensor]] = {}
        span_end: typing.Dict[str, typing.Optional[Tensor]] = {}
        for segment, bounds in (("question", ctx.q_range), ("passage", ctx.p_range)):
            if bounds[0] < bounds[1]:
                span_start[segment], span_end[segment] = self.predict_span(
                    span_logits, bounds
                )
            else:
                span_start[segment] = span_end[segment] = None

        U = None
        log_p_sign: typing.Optional[Tensor] = None
        if numbers:
            U = opera.tensor.gather_rows(H, [ctx.joint_index(m) for m in numbers])
            log_p_sign = self.predict_signs(h_op, U, h_q, h_p)
        log_p_count = self.predict_count(h_op, U, h_q, h_p)
        log_p_bio = self.predict_bio(H, h_op)

        return ForwardOutput(
            context=ctx,
            numbers=tuple(numbers),
            p_op=p_op,
            log_p_op=log_p_op,
            p_type=opera.tensor.exp(log_p_type),
            log_p_type=log_p_type,
            span_start=span_start,
            span_end=span_end,
            log_p_count=log_p_count,
            log_p_sign=log_p_sign,
            log_p_bio=log_p_bio,
            h_op=h_op,
            h_e=h_e,
        )


def marginal_log_likelihood(
    out: ForwardOutput, derivations: typing.Iterable[opera.derivations.Derivation]
) -> Tensor:
    """
    log of the summed probability of every derivation, each scored as
    p_type(T) * p(L | T).
    """
    scores = []
    for d in derivations:
        predictor = PREDICTORS[d.answer_type]
        score = opera.tensor.add(
            opera.tensor.sum(
                opera.tensor.take(out.log_p_type, [0], [d.answer_type.index])
            ),
            predictor.label_log_probability(out, d.label),
        )
        scores.append(opera.tensor.reshape(score, 1, 1))
    if not scores:
        raise opera.errors.DataError("marginal likelihood of an empty derivation set")
    return opera.tensor.logsumexp(opera.tensor.concat(scores, axis=-1))
