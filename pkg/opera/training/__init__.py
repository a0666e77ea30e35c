#!/usr/bin/env python3
#
# This package trains the model on labelled instances: joint answer and
# operation-selection loss, Adam with decoupled weight decay and a cosine
# schedule with linear warmup.

import csv
import dataclasses
import math
import numpy
import opera.configuration
import opera.corpus
import opera.derivations
import opera.errors
import opera.evaluation
import opera.logging
import opera.model
import opera.rules
import opera.tensor
import opera.tensor.gradcheck
import typing

logger = opera.logging.get_logger(__name__)

ENCODER_PREFIX = "encoder."


@dataclasses.dataclass(frozen=True)
class Loss:
    total: opera.tensor.Tensor
    answer: opera.tensor.Tensor
    operation: opera.tensor.Tensor


@dataclasses.dataclass
class OptimizerState:
    step: int = 0
    first: typing.Dict[str, numpy.ndarray] = dataclasses.field(default_factory=dict)
    second: typing.Dict[str, numpy.ndarray] = dataclasses.field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclasses.dataclass(frozen=True)
class ParameterGroup:
    params: typing.Tuple[opera.tensor.Param, ...]
    rate: float
    weight_decay: float


@dataclasses.dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    loss_a: float
    loss_op: float
    train_em: float


@dataclasses.dataclass
class TrainingResult:
    model: opera.model.OperaModel
    configuration: opera.configuration.TrainingConfiguration
    vocabulary: opera.corpus.Vocabulary
    optimizer: OptimizerState
    metrics: typing.List[EpochMetrics]
    rng_state: dict


def compute_loss(
    out: opera.model.ForwardOutput,
    instance: opera.derivations.LabeledInstance,
    *,
    lambda_op: float,
) -> Loss:
    """
    L = L_a + lambda * L_op. The operation term is left out of the graph when
    the instance has no operation label or lambda is zero.
    """
    answer = opera.tensor.scale(
        opera.model.marginal_log_likelihood(out, instance.derivations), -1.0
    )
    if instance.operations:
        operation = opera.tensor.scale(
            opera.tensor.sum(
                opera.tensor.take(
                    out.log_p_op,
                    [0] * len(instance.operations),
                    sorted(op.index for op in instance.operations),
                )
            ),
            -1.0,
        )
    else:
        operation = opera.tensor.constant(0.0)
    if lambda_op > 0 and instance.operations:
        total = opera.tensor.add(answer, opera.tensor.scale(operation, lambda_op))
    else:
        total = answer
    return Loss(total=total, answer=answer, operation=operation)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return math.ceil(warmup_fraction * total_steps)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    "Linear ramp from 0 to base_lr, then cosine decay to 0 at total_steps"
    assert 0 <= step <= total_steps
    warmup = warmup_steps(total_steps, warmup_fraction)
    if step < warmup:
        return base_lr * step / warmup
    decay = total_steps - warmup
    if decay == 0:
        return base_lr
    progress = (step - warmup) / decay
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def parameter_groups(
    model: opera.model.OperaModel,
    config: opera.configuration.TrainingConfiguration,
    *,
    step: int,
    total_steps: int,
) -> typing.List[ParameterGroup]:
    encoder = tuple(p for p in model.parameters() if p.name.startswith(ENCODER_PREFIX))
    heads = tuple(p for p in model.parameters() if not p.name.startswith(ENCODER_PREFIX))
    return [
        ParameterGroup(
            params=encoder,
            rate=lr_at(step, total_steps, config.encoder_lr, config.warmup_fraction),
            weight_decay=config.encoder_wd,
        ),
        ParameterGroup(
            params=heads,
            rate=lr_at(step, total_steps, config.head_lr, config.warmup_fraction),
            weight_decay=config.head_wd,
        ),
    ]


def adam_step(groups: typing.Sequence[ParameterGroup], state: OptimizerState) -> bool:
    """
    Apply one Adam update to every group and zero the gradients. Returns False
    and leaves the parameters untouched when any gradient is not finite.
    """
    params = [p for group in groups for p in group.params]
    if not all(numpy.all(numpy.isfinite(p.grad)) for p in params):
        logger.warning(f"Skipping optimizer step {state.step + 1}: non-finite gradient")
        for p in params:
            p.zero_grad()
        return False

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for group in groups:
        for p in group.params:
            first = state.first.setdefault(p.name, numpy.zeros_like(p.data))
            second = state.second.setdefault(p.name, numpy.zeros_like(p.data))
            first *= state.beta1
            first += (1.0 - state.beta1) * p.grad
            second *= state.beta2
            second += (1.0 - state.beta2) * p.grad ** 2
            update = (first / correction1) / (
                numpy.sqrt(second / correction2) + state.epsilon
            )
            p.data -= group.rate * (update + group.weight_decay * p.data)
            p.zero_grad()
    return True


def effective_lambda(config: opera.configuration.TrainingConfiguration) -> float:
    "Removing the operation path also removes its supervision"
    return 0.0 if config.model.ablate_op else config.lambda_op


def build_model(
    config: opera.configuration.TrainingConfiguration, vocabulary: opera.corpus.Vocabulary
) -> opera.model.OperaModel:
    model_config = config.model
    if model_config.vocab_size == 0:
        model_config = dataclasses.replace(model_config, vocab_size=len(vocabulary))
    elif model_config.vocab_size != len(vocabulary):
        raise opera.errors.DataError(
            f"vocab_size={model_config.vocab_size} but the vocabulary has {len(vocabulary)} tokens"
        )
    return opera.model.OperaModel(model_config)


def train(
    instances: typing.Sequence[opera.derivations.LabeledInstance],
    config: opera.configuration.TrainingConfiguration,
    vocabulary: opera.corpus.Vocabulary,
    *,
    model: typing.Optional[opera.model.OperaModel] = None,
) -> TrainingResult:
    usable = [instance for instance in instances if instance.usable]
    if not usable:
        raise opera.errors.DataError("no usable training instance")
    if len(usable) < len(instances):
        logger.info(f"Dropped {len(instances) - len(usable)} unusable instances")

    if model is None:
        model = build_model(config, vocabulary)
    config = dataclasses.replace(config, model=model.config)
    lambda_op = effective_lambda(config)
    rng = numpy.random.default_rng(config.seed)
    state = OptimizerState()
    batches_per_epoch = math.ceil(len(usable) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    step = 0
    metrics = []

    for epoch in range(1, config.epochs + 1):
        logger.info(f"Training epoch {epoch}/{config.epochs}...")
        order = rng.permutation(len(usable))
        totals = numpy.zeros(4)
        for start in range(0, len(usable), config.batch_size):
            batch = [usable[i] for i in order[start : start + config.batch_size]]
            model.zero_grad()
            for instance in batch:
                prepared = instance.prepared
                with opera.tensor.Tape():
                    out = model.forward(prepared.context, prepared.numbers)
                    loss = compute_loss(out, instance, lambda_op=lambda_op)
                    scaled = opera.tensor.scale(loss.total, 1.0 / len(batch))
                opera.tensor.backward(scaled)
                prediction = opera.evaluation.decode(
                    out, instance_id=instance.id, max_span_len=model.config.max_span_len
                )
                em, _ = opera.evaluation.score_prediction(prediction, prepared.raw)
                totals += (
                    loss.total.item(),
                    loss.answer.item(),
                    loss.operation.item(),
                    em,
                )
            step += 1
            adam_step(
                parameter_groups(model, config, step=step, total_steps=total_steps), state
            )
        means = totals / len(usable)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                loss=float(means[0]),
                loss_a=float(means[1]),
                loss_op=float(means[2]),
                train_em=float(means[3]),
            )
        )
        logger.info(
            f"Epoch {epoch}: loss {means[0]:.4f} (answer {means[1]:.4f}, "
            f"operation {means[2]:.4f}), train EM {means[3]:.4f}"
        )

    return TrainingResult(
        model=model,
        configuration=config,
        vocabulary=vocabulary,
        optimizer=state,
        metrics=metrics,
        rng_state=rng.bit_generator.state,
    )


def toy_instance(
    *, seed: int = 13, d_h: int = 16, n_h: int = 4
) -> typing.Tuple[opera.model.OperaModel, opera.derivations.LabeledInstance]:
    """
    Build a tiny model and an instance whose derivations exercise all five
    answer heads as well as the operation loss.
    """
    raw = opera.corpus.RawInstance(
        id="toy",
        passage_id="toy",
        passage_text="Brown kicked 23 and 40 , Reed kicked 10 .",
        question_text="How many yards was the longest field goal?",
        answers=(opera.corpus.GoldAnswer(kind="number", number_text="40"),),
    )
    vocabulary = opera.corpus.build_vocabulary([raw], min_count=1)
    prepared = opera.corpus.prepare_instance(raw, vocabulary, 24)
    ctx = prepared.context
    q, p = ctx.q_range[0], ctx.p_range[0]
    AnswerType = opera.derivations.AnswerType
    derivations = (
        opera.derivations.Derivation(
            AnswerType.QUESTION_SPAN, opera.derivations.SpanLabel(start=q + 4, end=q + 5)
        ),
        opera.derivations.Derivation(
            AnswerType.PASSAGE_SPAN, opera.derivations.SpanLabel(start=p + 4, end=p + 4)
        ),
        opera.derivations.Derivation(AnswerType.COUNT, opera.derivations.CountLabel(k=3)),
        opera.derivations.Derivation(
            AnswerType.ARITHMETIC_EXPRESSION, opera.derivations.SignVector(signs=(1, -1, 0))
        ),
        opera.derivations.Derivation(
            AnswerType.MULTI_SPANS,
            opera.derivations.BioLabel(
                tags=opera.derivations.bio_tags([(p, p), (p + 6, p + 6)], len(ctx))
            ),
        ),
    )
    instance = opera.derivations.LabeledInstance(
        prepared=prepared,
        operations=frozenset({opera.rules.Operation.MAX, opera.rules.Operation.COUNT}),
        derivations=opera.derivations.DerivationSet(
            derivations=derivations, gold_answer=raw.answer
        ),
    )
    model = opera.model.OperaModel(
        opera.configuration.ModelConfiguration(
            d_h=d_h, n_h=n_h, max_seq_len=24, vocab_size=len(vocabulary), seed=seed
        )
    )
    return model, instance


def check_joint_gradients(
    *, d_h: int = 16, seed: int = 13, lambda_op: float = 0.3, max_coordinates: int = 200
) -> opera.tensor.gradcheck.GradientCheckReport:
    "Gradient check of the full joint loss on the toy instance"
    model, instance = toy_instance(seed=seed, d_h=d_h)
    prepared = instance.prepared

    def objective() -> opera.tensor.Tensor:
        out = model.forward(prepared.context, prepared.numbers)
        return compute_loss(out, instance, lambda_op=lambda_op).total

    return opera.tensor.gradcheck.gradcheck(
        objective, model.parameters(), max_coordinates=max_coordinates, seed=seed
    )


def write_metrics_csv(
    metrics: typing.Iterable[EpochMetrics], f: typing.TextIO
) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(["epoch", "loss", "loss_a", "loss_op", "train_em"])
    for m in metrics:
        writer.writerow(
            [m.epoch, repr(m.loss), repr(m.loss_a), repr(m.loss_op), repr(m.train_em)]
        )
