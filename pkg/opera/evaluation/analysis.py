#!/usr/bin/env python3
#
# This module contains the interpretability diagnostics of the operation
# selector: precision of the top-n operations, the operation-by-answer-type
# correlation matrix, and the paired ablation of the operation path.

import csv
import dataclasses
import numpy
import opera.configuration
import opera.corpus
import opera.derivations
import opera.errors
import opera.evaluation
import opera.logging
import opera.rules
import opera.training
import typing

logger = opera.logging.get_logger(__name__)

Prediction = opera.evaluation.Prediction
OperationSet = typing.AbstractSet[opera.rules.Operation]


@dataclasses.dataclass(frozen=True)
class CorrelationMatrix:
    # Rows are operations, columns answer types, both in index order
    values: numpy.ndarray
    # Rows without any mass
    flagged: typing.Tuple[bool, ...]


@dataclasses.dataclass(frozen=True)
class AblationResult:
    variant: str
    report: opera.evaluation.MetricsReport
    p_at_1: float
    p_at_2: float
    # EM, F1 and size of the held-out subset labelled with each operation
    by_operation: typing.Dict[opera.rules.Operation, opera.evaluation.KindScore]


def operation_p_at_n(
    predictions: typing.Sequence[Prediction],
    gold_operations: typing.Sequence[OperationSet],
    n: int,
) -> float:
    """
    Fraction of instances whose n most probable operations include a gold
    operation. Instances without gold operations are not eligible.
    """
    assert len(predictions) == len(gold_operations)
    hits = eligible = 0
    for prediction, gold in zip(predictions, gold_operations):
        if not gold:
            continue
        eligible += 1
        ranked = sorted(range(len(prediction.p_op)), key=lambda i: (-prediction.p_op[i], i))
        top = {opera.rules.Operation.from_index(i) for i in ranked[:n]}
        hits += bool(top & set(gold))
    if eligible == 0:
        raise opera.errors.DataError("no instance carries an operation label")
    return hits / eligible


def correlation_matrix(predictions: typing.Iterable[Prediction]) -> CorrelationMatrix:
    """
    Sum p_op over the instances of each predicted answer type, then normalize
    every operation row.
    """
    totals = numpy.zeros(
        (opera.configuration.OPERATION_COUNT, opera.configuration.ANSWER_TYPE_COUNT)
    )
    for prediction in predictions:
        totals[:, prediction.answer_type.index] += prediction.p_op
    mass = totals.sum(axis=1, keepdims=True)
    flagged = tuple(bool(m == 0) for m in mass.reshape(-1))
    values = numpy.divide(totals, mass, out=numpy.zeros_like(totals), where=mass > 0)
    return CorrelationMatrix(values=values, flagged=flagged)


def write_p_at_n_csv(
    predictions: typing.Sequence[Prediction],
    gold_operations: typing.Sequence[OperationSet],
    f: typing.TextIO,
) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(["n", "p_at_n"])
    for n in range(1, opera.configuration.OPERATION_COUNT + 1):
        writer.writerow([n, f"{operation_p_at_n(predictions, gold_operations, n):.6f}"])


def write_correlation_csv(matrix: CorrelationMatrix, f: typing.TextIO) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(
        ["operation"] + [t.tag for t in opera.derivations.ANSWER_TYPES] + ["flagged"]
    )
    for op in opera.rules.OPERATIONS:
        writer.writerow(
            [op.name]
            + [f"{v:.6f}" for v in matrix.values[op.index]]
            + [str(matrix.flagged[op.index]).lower()]
        )


def write_distribution_csv(
    distribution: opera.rules.OperationDistribution, f: typing.TextIO
) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(["operation", "fraction"])
    for op in opera.rules.OPERATIONS:
        writer.writerow([op.name, f"{distribution.fractions[op]:.6f}"])


def ablation_variants(
    config: opera.configuration.TrainingConfiguration,
) -> typing.List[typing.Tuple[str, opera.configuration.TrainingConfiguration]]:
    "The full model, the model without operation loss, and without operations"
    without_loss = dataclasses.replace(
        config, lambda_op=0.0, model=dataclasses.replace(config.model, lambda_op=0.0)
    )
    without_operations = dataclasses.replace(
        config,
        lambda_op=0.0,
        model=dataclasses.replace(config.model, lambda_op=0.0, ablate_op=True),
    )
    return [
        ("full", config),
        ("without_operation_loss", without_loss),
        ("without_operations", without_operations),
    ]


def _subset_scores(
    predictions: typing.Sequence[Prediction],
    instances: typing.Sequence[opera.derivations.LabeledInstance],
) -> typing.Dict[opera.rules.Operation, opera.evaluation.KindScore]:
    scores = {}
    for op in opera.rules.OPERATIONS:
        pairs = [
            opera.evaluation.score_prediction(p, i.prepared.raw)
            for p, i in zip(predictions, instances)
            if op in i.operations
        ]
        scores[op] = opera.evaluation.KindScore(
            em=float(numpy.mean([s[0] for s in pairs])) if pairs else 0.0,
            f1=float(numpy.mean([s[1] for s in pairs])) if pairs else 0.0,
            n=len(pairs),
        )
    return scores


def run_ablation(
    train_instances: typing.Sequence[opera.derivations.LabeledInstance],
    eval_instances: typing.Sequence[opera.derivations.LabeledInstance],
    config: opera.configuration.TrainingConfiguration,
    vocabulary: opera.corpus.Vocabulary,
) -> typing.List[AblationResult]:
    "Train every variant from the same seed and evaluate it on held-out data"
    if not eval_instances:
        raise opera.errors.DataError("ablation needs held-out instances")
    prepared = [i.prepared for i in eval_instances]
    gold = [i.operations for i in eval_instances]
    has_gold = any(gold)
    results = []
    for name, variant in ablation_variants(config):
        logger.info(f"Training ablation variant {name}...")
        trained = opera.training.train(train_instances, variant, vocabulary)
        predictions = opera.evaluation.predict(trained.model, prepared)
        results.append(
            AblationResult(
                variant=name,
                report=opera.evaluation.evaluate_predictions(predictions, prepared),
                p_at_1=operation_p_at_n(predictions, gold, 1) if has_gold else 0.0,
                p_at_2=operation_p_at_n(predictions, gold, 2) if has_gold else 0.0,
                by_operation=_subset_scores(predictions, eval_instances),
            )
        )
        logger.info(
            f"Variant {name}: EM {results[-1].report.em:.4f}, "
            f"P@1 {results[-1].p_at_1:.4f}"
        )
    return results


def write_ablation_csv(results: typing.Sequence[AblationResult], f: typing.TextIO) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(
        [
            "variant",
            "em",
            "f1",
            "number_em",
            "number_f1",
            "spans_em",
            "spans_f1",
            "p_at_1",
            "p_at_2",
        ]
    )
    empty = opera.evaluation.KindScore(em=0.0, f1=0.0, n=0)
    for result in results:
        number = result.report.by_kind.get("number", empty)
        spans = result.report.by_kind.get("spans", empty)
        writer.writerow(
            [result.variant]
            + [
                f"{v:.6f}"
                for v in (
                    result.report.em,
                    result.report.f1,
                    number.em,
                    number.f1,
                    spans.em,
                    spans.f1,
                    result.p_at_1,
                    result.p_at_2,
                )
            ]
        )


def write_ablation_by_operation_csv(
    results: typing.Sequence[AblationResult], f: typing.TextIO
) -> None:
    writer = csv.writer(f, lineterminator="\n")
    header = ["operation", "n"]
    for result in results:
        header += [f"{result.variant}_em", f"{result.variant}_f1"]
    writer.writerow(header)
    for op in opera.rules.OPERATIONS:
        row: typing.List[typing.Any] = [op.name, results[0].by_operation[op].n if results else 0]
        for result in results:
            score = result.by_operation[op]
            row += [f"{score.em:.6f}", f"{score.f1:.6f}"]
        writer.writerow(row)
