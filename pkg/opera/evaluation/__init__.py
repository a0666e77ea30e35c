#!/usr/bin/env python3
#
# This package turns forward outputs into answers and scores them with the
# DROP metrics, overall and per gold answer kind.

import csv
import dataclasses
import json
import numpy
import opera.corpus
import opera.derivations
import opera.errors
import opera.logging
import opera.metrics
import opera.model
import opera.rules
import pathlib
import typing

logger = opera.logging.get_logger(__name__)

AnswerType = opera.derivations.AnswerType


@dataclasses.dataclass(frozen=True)
class Prediction:
    id: str
    answer_texts: typing.Tuple[str, ...]
    answer_type: AnswerType
    p_op: typing.Tuple[float, ...]
    p_type: typing.Tuple[float, ...]
    # Label of the decoded answer; None when every type was degenerate
    label: typing.Optional[opera.derivations.Label]
    degenerate: bool = False

    @property
    def top_operation(self) -> opera.rules.Operation:
        return opera.rules.Operation.from_index(int(numpy.argmax(self.p_op)))

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "answers": list(self.answer_texts),
            "type": self.answer_type.tag,
            "p_op": list(self.p_op),
            "p_type": list(self.p_type),
            "top_operation": self.top_operation.name,
            "degenerate": self.degenerate,
        }


@dataclasses.dataclass(frozen=True)
class KindScore:
    em: float
    f1: float
    n: int


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    em: float
    f1: float
    count: int
    # Keyed by gold answer kind: number, spans, date
    by_kind: typing.Dict[str, KindScore]

    def to_json(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "n": self.count,
            "by_kind": {
                kind: dataclasses.asdict(score) for kind, score in self.by_kind.items()
            },
        }


def decode(
    out: opera.model.ForwardOutput, *, instance_id: str = "", max_span_len: int = 20
) -> Prediction:
    """
    Decode the most probable answer type whose decoding is not degenerate,
    trying types by decreasing probability. When all five are degenerate the
    prediction is an empty string, flagged.
    """
    p_type = out.type_probabilities
    order = sorted(range(len(p_type)), key=lambda i: (-p_type[i], i))
    p_op = tuple(float(p) for p in out.operation_probabilities)
    p_type_values = tuple(float(p) for p in p_type)
    for index in order:
        answer_type = AnswerType.from_index(index)
        decoded = opera.model.PREDICTORS[answer_type].decode(
            out, max_span_len=max_span_len
        )
        if decoded is not None:
            return Prediction(
                answer_texts=decoded.texts,
                answer_type=answer_type,
                label=decoded.label,
                id=instance_id,
                p_op=p_op,
                p_type=p_type_values,
            )
    logger.warning(f"Every answer type is degenerate for {instance_id!r}")
    return Prediction(
        answer_texts=("",),
        answer_type=AnswerType.from_index(order[0]),
        label=None,
        degenerate=True,
        id=instance_id,
        p_op=p_op,
        p_type=p_type_values,
    )


def score_prediction(
    prediction: Prediction, raw: opera.corpus.RawInstance
) -> typing.Tuple[float, float]:
    "Best EM and F1 over the primary answer and its validation alternates"
    return opera.metrics.best_em_f1(
        prediction.answer_texts, [answer.texts() for answer in raw.answers]
    )


def predict(
    model: opera.model.OperaModel,
    instances: typing.Iterable[opera.corpus.PreparedInstance],
) -> typing.List[Prediction]:
    return [
        decode(
            model.forward(p.context, p.numbers),
            instance_id=p.raw.id,
            max_span_len=model.config.max_span_len,
        )
        for p in instances
    ]


def evaluate_predictions(
    predictions: typing.Sequence[Prediction],
    instances: typing.Sequence[opera.corpus.PreparedInstance],
) -> MetricsReport:
    if not instances:
        raise opera.errors.DataError("cannot evaluate an empty dataset")
    assert len(predictions) == len(instances)
    scores: typing.Dict[str, typing.List[typing.Tuple[float, float]]] = {}
    overall = []
    for prediction, instance in zip(predictions, instances):
        score = score_prediction(prediction, instance.raw)
        overall.append(score)
        scores.setdefault(instance.raw.answer.kind, []).append(score)

    def mean(values: typing.List[typing.Tuple[float, float]], i: int) -> float:
        return float(numpy.mean([v[i] for v in values]))

    return MetricsReport(
        em=mean(overall, 0),
        f1=mean(overall, 1),
        count=len(overall),
        by_kind={
            kind: KindScore(em=mean(values, 0), f1=mean(values, 1), n=len(values))
            for kind, values in sorted(scores.items())
        },
    )


def evaluate(
    model: opera.model.OperaModel,
    instances: typing.Sequence[opera.corpus.PreparedInstance],
) -> MetricsReport:
    if not instances:
        raise opera.errors.DataError("cannot evaluate an empty dataset")
    logger.info(f"Evaluating {len(instances)} instances...")
    report = evaluate_predictions(predict(model, instances), instances)
    logger.info(f"EM {report.em:.4f}, F1 {report.f1:.4f}")
    return report


def write_predictions(
    predictions: typing.Iterable[Prediction], f: typing.TextIO
) -> None:
    for prediction in predictions:
        f.write(json.dumps(prediction.to_json(), sort_keys=True) + "\n")


def write_metrics(report: MetricsReport, path: typing.Union[str, pathlib.Path]) -> None:
    "Write the metrics JSON and a per-kind CSV beside it"
    path = pathlib.Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(path.with_name(f"{path.stem}.by_kind.csv"), "w", encoding="utf-8") as f:
        write_kind_table(report, f)
    logger.info(f"Wrote metrics to {path}")


def write_kind_table(report: MetricsReport, f: typing.TextIO) -> None:
    "One CSV row per answer kind, then the overall row"
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(["kind", "em", "f1", "n"])
    for kind, score in report.by_kind.items():
        writer.writerow([kind, f"{score.em:.6f}", f"{score.f1:.6f}", score.n])
    writer.writerow(["overall", f"{report.em:.6f}", f"{report.f1:.6f}", report.count])
