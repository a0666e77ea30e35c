#!/usr/bin/env python3

import conftest
import csv
import io
import json
import numpy
import opera.configuration
import opera.corpus
import opera.derivations
import opera.errors
import opera.evaluation
import opera.evaluation.analysis
import opera.model
import opera.rules
import opera.training
import pytest

AnswerType = opera.derivations.AnswerType
Operation = opera.rules.Operation


def _prediction(answers, answer_type=AnswerType.PASSAGE_SPAN, *, top=(), id="q0"):
    "A prediction whose p_op ranks the given operations first, in order"
    p_op = numpy.full(11, 0.01)
    for rank, op in enumerate(top):
        p_op[op.index] = 0.5 / (rank + 1)
    p_op /= p_op.sum()
    return opera.evaluation.Prediction(
        id=id,
        answer_texts=tuple(answers),
        answer_type=answer_type,
        p_op=tuple(p_op),
        p_type=tuple(numpy.full(5, 0.2)),
        label=None,
    )


def test_decode_produces_a_prediction():
    model, instance = opera.training.toy_instance()
    out = model.forward(instance.prepared.context, instance.prepared.numbers)
    prediction = opera.evaluation.decode(out, instance_id="toy")
    assert prediction.id == "toy"
    assert not prediction.degenerate
    assert prediction.answer_texts and all(prediction.answer_texts)
    assert prediction.label is not None
    assert prediction.p_type[prediction.answer_type.index] > 0
    data = prediction.to_json()
    assert set(data) == {"id", "answers", "type", "p_op", "p_type", "top_operation", "degenerate"}
    assert data["type"] in {t.tag for t in opera.derivations.ANSWER_TYPES}
    assert sum(data["p_op"]) == pytest.approx(1.0)
    assert Operation[data["top_operation"]] == prediction.top_operation
    json.dumps(data)


def test_decode_falls_back_past_degenerate_types():
    raw = conftest.make_raw("who kicked", "", spans=["kicked"])
    vocabulary = opera.corpus.build_vocabulary([raw], min_count=1)
    prepared = opera.corpus.prepare_instance(raw, vocabulary, 16)
    model = opera.model.OperaModel(
        opera.configuration.ModelConfiguration(
            d_h=8, n_h=2, encoder_layers=1, max_seq_len=16, vocab_size=len(vocabulary)
        )
    )
    out = model.forward(prepared.context, prepared.numbers)
    prediction = opera.evaluation.decode(out)
    assert prediction.answer_type not in {
        AnswerType.PASSAGE_SPAN,
        AnswerType.ARITHMETIC_EXPRESSION,
    }
    assert not prediction.degenerate


def test_evaluate_predictions_by_kind():
    instances = [
        conftest.prepare(conftest.make_raw("how many", "23 yards", number="23", id="a")),
        conftest.prepare(conftest.make_raw("how many", "40 yards", number="40", id="b")),
        conftest.prepare(conftest.make_raw("who", "Brown kicked", spans=["Brown"], id="c")),
    ]
    predictions = [
        _prediction(["23"], id="a"),
        _prediction(["41"], id="b"),
        _prediction(["Brown"], id="c"),
    ]
    report = opera.evaluation.evaluate_predictions(predictions, instances)
    assert report.count == 3
    assert report.em == pytest.approx(2 / 3)
    assert report.by_kind["number"] == opera.evaluation.KindScore(em=0.5, f1=0.5, n=2)
    assert report.by_kind["spans"] == opera.evaluation.KindScore(em=1.0, f1=1.0, n=1)
    assert report.to_json()["n"] == 3


def test_empty_dataset():
    model, _ = opera.training.toy_instance()
    with pytest.raises(opera.errors.DataError):
        opera.evaluation.evaluate(model, [])
    with pytest.raises(opera.errors.DataError):
        opera.evaluation.evaluate_predictions([], [])


def test_write_predictions_and_metrics(tmp_path):
    predictions = [_prediction(["23"], id="a"), _prediction(["Brown"], id="c")]
    f = io.StringIO()
    opera.evaluation.write_predictions(predictions, f)
    lines = f.getvalue().splitlines()
    assert [json.loads(line)["id"] for line in lines] == ["a", "c"]

    report = opera.evaluation.MetricsReport(
        em=0.5,
        f1=0.75,
        count=2,
        by_kind={"number": opera.evaluation.KindScore(em=0.5, f1=0.75, n=2)},
    )
    path = tmp_path / "metrics.json"
    opera.evaluation.write_metrics(report, path)
    assert json.loads(path.read_text())["f1"] == 0.75
    with open(tmp_path / "metrics.by_kind.csv") as f:
        rows = list(csv.reader(f))
    assert rows == [
        ["kind", "em", "f1", "n"],
        ["number", "0.500000", "0.750000", "2"],
        ["overall", "0.500000", "0.750000", "2"],
    ]


def test_operation_precision_at_n():
    predictions = [
        _prediction(["1"], top=[Operation.MAX, Operation.ARGMAX]),
        _prediction(["1"], top=[Operation.COUNT, Operation.MIN]),
        _prediction(["1"], top=[Operation.SPAN]),
        _prediction(["1"], top=[Operation.DIFF]),
    ]
    gold = [{Operation.MAX}, {Operation.MIN}, set(), {Operation.KEY_VALUE}]
    p_at = opera.evaluation.analysis.operation_p_at_n
    assert p_at(predictions, gold, 1) == pytest.approx(1 / 3)
    assert p_at(predictions, gold, 2) == pytest.approx(2 / 3)
    assert p_at(predictions, gold, 11) == 1.0
    values = [p_at(predictions, gold, n) for n in range(1, 12)]
    assert values == sorted(values)
    with pytest.raises(opera.errors.DataError):
        p_at(predictions, [set()] * 4, 1)


def test_correlation_matrix():
    predictions = [
        _prediction(["1"], AnswerType.ARITHMETIC_EXPRESSION, top=[Operation.ADDITION]),
        _prediction(["2"], AnswerType.ARITHMETIC_EXPRESSION, top=[Operation.DIFF]),
        _prediction(["3"], AnswerType.COUNT, top=[Operation.COUNT]),
    ]
    matrix = opera.evaluation.analysis.correlation_matrix(predictions)
    assert matrix.values.shape == (11, 5)
    numpy.testing.assert_allclose(matrix.values.sum(axis=1), 1.0)
    assert not any(matrix.flagged)
    arithmetic = AnswerType.ARITHMETIC_EXPRESSION.index
    for op in (Operation.ADDITION, Operation.DIFF):
        assert numpy.argmax(matrix.values[op.index]) == arithmetic
    assert numpy.argmax(matrix.values[Operation.COUNT.index]) == AnswerType.COUNT.index
    columns = [AnswerType.ARITHMETIC_EXPRESSION.index, AnswerType.COUNT.index]
    assert matrix.values[:, [i for i in range(5) if i not in columns]].sum() == 0


def test_correlation_matrix_flags_rows_without_mass():
    prediction = _prediction(["1"], AnswerType.COUNT, top=[Operation.COUNT])
    p_op = list(prediction.p_op)
    p_op[Operation.SPAN.index] = 0.0
    prediction = opera.evaluation.Prediction(
        id="q0",
        answer_texts=("1",),
        answer_type=AnswerType.COUNT,
        p_op=tuple(p_op),
        p_type=prediction.p_type,
        label=None,
    )
    matrix = opera.evaluation.analysis.correlation_matrix([prediction])
    assert matrix.flagged[Operation.SPAN.index]
    assert not matrix.values[Operation.SPAN.index].any()
    assert sum(matrix.flagged) == 1


def test_analysis_csv_files():
    predictions = [
        _prediction(["1"], AnswerType.COUNT, top=[Operation.COUNT]),
        _prediction(["2"], AnswerType.PASSAGE_SPAN, top=[Operation.SPAN]),
    ]
    gold = [{Operation.COUNT}, {Operation.KEY_VALUE}]

    f = io.StringIO()
    opera.evaluation.analysis.write_p_at_n_csv(predictions, gold, f)
    rows = list(csv.reader(io.StringIO(f.getvalue())))
    assert rows[0] == ["n", "p_at_n"]
    assert rows[1] == ["1", "0.500000"]
    assert rows[-1] == ["11", "1.000000"]

    f = io.StringIO()
    opera.evaluation.analysis.write_correlation_csv(
        opera.evaluation.analysis.correlation_matrix(predictions), f
    )
    rows = list(csv.reader(io.StringIO(f.getvalue())))
    assert rows[0] == [
        "operation",
        "QuestionSpan",
        "PassageSpan",
        "Count",
        "ArithmeticExpression",
        "MultiSpans",
        "flagged",
    ]
    assert [row[0] for row in rows[1:]] == [op.name for op in opera.rules.OPERATIONS]

    f = io.StringIO()
    distribution = opera.rules.operation_distribution(
        [("a", {Operation.COUNT}), ("b", {Operation.COUNT, Operation.SPAN})]
    )
    opera.evaluation.analysis.write_distribution_csv(distribution, f)
    rows = dict(csv.reader(io.StringIO(f.getvalue())))
    assert rows["COUNT"] == f"{2 / 3:.6f}"
    assert rows["MAX"] == "0.000000"


def test_ablation_variants():
    configuration = conftest.small_configuration(lambda_op=0.5)
    variants = dict(opera.evaluation.analysis.ablation_variants(configuration))
    assert list(variants) == ["full", "without_operation_loss", "without_operations"]
    assert variants["full"] == configuration
    assert variants["without_operation_loss"].lambda_op == 0.0
    assert not variants["without_operation_loss"].model.ablate_op
    assert variants["without_operations"].model.ablate_op
    for variant in variants.values():
        assert variant.seed == configuration.seed
        assert variant.model.d_h == configuration.model.d_h


def test_ablation_tables(tmp_path, default_rules):
    configuration = conftest.small_configuration(epochs=1)
    train_path = conftest.write_synthetic(tmp_path / "train.json", 24, seed=3)
    dev_path = conftest.write_synthetic(tmp_path / "dev.json", 12, seed=4, prefix="dev")
    train_raw = opera.corpus.load_drop_json(train_path)
    vocabulary = opera.corpus.build_vocabulary(train_raw, min_count=1)

    def labelled(raw):
        prepared = opera.corpus.prepare_dataset(raw, vocabulary, 96)
        return opera.derivations.label_dataset(prepared, default_rules)

    results = opera.evaluation.analysis.run_ablation(
        labelled(train_raw),
        labelled(opera.corpus.load_drop_json(dev_path)),
        configuration,
        vocabulary,
    )
    assert [r.variant for r in results] == [
        "full",
        "without_operation_loss",
        "without_operations",
    ]
    assert all(r.report.count == 12 for r in results)

    f = io.StringIO()
    opera.evaluation.analysis.write_ablation_csv(results, f)
    rows = list(csv.reader(io.StringIO(f.getvalue())))
    assert rows[0][0] == "variant" and len(rows) == 4
    assert all(len(row) == 9 for row in rows)

    f = io.StringIO()
    opera.evaluation.analysis.write_ablation_by_operation_csv(results, f)
    rows = list(csv.reader(io.StringIO(f.getvalue())))
    assert rows[0][:4] == ["operation", "n", "full_em", "full_f1"]
    assert len(rows) == 12
    assert sum(int(row[1]) for row in rows[1:]) >= 12


def test_ablation_needs_held_out_data():
    _, instance = opera.training.toy_instance()
    vocabulary = opera.corpus.Vocabulary(list(opera.corpus.RESERVED_TOKENS))
    with pytest.raises(opera.errors.DataError):
        opera.evaluation.analysis.run_ablation(
            [instance], [], conftest.small_configuration(), vocabulary
        )


@pytest.fixture(scope="module")
def overfit(tmp_path_factory, default_rules):
    "A desk-profile model trained on the synthetic corpus"
    root = tmp_path_factory.mktemp("overfit")
    train_raw = opera.corpus.load_drop_json(
        conftest.write_synthetic(root / "train.json", 200, seed=13, prefix="train")
    )
    dev_raw = opera.corpus.load_drop_json(
        conftest.write_synthetic(root / "dev.json", 50, seed=14, prefix="dev")
    )
    configuration = opera.configuration.load_training_configuration(profile="desk")
    vocabulary = opera.corpus.build_vocabulary(
        train_raw, min_count=configuration.vocab_min_count
    )

    def labelled(raw):
        prepared = opera.corpus.prepare_dataset(
            raw, vocabulary, configuration.model.max_seq_len
        )
        return opera.derivations.label_dataset(prepared, default_rules)

    train, dev = labelled(train_raw), labelled(dev_raw)
    result = opera.training.train(train, configuration, vocabulary)
    return result, train, dev, configuration, vocabulary


@pytest.mark.acceptance
def test_overfits_the_synthetic_corpus(overfit):
    result, train, dev, _, _ = overfit
    train_report = opera.evaluation.evaluate(result.model, [i.prepared for i in train])
    dev_report = opera.evaluation.evaluate(result.model, [i.prepared for i in dev])
    assert train_report.em >= 0.95
    assert dev_report.em >= 0.90


@pytest.mark.acceptance
def test_operation_selector_is_interpretable(overfit):
    result, _, dev, _, _ = overfit
    predictions = opera.evaluation.predict(result.model, [i.prepared for i in dev])
    gold = [i.operations for i in dev]
    assert opera.evaluation.analysis.operation_p_at_n(predictions, gold, 1) >= 0.9

    matrix = opera.evaluation.analysis.correlation_matrix(predictions)
    for op in (Operation.ADDITION, Operation.DIFF):
        assert numpy.argmax(matrix.values[op.index]) == AnswerType.ARITHMETIC_EXPRESSION.index
    assert numpy.argmax(matrix.values[Operation.COUNT.index]) == AnswerType.COUNT.index


@pytest.mark.acceptance
def test_paired_ablation(overfit):
    _, train, dev, configuration, vocabulary = overfit
    results = opera.evaluation.analysis.run_ablation(train, dev, configuration, vocabulary)
    by_variant = {r.variant: r for r in results}
    assert by_variant["full"].report.em >= 0.90
    assert by_variant["full"].p_at_1 >= by_variant["without_operation_loss"].p_at_1
