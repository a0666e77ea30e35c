#!/usr/bin/env python3

import conftest
import dataclasses
import io
import numpy
import opera.corpus
import opera.derivations
import opera.errors
import opera.evaluation
import opera.tensor
import opera.training
import opera.training.checkpoint
import pytest


@pytest.fixture(scope="module")
def corpus(tmp_path_factory, default_rules):
    path = conftest.write_synthetic(tmp_path_factory.mktemp("data") / "train.json", 24, seed=2)
    configuration = conftest.small_configuration()
    raw = opera.corpus.load_drop_json(path)
    vocabulary = opera.corpus.build_vocabulary(raw, min_count=configuration.vocab_min_count)
    prepared = opera.corpus.prepare_dataset(raw, vocabulary, configuration.model.max_seq_len)
    return opera.derivations.label_dataset(prepared, default_rules), vocabulary


def test_toy_instance_covers_every_head():
    model, instance = opera.training.toy_instance()
    prepared = instance.prepared
    assert len(prepared.context) <= 24
    assert len(prepared.numbers) >= 2
    assert {d.answer_type for d in instance.derivations} == set(opera.derivations.AnswerType)
    assert instance.operations
    for derivation in instance.derivations:
        opera.derivations.execute(derivation, prepared.context, prepared.numbers)


def test_joint_gradients():
    report = opera.training.check_joint_gradients(d_h=16, max_coordinates=6)
    assert report.passed, report.to_csv()
    assert report.max_rel_err <= 1e-4


def test_operation_loss():
    model, instance = opera.training.toy_instance()
    out = model.forward(instance.prepared.context, instance.prepared.numbers)
    loss = opera.training.compute_loss(out, instance, lambda_op=0.3)
    expected_operation = -sum(
        out.log_p_op.data[0, op.index] for op in instance.operations
    )
    assert loss.operation.item() == pytest.approx(expected_operation)
    assert loss.total.item() == pytest.approx(loss.answer.item() + 0.3 * expected_operation)

    unsupervised = opera.training.compute_loss(out, instance, lambda_op=0.0)
    assert unsupervised.total.item() == unsupervised.answer.item()

    unlabelled = dataclasses.replace(instance, operations=frozenset())
    loss = opera.training.compute_loss(out, unlabelled, lambda_op=0.3)
    assert loss.operation.item() == 0.0
    assert loss.total.item() == loss.answer.item()


def test_schedule():
    rates = [opera.training.lr_at(step, 100, 1.0, 0.25) for step in range(101)]
    assert rates[0] == 0.0
    assert rates[5] == pytest.approx(0.2)
    assert rates[25] == pytest.approx(1.0)
    assert rates[62] == pytest.approx(0.5 * (1 + numpy.cos(numpy.pi * 37 / 75)))
    assert rates[100] == pytest.approx(0.0, abs=1e-12)
    assert all(a <= b for a, b in zip(rates[:25], rates[1:26]))
    assert all(a >= b for a, b in zip(rates[25:], rates[26:]))
    assert opera.training.lr_at(3, 3, 1.0, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_parameter_groups():
    model, _ = opera.training.toy_instance()
    configuration = conftest.small_configuration(encoder_lr=0.5, head_lr=0.25)
    encoder, heads = opera.training.parameter_groups(
        model, configuration, step=10, total_steps=10
    )
    assert encoder.params and all(p.name.startswith("encoder.") for p in encoder.params)
    assert heads.params and not any(p.name.startswith("encoder.") for p in heads.params)
    assert len(encoder.params) + len(heads.params) == len(model.parameters())
    assert encoder.weight_decay == configuration.encoder_wd
    assert heads.weight_decay == configuration.head_wd


def test_adam_moves_against_the_gradient():
    p = opera.tensor.Param("w", numpy.array([[1.0, -1.0]]))
    p.grad[...] = [[2.0, -2.0]]
    state = opera.training.OptimizerState()
    group = opera.training.ParameterGroup(params=(p,), rate=0.1, weight_decay=0.0)
    assert opera.training.adam_step([group], state)
    numpy.testing.assert_allclose(p.data, [[0.9, -0.9]], rtol=1e-6)
    assert state.step == 1
    assert not p.grad.any()


def test_adam_skips_non_finite_gradients():
    p = opera.tensor.Param("w", numpy.array([[1.0, -1.0]]))
    p.grad[...] = [[numpy.nan, 1.0]]
    state = opera.training.OptimizerState()
    group = opera.training.ParameterGroup(params=(p,), rate=0.1, weight_decay=0.0)
    assert not opera.training.adam_step([group], state)
    numpy.testing.assert_array_equal(p.data, [[1.0, -1.0]])
    assert state.step == 0
    assert not p.grad.any()


def test_weight_decay_is_decoupled():
    p = opera.tensor.Param("w", numpy.array([[2.0]]))
    state = opera.training.OptimizerState()
    group = opera.training.ParameterGroup(params=(p,), rate=0.1, weight_decay=0.5)
    opera.training.adam_step([group], state)
    numpy.testing.assert_allclose(p.data, [[2.0 - 0.1 * 0.5 * 2.0]])


def test_training_is_deterministic(corpus):
    labelled, vocabulary = corpus
    configuration = conftest.small_configuration()
    logs = []
    for _ in range(2):
        result = opera.training.train(labelled, configuration, vocabulary)
        f = io.StringIO()
        opera.training.write_metrics_csv(result.metrics, f)
        logs.append(f.getvalue())
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert lines[0] == "epoch,loss,loss_a,loss_op,train_em"
    assert len(lines) == 1 + configuration.epochs


def test_training_lowers_the_loss(corpus):
    labelled, vocabulary = corpus
    configuration = conftest.small_configuration(epochs=6, head_lr=0.01, encoder_lr=0.01)
    result = opera.training.train(labelled, configuration, vocabulary)
    assert result.metrics[-1].loss < result.metrics[0].loss
    assert result.optimizer.step == 6 * 3
    assert result.configuration.model.vocab_size == len(vocabulary)


def test_training_needs_usable_instances(corpus):
    labelled, vocabulary = corpus
    empty = opera.derivations.DerivationSet(
        derivations=(), gold_answer=labelled[0].derivations.gold_answer
    )
    unusable = [dataclasses.replace(labelled[0], derivations=empty)]
    with pytest.raises(opera.errors.DataError):
        opera.training.train(unusable, conftest.small_configuration(), vocabulary)


def test_vocabulary_size_mismatch(corpus):
    _, vocabulary = corpus
    configuration = conftest.small_configuration(model={"vocab_size": len(vocabulary) + 1})
    with pytest.raises(opera.errors.DataError):
        opera.training.build_model(configuration, vocabulary)


def test_checkpoint_round_trip(corpus, tmp_path):
    labelled, vocabulary = corpus
    result = opera.training.train(labelled, conftest.small_configuration(epochs=1), vocabulary)
    path = tmp_path / "model.bin"
    opera.training.checkpoint.save_checkpoint(
        opera.training.checkpoint.checkpoint_from_result(result), path
    )
    checkpoint = opera.training.checkpoint.load_checkpoint(path)
    assert checkpoint.configuration == result.configuration
    assert checkpoint.optimizer.step == result.optimizer.step
    assert checkpoint.rng_state == result.rng_state

    model, restored_vocabulary = opera.training.checkpoint.restore(checkpoint)
    assert restored_vocabulary.tokens == vocabulary.tokens
    prepared = [i.prepared for i in labelled]
    before = opera.evaluation.predict(result.model, prepared)
    after = opera.evaluation.predict(model, prepared)
    assert [p.to_json() for p in before] == [p.to_json() for p in after]


def test_checkpoint_errors(corpus, tmp_path):
    labelled, vocabulary = corpus
    result = opera.training.train(labelled, conftest.small_configuration(epochs=1), vocabulary)
    data = opera.training.checkpoint.encode_checkpoint(
        opera.training.checkpoint.checkpoint_from_result(result)
    )
    corrupt = [
        b"NOPE" + data[4:],
        data[:4] + (99).to_bytes(4, "little") + data[8:],
        data[:-10],
        data + b"\x00",
    ]
    for blob in corrupt:
        with pytest.raises(opera.errors.CheckpointError):
            opera.training.checkpoint.decode_checkpoint(blob)
    with pytest.raises(opera.errors.CheckpointError):
        opera.training.checkpoint.load_checkpoint(tmp_path / "missing.bin")


def _tiny_checkpoint(**overrides) -> opera.training.checkpoint.Checkpoint:
    settings = dict(
        configuration=conftest.small_configuration(),
        vocabulary=list(opera.corpus.RESERVED_TOKENS) + ["eagles"],
        parameters={"ab": numpy.arange(6, dtype=numpy.float64).reshape(2, 3)},
        optimizer=None,
        rng_state={"k": 1},
    )
    settings.update(overrides)
    return opera.training.checkpoint.Checkpoint(**settings)


def test_every_truncation_is_a_checkpoint_error():
    data = opera.training.checkpoint.encode_checkpoint(_tiny_checkpoint())
    assert opera.training.checkpoint.decode_checkpoint(data).rng_state == {"k": 1}
    for cut in range(len(data)):
        with pytest.raises(opera.errors.CheckpointError):
            opera.training.checkpoint.decode_checkpoint(data[:cut])


def test_undecodable_parameter_name():
    data = opera.training.checkpoint.encode_checkpoint(_tiny_checkpoint())
    name = (2).to_bytes(4, "little") + b"ab"
    assert data.count(name) == 1
    with pytest.raises(opera.errors.CheckpointError, match="parameter name"):
        opera.training.checkpoint.decode_checkpoint(
            data.replace(name, (2).to_bytes(4, "little") + b"\xff\xfe")
        )


@pytest.mark.parametrize("state", [b'{"k"; 1}', b"[1, 2.0]"])
def test_malformed_generator_state(state):
    data = opera.training.checkpoint.encode_checkpoint(_tiny_checkpoint())
    assert data.endswith(b'{"k": 1}')
    with pytest.raises(opera.errors.CheckpointError, match="generator state"):
        opera.training.checkpoint.decode_checkpoint(data[:-8] + state)


def test_malformed_header_vocabulary():
    data = opera.training.checkpoint.encode_checkpoint(_tiny_checkpoint(vocabulary={"a": 1}))
    with pytest.raises(opera.errors.CheckpointError, match="header"):
        opera.training.checkpoint.decode_checkpoint(data)


@pytest.mark.parametrize(
    "vocabulary", [["eagles"], list(opera.corpus.RESERVED_TOKENS) + ["eagles", "eagles"]]
)
def test_restore_rejects_an_unusable_vocabulary(vocabulary):
    checkpoint = _tiny_checkpoint(vocabulary=vocabulary)
    data = opera.training.checkpoint.encode_checkpoint(checkpoint)
    with pytest.raises(opera.errors.CheckpointError, match="vocabulary"):
        opera.training.checkpoint.restore(opera.training.checkpoint.decode_checkpoint(data))
