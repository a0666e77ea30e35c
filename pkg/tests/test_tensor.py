#!/usr/bin/env python3

import numpy
import opera.errors
import opera.tensor
import opera.tensor.gradcheck
import pytest

T = opera.tensor


def _param(name, *shape, seed=0):
    return T.Param(name, numpy.random.default_rng(seed).normal(size=shape))


def _check(f, params):
    report = opera.tensor.gradcheck.gradcheck(f, params, max_coordinates=30)
    assert report.passed, report.to_csv()


def test_matmul_and_transpose():
    a, b = _param("a", 3, 4), _param("b", 3, 4, seed=1)
    _check(lambda: T.sum(T.mul(T.matmul(a, T.transpose(b)), T.matmul(a, T.transpose(b)))), [a, b])


def test_softmax_and_log_softmax():
    a = _param("a", 2, 5)
    weights = T.constant(numpy.arange(10.0).reshape(2, 5))
    _check(lambda: T.sum(T.mul(T.softmax(a), weights)), [a])
    _check(lambda: T.sum(T.mul(T.log_softmax(a), weights)), [a])


def test_gelu():
    a = _param("a", 3, 3)
    _check(lambda: T.sum(T.mul(T.gelu(a), T.gelu(a))), [a])


def test_layer_norm():
    x, gain, bias = _param("x", 4, 6), _param("gain", 1, 6, seed=1), _param("bias", 1, 6, seed=2)
    weights = T.constant(numpy.random.default_rng(3).normal(size=(4, 6)))
    _check(lambda: T.sum(T.mul(T.layer_norm(x, gain, bias), weights)), [x, gain, bias])


def test_concat_slices_and_gathers():
    a, b = _param("a", 3, 2), _param("b", 3, 4, seed=1)

    def f():
        joined = T.concat([a, b], axis=-1)
        stacked = T.concat([joined, T.gather_rows(joined, [2, 0, 2])], axis=0)
        picked = T.take(stacked, [0, 5, 5], [1, 3, 3])
        return T.add(
            T.sum(T.mul(T.slice_cols(stacked, 1, 4), T.slice_cols(stacked, 2, 5))),
            T.sum(T.mul(picked, picked)),
        )

    _check(f, [a, b])


def test_expand_reshape_and_reductions():
    a = _param("a", 1, 4)

    def f():
        expanded = T.expand_rows(a, 3)
        return T.add(
            T.logsumexp(T.reshape(expanded, 2, 6)),
            T.mean(T.exp(T.scale(expanded, 0.5))),
        )

    _check(f, [a])


def test_log():
    a = T.Param("a", numpy.array([[0.5, 1.5, 2.0]]))
    _check(lambda: T.sum(T.log(a)), [a])


def test_operators():
    a, b = _param("a", 2, 2), _param("b", 2, 2, seed=1)
    _check(lambda: T.sum((a - b) * (a + b) * 2.0 + (-a) @ b), [a, b])


def test_shape_errors():
    with pytest.raises(opera.errors.ShapeError):
        T.add(T.zeros(2, 3), T.zeros(3, 2))
    with pytest.raises(opera.errors.ShapeError):
        T.matmul(T.zeros(2, 3), T.zeros(2, 3))
    with pytest.raises(opera.errors.ShapeError):
        T.concat([T.zeros(2, 3), T.zeros(3, 3)], axis=-1)
    with pytest.raises(opera.errors.ShapeError):
        T.expand_rows(T.zeros(2, 3), 4)


def test_non_finite_results_raise():
    with pytest.raises(opera.errors.NonFiniteError):
        T.log(T.constant([[0.0, 1.0]]))
    with pytest.raises(opera.errors.NonFiniteError):
        T.exp(T.constant([[1000.0]]))


def test_embedding_lookup_out_of_range():
    table = _param("table", 5, 3)
    with pytest.raises(opera.errors.DataError):
        T.embedding_lookup(table, [1, 5])


def test_constants_are_not_recorded():
    with T.Tape() as tape:
        T.matmul(T.constant(numpy.ones((2, 2))), T.constant(numpy.ones((2, 2))))
    assert len(tape) == 0


def test_backward_twice_raises():
    a = _param("a", 2, 2)
    with T.Tape():
        loss = T.sum(T.mul(a, a))
    T.backward(loss)
    with pytest.raises(opera.errors.TapeError):
        T.backward(loss)


def test_backward_without_tape():
    a = _param("a", 2, 2)
    loss = T.sum(T.mul(a, a))
    with pytest.raises(opera.errors.TapeError):
        T.backward(loss)


def test_backward_needs_a_scalar():
    a = _param("a", 2, 2)
    with T.Tape():
        out = T.mul(a, a)
    with pytest.raises(opera.errors.ShapeError):
        T.backward(out)


def test_gradients_accumulate_until_zeroed():
    a = T.Param("a", numpy.array([[1.0, 2.0]]))
    for _ in range(2):
        with T.Tape():
            loss = T.sum(T.scale(a, 3.0))
        T.backward(loss)
    numpy.testing.assert_allclose(a.grad, [[6.0, 6.0]])
    a.zero_grad()
    numpy.testing.assert_allclose(a.grad, [[0.0, 0.0]])


def test_shared_subexpression_gradient():
    a = T.Param("a", numpy.array([[2.0]]))
    with T.Tape():
        b = T.mul(a, a)
        loss = T.sum(T.add(b, b))
    T.backward(loss)
    numpy.testing.assert_allclose(a.grad, [[8.0]])


def test_nested_tapes_restore_the_outer_tape():
    with T.Tape() as outer:
        with T.Tape() as inner:
            assert T.active_tape() is inner
        assert T.active_tape() is outer
    assert T.active_tape() is None


def test_numpy_view_is_read_only():
    a = _param("a", 2, 2)
    with pytest.raises(ValueError):
        a.numpy()[0, 0] = 1.0


def test_non_deterministic_objective():
    a = _param("a", 2, 2)
    rng = numpy.random.default_rng(0)
    with pytest.raises(opera.errors.GradientCheckError):
        opera.tensor.gradcheck.gradcheck(
            lambda: T.sum(T.scale(a, float(rng.normal()))), [a]
        )


def test_wrong_gradient_is_reported():
    a = _param("a", 1, 3)

    def f():
        # The first factor is a constant copy, so the tape sees half the slope
        return T.sum(T.mul(T.constant(a.data.copy()), a))

    report = opera.tensor.gradcheck.gradcheck(f, [a])
    assert not report.passed
    assert report.checks[0].max_rel_err == pytest.approx(0.5)
    assert report.to_csv().splitlines() == ["param,max_rel_err,pass", "a,5.000e-01,false"]


def test_relative_error_floor():
    assert opera.tensor.gradcheck.relative_error(1e-12, 0.0) == 0.0
    assert opera.tensor.gradcheck.relative_error(2.0, 1.0) == pytest.approx(0.5)
