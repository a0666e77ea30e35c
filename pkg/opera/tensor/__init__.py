#!/usr/bin/env python3
#
# This package is a small reverse-mode automatic differentiation kernel over
# float64 numpy arrays. Operations record themselves on the active Tape only
# when one of their operands requires a gradient, so inference runs without
# any bookkeeping.
#
# Tensors are 2-D (vectors are 1xd rows) except reductions, which return
# shape (). There is no implicit broadcasting: use expand_rows.

import dataclasses
import numpy
import opera.errors
import scipy.special
import threading
import typing

LAYER_NORM_EPSILON = 1e-6
# tanh approximation of GeLU
_GELU_SCALE = numpy.sqrt(2.0 / numpy.pi)
_GELU_CUBIC = 0.044715

_local = threading.local()

Backward = typing.Callable[[numpy.ndarray], typing.Sequence[typing.Optional[numpy.ndarray]]]


class Tensor:
    def __init__(self, data, *, requires_grad: bool = False):
        self.data = numpy.asarray(data, dtype=numpy.float64)
        self.requires_grad = requires_grad
        self.tape: typing.Optional["Tape"] = None

    @property
    def shape(self) -> typing.Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> numpy.ndarray:
        "Read-only view of the values"
        view = self.data.view()
        view.flags.writeable = False
        return view

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: typing.Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Param(Tensor):
    "A named trainable leaf. Gradients accumulate into .grad."

    def __init__(self, name: str, data):
        super().__init__(numpy.array(data, dtype=numpy.float64), requires_grad=True)
        self.name = name
        self.grad = numpy.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


@dataclasses.dataclass
class _Record:
    output: Tensor
    inputs: typing.Tuple[Tensor, ...]
    backward: Backward


class Tape:
    """
    Records primitive operations executed while it is active:

        with Tape():
            loss = ...
        backward(loss)
    """

    def __init__(self):
        self.__records: typing.List[_Record] = []
        self.__consumed = False
        self.__previous: typing.Optional[Tape] = None

    def __len__(self) -> int:
        return len(self.__records)

    def __enter__(self) -> "Tape":
        self.__previous = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self.__previous

    @property
    def consumed(self) -> bool:
        return self.__consumed

    def record(self, output: Tensor, inputs: typing.Tuple[Tensor, ...], backward: Backward):
        if self.__consumed:
            raise opera.errors.TapeError("tape was already used for a backward pass")
        output.requires_grad = True
        output.tape = self
        self.__records.append(_Record(output=output, inputs=inputs, backward=backward))

    def replay(self, loss: Tensor) -> None:
        if self.__consumed:
            raise opera.errors.TapeError("backward was already called for this tape")
        self.__consumed = True
        grads: typing.Dict[int, numpy.ndarray] = {id(loss): numpy.ones_like(loss.data)}
        for record in reversed(self.__records):
            grad = grads.pop(id(record.output), None)
            if grad is None:
                continue
            for tensor, tensor_grad in zip(record.inputs, record.backward(grad)):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if isinstance(tensor, Param):
                    tensor.grad += tensor_grad
                elif id(tensor) in grads:
                    grads[id(tensor)] = grads[id(tensor)] + tensor_grad
                else:
                    grads[id(tensor)] = tensor_grad
        self.__records.clear()


def active_tape() -> typing.Optional[Tape]:
    return getattr(_local, "tape", None)


def backward(loss: Tensor) -> None:
    "Accumulate d(loss)/d(param) into every Param reachable from loss"
    if loss.shape != ():
        raise opera.errors.ShapeError(f"backward needs a scalar loss, got {loss.shape}")
    if isinstance(loss, Param):
        loss.grad += 1.0
        return
    if loss.tape is None:
        raise opera.errors.TapeError("loss was not produced by a recorded operation")
    loss.tape.replay(loss)


def _result(
    name: str,
    data: numpy.ndarray,
    inputs: typing.Tuple[Tensor, ...],
    backward_fn: Backward,
) -> Tensor:
    if not numpy.all(numpy.isfinite(data)):
        raise opera.errors.NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _require_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise opera.errors.ShapeError(f"{name} needs 2-D operands, got {t.shape}")


def _require_same(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise opera.errors.ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(*shape: int) -> Tensor:
    return Tensor(numpy.zeros(shape))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise opera.errors.ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    return _result(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: typing.Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    _require_2d("concat", *tensors)
    if axis not in (0, 1, -1):
        raise opera.errors.ShapeError(f"concat: invalid axis {axis}")
    other = 1 if axis == 0 else 0
    if len({t.shape[other] for t in tensors}) != 1:
        raise opera.errors.ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
        )
    sizes = [t.shape[axis] for t in tensors]
    bounds = numpy.cumsum([0] + sizes)

    def backward_fn(g: numpy.ndarray):
        if axis == 0:
            return [g[bounds[i] : bounds[i + 1]] for i in range(len(tensors))]
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors))]

    return _result(
        "concat",
        numpy.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        backward_fn,
    )


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise opera.errors.ShapeError(f"slice_rows: [{start}, {stop}) outside {a.shape}")

    def backward_fn(g: numpy.ndarray):
        full = numpy.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result("slice_rows", a.data[start:stop].copy(), (a,), backward_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", a)
    if not 0 <= start <= stop <= a.shape[1]:
        raise opera.errors.ShapeError(f"slice_cols: [{start}, {stop}) outside {a.shape}")

    def backward_fn(g: numpy.ndarray):
        full = numpy.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_cols", a.data[:, start:stop].copy(), (a,), backward_fn)


def gather_rows(a: Tensor, indices: typing.Sequence[int]) -> Tensor:
    _require_2d("gather_rows", a)
    index = numpy.asarray(indices, dtype=numpy.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise opera.errors.ShapeError(f"gather_rows: index out of range for {a.shape}")

    def backward_fn(g: numpy.ndarray):
        full = numpy.zeros_like(a.data)
        numpy.add.at(full, index, g)
        return (full,)

    return _result("gather_rows", a.data[index], (a,), backward_fn)


def embedding_lookup(table: Tensor, ids: typing.Sequence[int]) -> Tensor:
    index = numpy.asarray(ids, dtype=numpy.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise opera.errors.DataError(
            f"token id out of range for an embedding table of {table.shape[0]} rows"
        )
    return gather_rows(table, index)


def take(a: Tensor, rows: typing.Sequence[int], cols: typing.Sequence[int]) -> Tensor:
    "Gather the elements a[rows[i], cols[i]] into a 1xk row"
    _require_2d("take", a)
    r = numpy.asarray(rows, dtype=numpy.int64)
    c = numpy.asarray(cols, dtype=numpy.int64)
    if r.shape != c.shape:
        raise opera.errors.ShapeError(f"take: {r.shape} rows for {c.shape} columns")

    def backward_fn(g: numpy.ndarray):
        full = numpy.zeros_like(a.data)
        numpy.add.at(full, (r, c), g.reshape(-1))
        return (full,)

    return _result("take", a.data[r, c].reshape(1, -1), (a,), backward_fn)


def expand_rows(a: Tensor, n: int) -> Tensor:
    "Repeat a 1xd row n times"
    _require_2d("expand_rows", a)
    if a.shape[0] != 1:
        raise opera.errors.ShapeError(f"expand_rows needs a single row, got {a.shape}")
    return _result(
        "expand_rows",
        numpy.repeat(a.data, n, axis=0),
        (a,),
        lambda g: (g.sum(axis=0, keepdims=True),),
    )


def reshape(a: Tensor, *shape: int) -> Tensor:
    if int(numpy.prod(shape)) != a.data.size:
        raise opera.errors.ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = numpy.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(
        "softmax",
        y,
        (a,),
        lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
    )


def log_softmax(a: Tensor) -> Tensor:
    y = a.data - scipy.special.logsumexp(a.data, axis=-1, keepdims=True)
    return _result(
        "log_softmax",
        y,
        (a,),
        lambda g: (g - numpy.exp(y) * g.sum(axis=-1, keepdims=True),),
    )


def gelu(a: Tensor) -> Tensor:
    x = a.data
    t = numpy.tanh(_GELU_SCALE * (x + _GELU_CUBIC * x ** 3))
    y = 0.5 * x * (1.0 + t)

    def backward_fn(g: numpy.ndarray):
        dt = (1.0 - t ** 2) * _GELU_SCALE * (1.0 + 3.0 * _GELU_CUBIC * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result("gelu", y, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    "Normalize every row, then apply the 1xd gain and bias"
    _require_2d("layer_norm", x, gain, bias)
    if gain.shape != (1, x.shape[1]) or bias.shape != gain.shape:
        raise opera.errors.ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} do not fit {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    inverse_std = 1.0 / numpy.sqrt(x.data.var(axis=-1, keepdims=True) + LAYER_NORM_EPSILON)
    normalized = (x.data - mean) * inverse_std

    def backward_fn(g: numpy.ndarray):
        d_normalized = g * gain.data
        dx = inverse_std * (
            d_normalized
            - d_normalized.mean(axis=-1, keepdims=True)
            - normalized * (d_normalized * normalized).mean(axis=-1, keepdims=True)
        )
        return (
            dx,
            (g * normalized).sum(axis=0, keepdims=True),
            g.sum(axis=0, keepdims=True),
        )

    return _result(
        "layer_norm", normalized * gain.data + bias.data, (x, gain, bias), backward_fn
    )


def log(a: Tensor) -> Tensor:
    with numpy.errstate(divide="ignore", invalid="ignore"):
        y = numpy.log(a.data)
    return _result("log", y, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    with numpy.errstate(over="ignore"):
        y = numpy.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def sum(a: Tensor) -> Tensor:
    return _result(
        "sum", numpy.asarray(a.data.sum()), (a,), lambda g: (numpy.full_like(a.data, g),)
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise opera.errors.ShapeError("mean of an empty tensor")
    return _result(
        "mean",
        numpy.asarray(a.data.mean()),
        (a,),
        lambda g: (numpy.full_like(a.data, g / n),),
    )


def logsumexp(a: Tensor) -> Tensor:
    "log(sum(exp(a))) over all elements"
    if a.data.size == 0:
        raise opera.errors.ShapeError("logsumexp of an empty tensor")
    y = numpy.asarray(scipy.special.logsumexp(a.data))
    return _result("logsumexp", y, (a,), lambda g: (g * numpy.exp(a.data - y),))
