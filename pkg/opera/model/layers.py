#!/usr/bin/env python3
#
# This module contains the parameter store and the building blocks shared by
# the encoder, the operation executors and the prediction heads.

import math
import numpy
import opera.tensor
import typing

Tensor = opera.tensor.Tensor


class ParameterStore:
    """
    Creates and owns every Param of a model, in creation order. All
    initialization draws from one seeded generator so that two stores built
    with the same seed and the same sequence of calls are identical.
    """

    def __init__(self, *, d_h: int, seed: int):
        self.__params: typing.Dict[str, opera.tensor.Param] = {}
        self.__rng = numpy.random.default_rng(seed)
        self.__bound = 1.0 / math.sqrt(d_h)

    def __add(self, name: str, data: numpy.ndarray) -> opera.tensor.Param:
        assert name not in self.__params, f"duplicate parameter {name}"
        param = opera.tensor.Param(name, data)
        self.__params[name] = param
        return param

    def matrix(self, name: str, rows: int, cols: int) -> opera.tensor.Param:
        return self.__add(
            name, self.__rng.uniform(-self.__bound, self.__bound, size=(rows, cols))
        )

    def embedding(self, name: str, rows: int, cols: int) -> opera.tensor.Param:
        return self.__add(name, self.__rng.normal(0.0, 0.02, size=(rows, cols)))

    def zeros(self, name: str, cols: int) -> opera.tensor.Param:
        return self.__add(name, numpy.zeros((1, cols)))

    def ones(self, name: str, cols: int) -> opera.tensor.Param:
        return self.__add(name, numpy.ones((1, cols)))

    def parameters(self) -> typing.List[opera.tensor.Param]:
        return list(self.__params.values())

    def __getitem__(self, name: str) -> opera.tensor.Param:
        return self.__params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.__params

    def state(self) -> typing.Dict[str, numpy.ndarray]:
        return {name: p.data.copy() for name, p in self.__params.items()}

    def load_state(self, state: typing.Mapping[str, numpy.ndarray]) -> None:
        missing = set(self.__params) ^ set(state)
        assert not missing, f"parameter names differ: {sorted(missing)}"
        for name, p in self.__params.items():
            value = numpy.asarray(state[name], dtype=numpy.float64)
            assert value.shape == p.shape, f"{name}: {value.shape} != {p.shape}"
            p.data[...] = value


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int):
        self.weight = store.matrix(f"{name}.weight", d_in, d_out)
        self.bias = store.zeros(f"{name}.bias", d_out)

    def __call__(self, x: Tensor) -> Tensor:
        out = opera.tensor.matmul(x, self.weight)
        return opera.tensor.add(out, opera.tensor.expand_rows(self.bias, x.shape[0]))


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.gain = store.ones(f"{name}.gain", d)
        self.bias = store.zeros(f"{name}.bias", d)

    def __call__(self, x: Tensor) -> Tensor:
        return opera.tensor.layer_norm(x, self.gain, self.bias)


class FeedForward:
    """
    Two linear projections with a GeLU in between. Prediction heads also
    normalize the hidden layer.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        d_in: int,
        d_hidden: int,
        d_out: int,
        *,
        normalize: bool = True,
    ):
        self.hidden = Linear(store, f"{name}.hidden", d_in, d_hidden)
        self.norm = LayerNorm(store, f"{name}.norm", d_hidden) if normalize else None
        self.output = Linear(store, f"{name}.output", d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        h = opera.tensor.gelu(self.hidden(x))
        if self.norm is not None:
            h = self.norm(h)
        return self.output(h)


class WeightedPooling:
    "Attention pooling of the rows of a matrix with a learned scorer"

    def __init__(self, store: ParameterStore, name: str, d: int):
        self.scorer = Linear(store, f"{name}.scorer", d, 1)

    def __call__(self, rows: Tensor) -> Tensor:
        weights = opera.tensor.softmax(opera.tensor.transpose(self.scorer(rows)))
        return opera.tensor.matmul(weights, rows)


def attend(query: Tensor, keys: Tensor, values: Tensor, *, n_h: int) -> Tensor:
    """
    Multi-head scaled dot-product attention. Heads are contiguous column
    blocks of the projected query, keys and values; their outputs are
    concatenated.
    """
    d = query.shape[1]
    d_head = d // n_h
    factor = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(n_h):
        lo, hi = h * d_head, (h + 1) * d_head
        q = opera.tensor.slice_cols(query, lo, hi)
        k = opera.tensor.slice_cols(keys, lo, hi)
        v = opera.tensor.slice_cols(values, lo, hi)
        scores = opera.tensor.scale(
            opera.tensor.matmul(q, opera.tensor.transpose(k)), factor
        )
        heads.append(opera.tensor.matmul(opera.tensor.softmax(scores), v))
    return heads[0] if n_h == 1 else opera.tensor.concat(heads, axis=-1)


class SelfAttention:
    def __init__(self, store: ParameterStore, name: str, d: int, n_h: int):
        self.n_h = n_h
        self.wq = store.matrix(f"{name}.wq", d, d)
        self.wk = store.matrix(f"{name}.wk", d, d)
        self.wv = store.matrix(f"{name}.wv", d, d)
        self.wo = store.matrix(f"{name}.wo", d, d)

    def __call__(self, x: Tensor) -> Tensor:
        mixed = attend(
            opera.tensor.matmul(x, self.wq),
            opera.tensor.matmul(x, self.wk),
            opera.tensor.matmul(x, self.wv),
            n_h=self.n_h,
        )
        return opera.tensor.matmul(mixed, self.wo)


class EncoderBlock:
    "Post-norm transformer block"

    def __init__(self, store: ParameterStore, name: str, d: int, n_h: int, d_ffn: int):
        self.attention = SelfAttention(store, f"{name}.attention", d, n_h)
        self.attention_norm = LayerNorm(store, f"{name}.attention_norm", d)
        self.feed_forward = FeedForward(
            store, f"{name}.feed_forward", d, d_ffn, d, normalize=False
        )
        self.feed_forward_norm = LayerNorm(store, f"{name}.feed_forward_norm", d)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.attention_norm(opera.tensor.add(x, self.attention(x)))
        return self.feed_forward_norm(opera.tensor.add(x, self.feed_forward(x)))
