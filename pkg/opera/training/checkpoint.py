#!/usr/bin/env python3
#
# This module reads and writes checkpoints. Layout, little-endian:
#
#   b"OPRA" | u32 version
#   u32 length | configuration JSON
#   u32 length | vocabulary JSON (list of tokens)
#   u32 count  | count x (u32 name length | name | u32 ndim | ndim x u32 | f8 values)
#   u8 flag    | [u64 step | per param in order: first moment, second moment]
#   u8 flag    | [u32 length | generator state JSON]

import dacite
import dataclasses
import io
import json
import math
import numpy
import opera.configuration
import opera.corpus
import opera.errors
import opera.logging
import opera.model
import opera.training
import pathlib
import struct
import typing

logger = opera.logging.get_logger(__name__)

MAGIC = b"OPRA"
VERSION = 1
_VALUE_TYPE = numpy.dtype("<f8")


@dataclasses.dataclass
class Checkpoint:
    configuration: opera.configuration.TrainingConfiguration
    vocabulary: typing.List[str]
    # Ordered as the model creates them
    parameters: typing.Dict[str, numpy.ndarray]
    optimizer: typing.Optional[opera.training.OptimizerState] = None
    rng_state: typing.Optional[dict] = None


class _Reader:
    def __init__(self, data: bytes):
        self.__data = data
        self.__position = 0

    def read(self, size: int) -> bytes:
        end = self.__position + size
        if end > len(self.__data):
            raise opera.errors.CheckpointError("checkpoint is truncated")
        chunk = self.__data[self.__position : end]
        self.__position = end
        return chunk

    def unpack(self, fmt: str) -> typing.Tuple:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def blob(self) -> bytes:
        return self.read(self.u32())

    def array(self, shape: typing.Tuple[int, ...]) -> numpy.ndarray:
        count = math.prod(shape)
        values = numpy.frombuffer(self.read(count * _VALUE_TYPE.itemsize), dtype=_VALUE_TYPE)
        return values.reshape(shape).astype(numpy.float64)

    def finish(self) -> None:
        if self.__position != len(self.__data):
            raise opera.errors.CheckpointError("trailing bytes after checkpoint")


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _array(value: numpy.ndarray) -> bytes:
    return numpy.ascontiguousarray(value, dtype=_VALUE_TYPE).tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    configuration = opera.configuration.configuration_to_dict(checkpoint.configuration)
    out.write(_blob(json.dumps(configuration, sort_keys=True).encode("utf-8")))
    out.write(_blob(json.dumps(checkpoint.vocabulary).encode("utf-8")))
    out.write(struct.pack("<I", len(checkpoint.parameters)))
    for name, value in checkpoint.parameters.items():
        out.write(_blob(name.encode("utf-8")))
        out.write(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        out.write(_array(value))
    if checkpoint.optimizer is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<BQ", 1, checkpoint.optimizer.step))
        for name, value in checkpoint.parameters.items():
            for moments in (checkpoint.optimizer.first, checkpoint.optimizer.second):
                out.write(_array(moments.get(name, numpy.zeros_like(value))))
    if checkpoint.rng_state is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<B", 1))
        out.write(_blob(json.dumps(checkpoint.rng_state, sort_keys=True).encode("utf-8")))
    return out.getvalue()


def _json(reader: _Reader) -> typing.Any:
    return json.loads(reader.blob().decode("utf-8"))


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.read(len(MAGIC)) != MAGIC:
        raise opera.errors.CheckpointError("not a checkpoint: bad magic")
    version = reader.u32()
    if version != VERSION:
        raise opera.errors.CheckpointError(
            f"checkpoint format version {version} is incompatible with version {VERSION}"
        )
    # JSONDecodeError and UnicodeDecodeError are both ValueErrors
    try:
        configuration = opera.configuration.configuration_from_dict(_json(reader))
        vocabulary = _json(reader)
        assert isinstance(vocabulary, list), "vocabulary is not a list"
        assert all(isinstance(token, str) for token in vocabulary), "non-string token"
    except (ValueError, TypeError, AssertionError, dacite.DaciteError) as e:
        raise opera.errors.CheckpointError(f"corrupt checkpoint header: {e}") from e

    parameters: typing.Dict[str, numpy.ndarray] = {}
    for _ in range(reader.u32()):
        try:
            name = reader.blob().decode("utf-8")
        except UnicodeDecodeError as e:
            raise opera.errors.CheckpointError(f"corrupt parameter name: {e}") from e
        ndim = reader.u32()
        shape = reader.unpack(f"<{ndim}I")
        parameters[name] = reader.array(shape)

    optimizer = None
    if reader.unpack("<B")[0]:
        optimizer = opera.training.OptimizerState(step=reader.unpack("<Q")[0])
        for name, value in parameters.items():
            optimizer.first[name] = reader.array(value.shape)
            optimizer.second[name] = reader.array(value.shape)
    rng_state = None
    if reader.unpack("<B")[0]:
        try:
            rng_state = _json(reader)
            assert isinstance(rng_state, dict), "generator state is not an object"
        except (ValueError, AssertionError) as e:
            raise opera.errors.CheckpointError(f"corrupt generator state: {e}") from e
    reader.finish()
    return Checkpoint(
        configuration=configuration,
        vocabulary=vocabulary,
        parameters=parameters,
        optimizer=optimizer,
        rng_state=rng_state,
    )


def save_checkpoint(checkpoint: Checkpoint, path: typing.Union[str, pathlib.Path]) -> None:
    data = encode_checkpoint(checkpoint)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Wrote checkpoint with {len(checkpoint.parameters)} params to {path}")


def load_checkpoint(path: typing.Union[str, pathlib.Path]) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Cannot read checkpoint {path}: {e}")
        raise opera.errors.CheckpointError(f"{path}: {e}") from e
    checkpoint = decode_checkpoint(data)
    logger.info(f"Loaded checkpoint with {len(checkpoint.parameters)} params from {path}")
    return checkpoint


def checkpoint_from_result(result: opera.training.TrainingResult) -> Checkpoint:
    return Checkpoint(
        configuration=result.configuration,
        vocabulary=result.vocabulary.tokens,
        parameters=result.model.store.state(),
        optimizer=result.optimizer,
        rng_state=result.rng_state,
    )


def restore(
    checkpoint: Checkpoint,
) -> typing.Tuple[opera.model.OperaModel, opera.corpus.Vocabulary]:
    "Rebuild the model and vocabulary a checkpoint was taken from"
    try:
        vocabulary = opera.corpus.Vocabulary(checkpoint.vocabulary)
    except AssertionError as e:
        raise opera.errors.CheckpointError(f"checkpoint vocabulary is unusable: {e}") from e
    model = opera.model.OperaModel(checkpoint.configuration.model)
    try:
        model.store.load_state(checkpoint.parameters)
    except AssertionError as e:
        raise opera.errors.CheckpointError(f"checkpoint does not fit its model: {e}") from e
    return model, vocabulary
