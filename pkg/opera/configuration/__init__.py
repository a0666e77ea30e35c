#!/usr/bin/env python3
#
# This package contains modules related to loading, validating and accessing
# model and training configuration.

import dacite
import dataclasses
import opera.utility
import typing
import yaml

# Number of operations, answer types and count classes are fixed by the
# architecture; they are configuration fields only so checkpoints can carry
# them.
OPERATION_COUNT = 11
ANSWER_TYPE_COUNT = 5
COUNT_CLASSES = 10


@dataclasses.dataclass(frozen=True)
class ModelConfiguration:
    "Struct that contains the network's shape and ablation switches"
    # Hidden size of every representation
    d_h: int = 64
    # Attention heads in the encoder and in every operation executor
    n_h: int = 4
    # Number of self-attention blocks in the toy context encoder
    encoder_layers: int = 2
    # Longest joint question-passage sequence, separators included
    max_seq_len: int = 128
    # Vocabulary size; 0 means "derive from the vocabulary at train time"
    vocab_size: int = 0
    # Hidden width of every feed-forward network; 0 means d_h
    ffn_dim: int = 0
    # Longest span (in tokens) considered when decoding a single span
    max_span_len: int = 20
    # Weight of the operation-selection loss
    lambda_op: float = 0.3
    # Remove the whole operation-pivoted reasoning path
    ablate_op: bool = False
    # Seed for parameter initialization
    seed: int = 13
    n_ops: int = OPERATION_COUNT
    n_types: int = ANSWER_TYPE_COUNT
    count_classes: int = COUNT_CLASSES

    @property
    def feed_forward_dim(self) -> int:
        return self.ffn_dim or self.d_h


@dataclasses.dataclass(frozen=True)
class TrainingConfiguration:
    "Struct that contains optimization settings"
    model: ModelConfiguration = dataclasses.field(default_factory=ModelConfiguration)
    # Weight of the operation-selection loss; copied into the model struct
    lambda_op: float = 0.3
    # Learning rate and decoupled weight decay of the encoder parameters
    encoder_lr: float = 1e-3
    encoder_wd: float = 0.01
    # Learning rate and decoupled weight decay of every other parameter
    head_lr: float = 1e-3
    head_wd: float = 5e-5
    epochs: int = 30
    batch_size: int = 16
    # Fraction of all steps spent on the linear learning-rate ramp
    warmup_fraction: float = 0.06
    seed: int = 13
    # Minimum token frequency to enter the vocabulary
    vocab_min_count: int = 2
    # Maximum number of non-zero signs in an arithmetic derivation
    max_terms: int = 3


# Settings of the large pretrained-encoder configuration; far too
# large to train at desk scale.
PROFILES: typing.Dict[str, dict] = {
    "desk": {},
    "paper": {
        "encoder_lr": 1.5e-5,
        "head_lr": 5e-4,
        "encoder_wd": 0.01,
        "head_wd": 5e-5,
        "epochs": 12,
        "batch_size": 16,
        "max_terms": 3,
        "model": {"d_h": 1024, "n_h": 16, "encoder_layers": 24, "max_seq_len": 512},
    },
}


def load_training_configuration(
    f: typing.Optional[typing.IO] = None,
    *,
    profile: str = "desk",
    overrides: typing.Optional[dict] = None,
) -> TrainingConfiguration:
    """
    Load the given configuration YAML file on top of the named profile, then
    apply command-line overrides. The configuration will be validated during
    loading. If the configuration is valid, return a configuration struct.
    Otherwise, raises an exception.
    """
    assert profile in PROFILES, f"profile must be one of {sorted(PROFILES)}"
    data = yaml.safe_load(f) if f is not None else None
    assert data is None or isinstance(data, dict), "configuration must be a mapping"
    merged = opera.utility.merge_complex_dictionaries(
        PROFILES[profile], data or {}, overrides or {}
    )
    return configuration_from_dict(merged)


def configuration_from_dict(data: dict) -> TrainingConfiguration:
    # The λ of the loss lives in both structs; the training value wins.
    if "lambda_op" in data:
        data = opera.utility.merge_complex_dictionaries(
            data, {"model": {"lambda_op": data["lambda_op"]}}
        )
    configuration = dacite.from_dict(
        data_class=TrainingConfiguration,
        data=data,
        config=dacite.Config(strict=True),
    )
    validate_configuration(configuration)
    return configuration


def configuration_to_dict(configuration: TrainingConfiguration) -> dict:
    return dataclasses.asdict(configuration)


def validate_configuration(configuration: TrainingConfiguration,) -> None:
    """
    Check if the given configuration struct has any obvious mistakes. If the
    configuration is valid, runs to completion. Otherwise, raises an
    AssertionError.
    """
    validators = [
        validate_model_shape,
        validate_fixed_arities,
        validate_rates,
        validate_schedule,
    ]

    for f in validators:
        f(configuration)


def validate_model_shape(configuration: TrainingConfiguration,) -> None:
    model = configuration.model
    assert model.d_h > 0 and model.n_h > 0, "d_h and n_h must be positive"
    assert model.d_h % model.n_h == 0, "n_h must divide d_h"
    assert model.encoder_layers >= 0, "encoder_layers must be non-negative"
    assert model.max_seq_len >= 4, "max_seq_len must leave room for separators"
    assert model.vocab_size >= 0, "vocab_size must be non-negative"
    assert model.max_span_len >= 0, "max_span_len must be non-negative"
    assert model.lambda_op >= 0, "lambda_op must be non-negative"


def validate_fixed_arities(configuration: TrainingConfiguration,) -> None:
    model = configuration.model
    assert model.n_ops == OPERATION_COUNT, f"n_ops must be {OPERATION_COUNT}"
    assert model.n_types == ANSWER_TYPE_COUNT, f"n_types must be {ANSWER_TYPE_COUNT}"
    assert model.count_classes == COUNT_CLASSES, f"count_classes must be {COUNT_CLASSES}"


def validate_rates(configuration: TrainingConfiguration,) -> None:
    assert configuration.lambda_op >= 0, "lambda_op must be non-negative"
    for name in ("encoder_lr", "head_lr"):
        assert getattr(configuration, name) > 0, f"{name} must be positive"
    for name in ("encoder_wd", "head_wd"):
        assert getattr(configuration, name) >= 0, f"{name} must be non-negative"


def validate_schedule(configuration: TrainingConfiguration,) -> None:
    assert (
        0 <= configuration.warmup_fraction < 1
    ), "warmup_fraction must be in [0, 1)"
    assert configuration.epochs >= 0, "epochs must be non-negative"
    assert configuration.batch_size > 0, "batch_size must be positive"
    assert configuration.vocab_min_count >= 1, "vocab_min_count must be positive"
    assert configuration.max_terms >= 1, "max_terms must be positive"
