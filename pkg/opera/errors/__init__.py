#!/usr/bin/env python3
#
# This module contains the exceptions raised across the project. The CLI maps
# DataError (and subclasses) to exit status 2.


class OperaError(Exception):
    "Base class for every error raised on purpose by this project"


class DataError(OperaError):
    "Input data cannot be used: malformed files, empty datasets, bad ids"


class RuleCompileError(DataError):
    def __init__(self, message: str, *, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CheckpointError(DataError):
    "Checkpoint file is truncated, foreign or from an incompatible version"


class ShapeError(OperaError, ValueError):
    "Operand shapes are incompatible for a tensor primitive"


class NonFiniteError(OperaError, ArithmeticError):
    "A tensor primitive produced NaN or infinity"


class TapeError(OperaError):
    "Backward was requested on a detached tensor or replayed twice"


class ExecutionError(OperaError):
    "A derivation does not satisfy its invariants for the given context"


class GradientCheckError(OperaError):
    "The function under gradient check is not deterministic"
