"""Exceptions raised throughout the gkdistill package.

Every exception derives from `GkdError` and carries the process exit code the command-line
interface reports when it escapes a command.
"""
from __future__ import annotations

from typing import Any, ClassVar, Sequence


class GkdError(RuntimeError):
    """Base class of all the errors raised by gkdistill."""

    exit_code: ClassVar[int] = 1


# ---- numeric core ---------------------------------------------------------------------------


class ShapeMismatchError(GkdError, ValueError):
    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        shapes_str = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shapes_str}")


class InvalidHyperparameterError(GkdError, ValueError):
    def __init__(self, name: str, value: Any, requirement: str):
        self.name = name
        self.value = value
        super().__init__(f"invalid value {value!r} for {name}: {requirement}")


class NumericOverflowError(GkdError, ArithmeticError):
    def __init__(self, primitive: str, detail: str = "non-finite value"):
        self.primitive = primitive
        super().__init__(f"{primitive}: {detail}")


class StaleTapeError(GkdError):
    pass


class OracleUnusableError(GkdError):
    pass


# ---- data generation ------------------------------------------------------------------------


class InvalidConfigError(GkdError, ValueError):
    exit_code = 2


class InvalidRatioError(InvalidConfigError):
    def __init__(self, ratio: float, attainable: Sequence[float]):
        self.ratio = ratio
        self.attainable = tuple(attainable)
        grid = ", ".join(f"{r:g}" for r in self.attainable)
        super().__init__(f"overlap ratio {ratio!r} is not attainable; attainable ratios: {grid}")


class InvalidSplitError(InvalidConfigError):
    pass


class InvalidBatchConfigError(InvalidConfigError):
    pass


# ---- distillation ---------------------------------------------------------------------------


class DomainError(GkdError, ValueError):
    pass


class MissingClassError(GkdError, ValueError):
    def __init__(self, class_id: int, detail: str = "has no instances"):
        self.class_id = class_id
        super().__init__(f"class {class_id} {detail}")


class StructuralError(GkdError, ValueError):
    pass


class FrozenModelError(GkdError):
    pass


# ---- training -------------------------------------------------------------------------------


class TrainingDivergedError(GkdError):
    exit_code = 4

    def __init__(self, stage: str, epoch: int, cause: Exception | None = None):
        self.stage = stage
        self.epoch = epoch
        message = f"training diverged during stage '{stage}' at epoch {epoch}"
        if cause is not None:
            message += f" ({cause})"
        super().__init__(message)


class StageDegenerateError(GkdError):
    pass


# ---- evaluation -----------------------------------------------------------------------------


class EmptyDatasetError(GkdError, ValueError):
    pass


class MixedScaleError(GkdError, ValueError):
    pass


class UndefinedAucError(GkdError, ValueError):
    pass


# ---- command line ---------------------------------------------------------------------------


class ConfigError(GkdError, ValueError):
    exit_code = 2

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        location = ""
        if key is not None:
            location += f"[{key}]"
        if line is not None:
            location += f" (line {line})"
        super().__init__(f"{location.strip()}: {message}" if location else message)


class MissingCheckpointError(GkdError, FileNotFoundError):
    exit_code = 3


class OutputExistsError(GkdError, FileExistsError):
    pass
