"""
Error types raised across fusion_lab.

Input problems subclass ValueError, failures that happen while running
(training divergence, audits) subclass RuntimeError. The CLI maps each
family to an exit code through EXIT_CODES.
"""


class LabError(Exception):
    """Base class for all fusion_lab errors."""

    exit_code = 1


class ShapeError(LabError, ValueError):
    """Tensor dimensions do not agree with what an operation needs."""


class ContractError(LabError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(LabError, RuntimeError):
    """A non-finite value showed up where finite values are required."""


class VocabError(LabError, ValueError):
    """A token or id falls outside the closed vocabulary."""


class LengthError(LabError, ValueError):
    """A sequence is longer than the configured maximum."""


class KindError(LabError, ValueError):
    """An operation was called on the wrong kind of language model."""


class RangeError(LabError, ValueError):
    """A layer index (or similar) is outside the valid range."""


class ConfigError(LabError, ValueError):
    """Invalid experiment, model or dataset configuration."""

    exit_code = 2


class TrainingError(LabError, RuntimeError):
    """Training diverged (non-finite or exploding loss)."""

    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        self.epoch = epoch
        self.step = step
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class AuditError(LabError, RuntimeError):
    """A frozen-model, parameter-set or leakage audit failed."""

    exit_code = 4


class FormatError(LabError, ValueError):
    """A binary or JSON artifact could not be parsed."""

    exit_code = 5

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


EXIT_CODES = {
    ConfigError: ConfigError.exit_code,
    TrainingError: TrainingError.exit_code,
    AuditError: AuditError.exit_code,
    FormatError: FormatError.exit_code,
}
