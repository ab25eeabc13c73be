"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class ContractError(RuntimeError):
    """A cross-module contract was violated (mismatched layer keys, non-scalar loss, ...)."""


class TokenError(ValueError):
    """Prompt construction used an invalid or colliding token."""


class ProtocolError(ValueError):
    """Data-split construction violated the few-shot protocol."""


class MetricError(ValueError):
    """Metric inputs cannot produce a meaningful score (e.g. empty mask)."""


class TrainingDivergenceError(RuntimeError):
    """A training loop produced a non-finite loss or gradient."""


class FormatError(ValueError):
    """A persisted container file is malformed.

    ``offset`` is the byte position where the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
