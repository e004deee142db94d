"""Exception types shared across the package."""

from __future__ import annotations


class DomSTError(Exception):
    """Base class for every error raised by domst."""


class ShapeError(DomSTError, ValueError):
    """A tensor did not have the dimensions a block expected."""

    def __init__(self, where: str, expected, actual, detail: str = ""):
        self.where = where
        self.expected = expected
        self.actual = actual
        msg = f"{where}: expected shape {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(DomSTError, ValueError):
    """NaN or Inf reached a layer boundary."""


class ConfigError(DomSTError, ValueError):
    pass


class DataError(DomSTError, ValueError):
    """Input data failed validation. Carries file/line/column when known."""

    def __init__(self, message: str, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")


class TrainingDiverged(DomSTError, RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class WorkerFailure(DomSTError, RuntimeError):
    """A logical device worker raised; the job is aborted."""

    def __init__(self, worker: str, reason: str):
        self.worker = worker
        self.reason = reason
        super().__init__(f"worker {worker} failed: {reason}")
