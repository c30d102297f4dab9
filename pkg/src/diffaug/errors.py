"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class DiffaugError(Exception):
    exit_code = 1


class ConfigError(DiffaugError):
    exit_code = 2


class DataError(DiffaugError):
    exit_code = 3


class ManifestParseError(DataError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class ValidationError(DataError):
    pass


class TrainingDivergence(DiffaugError):
    exit_code = 4


class StageError(DiffaugError):
    """Wraps any failure inside a pipeline stage, keeping the original exit code."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, DiffaugError):
            self.exit_code = cause.exit_code
        elif isinstance(cause, OSError):
            self.exit_code = 5
