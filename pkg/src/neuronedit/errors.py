"""Exception hierarchy.  Each class maps to a CLI exit code."""

from __future__ import annotations


class NeuronEditError(Exception):
    """Base error.  ``stage`` names the pipeline stage that raised it."""

    exit_code = 2

    def __init__(self, message: str, *, stage: str | None = None, key: str | None = None):
        super().__init__(message)
        self.stage = stage
        self.key = key

    def record(self) -> dict:
        return {"error": type(self).__name__, "message": str(self), "stage": self.stage,
                "key": self.key, "exit_code": self.exit_code}


class ConfigError(NeuronEditError):
    exit_code = 1


class DataError(NeuronEditError):
    exit_code = 2


class NumericalError(NeuronEditError):
    exit_code = 3


class EditError(NeuronEditError):
    """Raised by the editing pipeline; ``stage`` is one of attribute, mask,
    value_target, update, apply."""

    exit_code = 3
