"""Exception types. Every error carries a short machine-readable ``code``."""

from __future__ import annotations


class SSMError(ValueError):
    code = "E_SSM"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class ConfigError(SSMError):
    code = "E_CONFIG"


class ShapeError(SSMError):
    code = "E_SHAPE"


class NonFiniteError(SSMError):
    code = "E_NONFINITE"


class StabilityError(SSMError):
    code = "E_UNSTABLE"


class ModeError(SSMError):
    code = "E_MODE"


class GuardError(SSMError):
    code = "E_GUARD"


class ActivityError(SSMError):
    code = "E_ACTIVITY"


class PlanError(SSMError):
    code = "E_PLAN"


class FormatError(SSMError):
    code = "E_FORMAT"


class BenchmarkBusyError(SSMError):
    code = "E_BENCH_BUSY"
