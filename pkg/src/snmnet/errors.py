"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for data problems, 4 for runtime and numerical failures.
"""

from __future__ import annotations


class SNMError(Exception):
    exit_code = 4


class ConfigError(SNMError):
    exit_code = 2


class DataError(SNMError):
    exit_code = 3


class LoadError(DataError):
    """A dataset directory or sample file failed validation."""


class ProtocolError(DataError):
    """A split or fold cannot be built from the available samples."""


class NumericalError(SNMError):
    exit_code = 4


class InvalidInputError(NumericalError, ValueError):
    pass


class ShapeError(NumericalError, ValueError):
    pass


class DegenerateSampleError(NumericalError):
    pass


class FactorizationError(NumericalError):
    """Cholesky hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot} is {value!r}; "
            "regularize before factoring"
        )


class DegenerateFeatureError(NumericalError):
    pass


class ContractError(SNMError):
    """A caller broke a documented precondition (stale tape, non-unit feature...)."""


class TrainingAborted(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass


class MetricUndefinedError(NumericalError):
    pass
