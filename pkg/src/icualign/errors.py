"""Exception types shared across the package."""


class IcuAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(IcuAlignError):
    """Operands have incompatible shapes."""


class ConfigError(IcuAlignError):
    """Invalid configuration value."""


class DataError(IcuAlignError):
    """Invalid data content (non-finite values, out-of-range ids, ...)."""


class SequenceLengthError(IcuAlignError):
    """Input sequence exceeds the configured maximum length."""


class BatchError(IcuAlignError):
    """A batch violates its construction invariants."""


class ContractError(IcuAlignError):
    """A caller violated an operation's contract."""


class SchemaError(IcuAlignError):
    """Dataset on disk does not match the expected schema."""


class CheckpointError(IcuAlignError):
    """Checkpoint file is corrupt, truncated, or incompatible."""


class UndefinedMetricError(IcuAlignError):
    """Metric is undefined for the given label distribution."""


class NonFiniteGradientError(IcuAlignError):
    """A gradient contained NaN/Inf; the optimizer step was aborted."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name
