"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its valid range."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class IngestionError(RuntimeError):
    """No usable data could be loaded, or an external image is malformed."""


class ReportingError(RuntimeError):
    """A report was requested before anything was recorded."""
