class ConfigError(ValueError):
    """Invalid configuration: bad spec, strategy, preset or experiment file."""


class InputError(ValueError):
    """Tensor shape or index out of the range an operation accepts."""


class MissingDataError(FileNotFoundError):
    """Dataset files are not present under the data root."""


class InstrumentationError(RuntimeError):
    """Update counting was requested from a run without a touch counter."""
