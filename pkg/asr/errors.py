"""Exception types raised by the asr library."""


class AsrError(Exception):
    """Base class of all errors raised by asr."""


class DimensionError(AsrError, ValueError):
    """An array has the wrong number of axes or a mismatched extent."""


class ContractError(AsrError):
    """A pre- or post-condition of an operation was violated."""


class ConfigurationError(AsrError, ValueError):
    """A configuration value, file or combination of settings is invalid."""


class TrainingDivergedError(AsrError, RuntimeError):
    """The training loss became NaN or infinite."""
