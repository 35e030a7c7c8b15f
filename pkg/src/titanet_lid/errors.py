"""Exception types shared across the package."""


class TitanetLidError(Exception):
    """Base class for all package errors."""


class DimensionError(TitanetLidError, ValueError):
    pass


class DegenerateInputError(TitanetLidError, ValueError):
    """Raised when a reduction has nothing to reduce over (zero valid frames, zero counts)."""


class LabelError(TitanetLidError, ValueError):
    pass


class ContractError(TitanetLidError, ValueError):
    pass


class ConfigError(TitanetLidError, ValueError):
    pass


class DecodeError(TitanetLidError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TooShortError(TitanetLidError, ValueError):
    pass


class TrainingDivergenceError(TitanetLidError, RuntimeError):
    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class CheckpointError(TitanetLidError, ValueError):
    pass


class ManifestError(TitanetLidError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
