"""Exception hierarchy shared by the pipeline modules."""


class TelestageError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TelestageError, ValueError):
    pass


class InvalidDepthError(InvalidInputError):
    pass


class ConfigError(TelestageError, ValueError):
    pass


class DimensionMismatchError(TelestageError, ValueError):
    pass


# depth codec


class CodecError(TelestageError, ValueError):
    """Malformed encoded payload."""


class BadMagicError(CodecError):
    pass


class TruncatedStreamError(CodecError):
    pass


class DimensionError(CodecError):
    """Zero or oversized raster dimensions."""


class MissingEndMarkerError(CodecError):
    pass


class CorruptStreamError(CodecError):
    pass


# transport


class ProtocolError(TelestageError):
    pass


# haptics / floor


class InsufficientDataError(TelestageError, ValueError):
    pass


class InfeasibleBudgetError(TelestageError):
    def __init__(self, message, achieved_db, lower_bound=None):
        super().__init__(message)
        self.achieved_db = achieved_db
        self.lower_bound = lower_bound


# pipeline


class PipelineError(TelestageError, RuntimeError):
    def __init__(self, message, stage=None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage
