class ChainlensError(Exception):
    """Base class for every error raised by chainlens."""


class DataError(ChainlensError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LabelError(DataError):
    pass


class SegmentError(DataError):
    pass


class FetchError(ChainlensError):
    """Block download gave up. ``last_height`` is the last block fully written (or None)."""

    def __init__(self, message, last_height=None):
        self.last_height = last_height
        super().__init__(f"{message} (last fetched height: {last_height})")


class RPCAuthError(ChainlensError):
    pass


class FitError(ChainlensError):
    pass


class DegenerateFitError(FitError):
    pass


class ConvergenceError(FitError):
    pass


class DetectError(ChainlensError):
    pass


class StageError(ChainlensError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
