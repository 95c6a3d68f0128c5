"""Exception hierarchy shared by services and the command line.

Services raise these; only ``main.py`` turns them into exit codes.
"""


class FstackError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 1

    def __init__(self, message: str, stage: str = None, item: str = None):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.item = item

    def to_record(self) -> dict:
        """Machine-readable error record"""
        return {
            "stage": self.stage,
            "item": self.item,
            "code": self.exit_code,
            "error": type(self).__name__,
            "message": self.message,
        }


class ConfigError(FstackError, ValueError):
    """Invalid configuration or command-line arguments"""

    exit_code = 2


class DataError(FstackError, ValueError):
    """Input data does not satisfy a precondition"""

    exit_code = 3


class InvalidFrameError(DataError):
    """Raw frame or sidecar violates the BayerFrame invariants"""


class DimensionMismatchError(DataError):
    """Arrays that must share a shape do not"""


class ImageTooSmallError(DataError):
    """Image cannot hold the requested window or pyramid depth"""


class InsufficientBurstsError(DataError):
    """Split counts ask for more bursts than are available"""


class DivergenceError(FstackError):
    """Iterative optimisation produced non-finite or degenerate values"""

    exit_code = 4
