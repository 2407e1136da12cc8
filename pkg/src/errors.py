import logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class LabError(Exception):
    """Base class for every error raised by the lab."""


class ShapeError(LabError, ValueError):
    pass


class TapeError(LabError, RuntimeError):
    pass


class ConfigError(LabError, ValueError):
    pass


class DatasetFormatError(LabError, ValueError):
    pass


class CheckpointFormatError(LabError, ValueError):
    pass


class NonFiniteLossError(LabError, FloatingPointError):
    def __init__(self, phase: str, iteration: int, value: float):
        super().__init__(f"Non-finite {phase} loss ({value}) at iteration {iteration}")
        self.phase = phase
        self.iteration = iteration
        self.value = value


class DegenerateBandWarning(UserWarning):
    """An entire adaptation epoch fell inside the ignored score band."""


def exit_code_for(exc: BaseException) -> int:
    """
    Maps an exception to the CLI exit code.
    Validation problems (config, files on disk) get 2, everything that broke while running gets 3.
    """
    if isinstance(exc, (ConfigError, DatasetFormatError, CheckpointFormatError, FileNotFoundError)):
        return EXIT_CONFIG
    if isinstance(exc, NonFiniteLossError):
        return EXIT_RUNTIME
    if isinstance(exc, LabError):
        return EXIT_RUNTIME
    logger.error(f"Unexpected {type(exc).__name__}: {exc}")
    return EXIT_RUNTIME


class EmptyBatchError(LabError, ValueError):
    pass
