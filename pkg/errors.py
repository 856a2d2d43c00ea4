import logging
from contextlib import contextmanager
from typing import Optional

logger = logging.getLogger(__name__)


class LatentITRError(Exception):
    """Base class for every failure raised by this project."""


class SchemaError(LatentITRError):
    pass


class DataValidationError(LatentITRError):
    """A malformed data cell, reported with its row and column."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}")


class ModelFileError(LatentITRError):
    pass


class LatentSearchError(LatentITRError):
    pass


class ForwardCacheError(LatentITRError):
    pass


class NonFiniteGradientError(LatentITRError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"Non-finite gradient in parameter block '{block}'")


class TrainingError(LatentITRError):
    pass


class CrossValidationError(LatentITRError):
    pass


class UnknownOutcomeError(LatentITRError):
    pass


@contextmanager
def error_handler(operation_name: str):
    try:
        yield
    except Exception as e:
        logger.error(f"Error in {operation_name}: {str(e)}", exc_info=True)
        raise
