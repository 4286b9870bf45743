from typing import Iterable, Optional


class RobustHptError(Exception):
    """
    Base error of the package. Carries the process exit code the CLI reports
    and a human readable detail, in the spirit of an HTTP error with status code.
    """
    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigurationError(RobustHptError):
    exit_code = 2


class DatasetError(RobustHptError):
    exit_code = 2


class DuplicateKeyError(DatasetError):

    def __init__(self, row: int, key: str):
        super().__init__(f"Duplicate record key at row {row}: {key}")
        self.row = row


class DatasetParseError(DatasetError):

    def __init__(self, row: int, column: str, reason: str):
        super().__init__(f"Cannot parse row {row}, column '{column}': {reason}")
        self.row = row
        self.column = column


class CoverageError(RobustHptError):
    exit_code = 2

    def __init__(self, missing: Iterable[str], total_missing: int):
        missing = list(missing)
        listing = "\n  ".join(missing)
        super().__init__(f"Dataset does not cover {total_missing} required keys, e.g.:\n  {listing}")
        self.missing = missing
        self.total_missing = total_missing


class AttackError(RobustHptError):
    pass


class DivergenceError(RobustHptError):

    def __init__(self, detail: str, phase: Optional[str] = None, epoch: Optional[int] = None,
                 batch: Optional[int] = None):
        super().__init__(detail)
        self.phase = phase
        self.epoch = epoch
        self.batch = batch


class FitError(RobustHptError):
    pass


class AnalysisError(RobustHptError):
    exit_code = 2


class CorrelationUndefinedError(AnalysisError):
    pass
