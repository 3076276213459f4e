"""Exception types. Each carries the CLI exit code it maps to."""


class SigmetricError(Exception):
    exit_code = 1


class ConfigError(SigmetricError, ValueError):
    exit_code = 2


class DataError(SigmetricError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    pass


class DatasetFormatError(DataError):
    """Malformed dataset files; ``line`` / ``offset`` locate the problem when known."""

    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class TrainingError(SigmetricError, RuntimeError):
    exit_code = 4


class MinerStarvationError(TrainingError):
    pass


class UndefinedMetricError(SigmetricError, ValueError):
    exit_code = 5


class DegenerateDataError(UndefinedMetricError):
    pass
