"""Exception hierarchy shared by the harness."""


class DermabenchError(Exception):
    """Base class for all harness errors."""


class ConfigError(DermabenchError, ValueError):
    pass


class DatasetError(DermabenchError):
    pass


class ArchiveMissingError(DatasetError, FileNotFoundError):
    pass


class IntegrityError(DatasetError):
    """Split sizes or ratios disagree with the dataset descriptor."""


class CorruptionError(DatasetError):
    """Archive content is malformed (bad labels, shapes or dtypes)."""


class ChecksumError(DatasetError):
    pass


class BuildError(DermabenchError):
    pass


class TrainingError(DermabenchError):
    pass


class MetricsError(DermabenchError, ValueError):
    pass


class StageError(DermabenchError):
    """Raised by the experiment runner; names the pipeline stage that failed."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
