"""Exception hierarchy shared by every stage."""


class ExplainSegError(Exception):
    """Base class for all package errors."""


class DataIntegrityError(ExplainSegError, ValueError):
    """Non-finite voxels, non-binary masks and similar payload problems."""


class ShapeError(ExplainSegError, ValueError):
    pass


class ConfigError(ExplainSegError, ValueError):
    pass


class PreconditionError(ExplainSegError, ValueError):
    pass


class GenerationError(ExplainSegError, RuntimeError):
    pass


class TrainingError(ExplainSegError, RuntimeError):
    pass


class UndefinedMetricError(ExplainSegError, ValueError):
    pass


class StudyMismatchError(ExplainSegError, ValueError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = sorted(offenders)


# io_formats error kinds, one class per failure mode

class FormatError(ExplainSegError, OSError):
    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = None if path is None else str(path)


class MissingFileError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class SchemaError(FormatError):
    def __init__(self, message, field=None, path=None):
        super().__init__(message if field is None else f"{message} (field: {field})", path)
        self.field = field


class ReferentialError(FormatError):
    pass
