"""Exception hierarchy shared by all modules.

CLI exit codes are attached to the top-level families so the command layer can
map failures without string matching.
"""


class TracocoError(Exception):
    exit_code = 1


class ConfigError(TracocoError, ValueError):
    exit_code = 2


class GeometryError(TracocoError, ValueError):
    exit_code = 2


class ShapeError(TracocoError, ValueError):
    exit_code = 2


class DomainError(TracocoError, ValueError):
    exit_code = 4


class NumericError(TracocoError, ArithmeticError):
    exit_code = 4


class ScheduleError(TracocoError, ValueError):
    exit_code = 2


class DataError(TracocoError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetadataError(DataError):
    pass


class IntegrityError(DataError):
    def __init__(self, message, section=None):
        if section is not None:
            message = f"section '{section}': {message}"
        super().__init__(message)
        self.section = section
