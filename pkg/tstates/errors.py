"""
Transformational States Errors
Exception types shared by every tstates component
"""

from typing import Optional


class TStatesError(Exception):
    """Base class for all tstates failures"""


class ShapeError(TStatesError, ValueError):
    """Tensor dimensions do not fit the operation"""


class DomainError(TStatesError, ValueError):
    """A value lies outside the domain of an operation"""


class ConfigError(TStatesError, ValueError):
    """Configuration is inconsistent or names an unknown key"""


class UsageError(TStatesError, ValueError):
    """An operation was called in a way its contract forbids"""


class FormatError(TStatesError, ValueError):
    """
    A container file could not be parsed.

    Args:
        message: Human-readable description
        offset: Byte offset where parsing failed, when known
        field: Name of the offending header field, when known
    """

    def __init__(self, message: str, offset: Optional[int] = None,
                 field: Optional[str] = None):
        self.offset = offset
        self.field = field
        where = []
        if field is not None:
            where.append(f"field {field}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class TrainingDiverged(TStatesError, RuntimeError):
    """Loss became NaN or infinite; dump_path holds the diagnostic state"""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")
