"""Exception hierarchy. Every class carries the CLI exit code it maps to."""

from __future__ import annotations

import enum


class StreamReasonError(Exception):
    exit_code = 10


class FormatErrorKind(str, enum.Enum):
    MISSING_THINK = "MissingThink"
    UNCLOSED_THINK = "UnclosedThink"
    MISSING_ACTION = "MissingAction"
    TRAILING_CONTENT = "TrailingContent"
    EMPTY_RESPONSE = "EmptyResponse"


class FormatError(StreamReasonError):
    """A step output that does not follow the think/action grammar."""

    exit_code = 11

    def __init__(self, kind: FormatErrorKind, detail: str = ""):
        self.kind = FormatErrorKind(kind)
        self.detail = detail
        super().__init__(f"{self.kind.value}: {detail}" if detail else self.kind.value)

    def __eq__(self, other):
        return isinstance(other, FormatError) and other.kind == self.kind

    def __hash__(self):
        return hash(self.kind)


class IngestErrorKind(str, enum.Enum):
    PARSE = "Parse"
    NON_CONTIGUOUS_CHUNKS = "NonContiguousChunks"
    BAD_GROUND_TRUTH = "BadGroundTruth"
    OVERSIZED_CHUNK = "OversizedChunk"


class IngestError(StreamReasonError):
    exit_code = 12

    def __init__(self, kind: IngestErrorKind, line: int, detail: str = ""):
        self.kind = IngestErrorKind(kind)
        self.line = line
        self.detail = detail
        super().__init__(f"line {line}: {self.kind.value}: {detail}")


class ConfigError(StreamReasonError):
    exit_code = 13


class CapacityError(StreamReasonError):
    exit_code = 14


class PositionError(StreamReasonError):
    exit_code = 15


class EmptyWindowError(StreamReasonError):
    exit_code = 16


class DimError(StreamReasonError):
    exit_code = 17


class ParamError(StreamReasonError):
    exit_code = 18


class ScriptError(StreamReasonError):
    exit_code = 19


class NonFiniteError(StreamReasonError):
    exit_code = 20


EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in (
        FormatError,
        IngestError,
        ConfigError,
        CapacityError,
        PositionError,
        EmptyWindowError,
        DimError,
        ParamError,
        ScriptError,
        NonFiniteError,
        StreamReasonError,
    )
}
