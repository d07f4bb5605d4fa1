"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can print
``ERROR <code>: <message>`` on a single line.
"""


class AlignError(Exception):
    code = "AlignError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


# numcore
class ZeroNormRow(AlignError, ValueError):
    code = "ZeroNormRow"

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has (near) zero Euclidean norm")


class IndexOutOfRange(AlignError, IndexError):
    code = "IndexOutOfRange"


class NonDeterministicLoss(AlignError):
    code = "NonDeterministicLoss"


# dataset
class ParseError(AlignError, ValueError):
    code = "ParseError"

    def __init__(self, line: int, detail: str = ""):
        self.line = line
        super().__init__(f"line {line}: {detail}" if detail else f"line {line}")


class DuplicateId(AlignError, ValueError):
    code = "DuplicateId"

    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"duplicate id {record_id!r}")


class MissingField(AlignError, KeyError):
    code = "MissingField"

    def __init__(self, key: str, line: int | None = None):
        self.key = key
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"missing field {key!r}{where}")

    def __str__(self):
        return self.args[0]


class CaptionerFailed(AlignError, RuntimeError):
    code = "CaptionerFailed"

    def __init__(self, status: int, detail: str = ""):
        self.status = status
        msg = f"captioner exited with status {status}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EmptyCaption(AlignError, ValueError):
    code = "EmptyCaption"

    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"empty caption for {record_id!r}")


class BadRatios(AlignError, ValueError):
    code = "BadRatios"


class BatchTooSmall(AlignError, ValueError):
    code = "BatchTooSmall"


class CorruptRecord(AlignError, ValueError):
    code = "CorruptRecord"

    def __init__(self, offset: int, detail: str = ""):
        self.offset = offset
        msg = f"corrupt record at byte offset {offset}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DimMismatch(AlignError, ValueError):
    code = "DimMismatch"


# encoders / alignment
class EmptySequence(AlignError, ValueError):
    code = "EmptySequence"


class NonFiniteLoss(AlignError, FloatingPointError):
    code = "NonFiniteLoss"


class BadMagic(AlignError, ValueError):
    code = "BadMagic"


class VersionUnsupported(AlignError, ValueError):
    code = "VersionUnsupported"


class ShapeMismatch(AlignError, ValueError):
    code = "ShapeMismatch"


class ConfigError(AlignError, ValueError):
    code = "ConfigError"


# inference
class UnknownLabel(AlignError, ValueError):
    code = "UnknownLabel"

    def __init__(self, record_id: str, label: str):
        self.record_id = record_id
        self.label = label
        super().__init__(f"record {record_id!r} has label {label!r} outside the prompt classes")


class UnknownDatasetName(AlignError, KeyError):
    code = "UnknownDatasetName"

    def __str__(self):
        return self.args[0]


class KTooLarge(AlignError, ValueError):
    code = "KTooLarge"
