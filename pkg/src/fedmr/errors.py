"""Exception types shared across the package.

Two families matter to callers: ValidationError covers bad inputs (config
files, dataset files, CLI arguments) and maps to exit code 1; everything else
under FedmrError is a runtime failure and maps to exit code 2.
"""


class FedmrError(Exception):
    """Base class for all package errors."""


class ValidationError(FedmrError):
    """Invalid user-supplied input: config, dataset file, CLI argument."""


class MalformedLineError(ValidationError):
    """A text input file has a line that does not parse."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


class BadMagicError(ValidationError):
    """A binary table file does not start with the expected magic bytes."""


class TruncatedPayloadError(ValidationError):
    """A binary table file ends before its declared payload does."""


class RowCountMismatchError(ValidationError):
    """A table's row count does not match the item index it must align with."""


class ShapeError(FedmrError):
    """Kernel op applied to operands with incompatible shapes."""

    def __init__(self, op_kind: str, shapes, detail: str = ""):
        self.op_kind = op_kind
        self.shapes = tuple(shapes)
        msg = f"{op_kind}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FedmrError):
    """A value that must be finite is NaN or infinite."""


class AccumulationError(FedmrError):
    """The accumulated-gradient bookkeeping identity was violated."""
