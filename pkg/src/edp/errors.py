"""Exception hierarchy shared across the package."""


class EdpError(Exception):
    """Base class for every error raised by this package."""


class ContractError(EdpError, ValueError):
    """A caller violated a precondition (shapes, sizes, ranges)."""


class ShapeError(ContractError):
    """Layer chain or tensor shapes do not line up."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class NumericError(EdpError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""

    def __init__(self, message, layer_index=None, batch_index=None):
        where = []
        if batch_index is not None:
            where.append(f"batch {batch_index}")
        if layer_index is not None:
            where.append(f"layer {layer_index}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.layer_index = layer_index
        self.batch_index = batch_index


class FormatError(EdpError):
    """Base class for on-disk format problems (IDX input, model files)."""


class WrongMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class PayloadShapeError(FormatError):
    def __init__(self, expected, actual):
        super().__init__(f"expected {expected} parameters, payload holds {actual}")
        self.expected = expected
        self.actual = actual


class StageError(EdpError):
    """A pipeline stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
