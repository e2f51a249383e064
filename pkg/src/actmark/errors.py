"""Exception hierarchy shared by every actmark module."""


class WatermarkError(Exception):
    """Base class for all actmark failures."""


class ShapeError(WatermarkError, ValueError):
    pass


class InputError(WatermarkError, ValueError):
    pass


class NumericError(WatermarkError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class EmbeddingFailedError(WatermarkError):
    """Raised when the hidden-layer watermark does not self-extract cleanly."""

    def __init__(self, ber, model=None, centers=None):
        super().__init__(f"watermark embedding failed: self-extraction BER = {ber:.4f}")
        self.ber = ber
        self.model = model
        self.centers = centers


class KeyTooShortError(WatermarkError):
    pass


class RarityUnsatisfiableError(WatermarkError):
    def __init__(self, message, acceptance_rate):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class InsufficientKeysError(WatermarkError):
    def __init__(self, message, available):
        super().__init__(message)
        self.available = available


class ConvergenceError(WatermarkError):
    pass


class ProtocolError(WatermarkError):
    pass


class FormatError(WatermarkError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class CorruptionError(FormatError):
    pass


class SetupError(WatermarkError):
    pass
