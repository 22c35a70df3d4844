"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`GMFNError`.
The CLI prints the class name as the first token of its one-line error
message, so the names are part of the public interface.
"""


class GMFNError(Exception):
    """Base class for all package errors."""


class ShapeError(GMFNError, ValueError):
    """Tensor or image dimensions do not fit an operation."""


class ConfigError(GMFNError, ValueError):
    """Invalid configuration key, value or combination."""


class TopologyError(GMFNError):
    """Feedback routing is inconsistent (bad indices, missing buffer entries)."""


class DatasetError(GMFNError):
    """Dataset directory is missing, empty or misaligned."""


class ImageFormatError(GMFNError):
    """Unreadable image file or unsupported bit depth / mode."""


class CheckpointError(GMFNError):
    """Corrupt, truncated or incompatible checkpoint file."""


class NonFiniteLossError(GMFNError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, iteration, lr, loss):
        super().__init__(f"non-finite loss at iter={iteration} lr={lr!r} loss={loss!r}")
        self.iteration = iteration
        self.lr = lr
        self.loss = loss
