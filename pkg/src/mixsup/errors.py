class MixSupError(Exception):
    """Base class for all package errors."""


class EmptyMask(MixSupError, ValueError):
    pass


class EmptyBackground(MixSupError, ValueError):
    pass


class OutOfBounds(MixSupError, ValueError):
    pass


class DegenerateContour(MixSupError, ValueError):
    """Foreground component collapses to a point or a line."""


class ShapeMismatch(MixSupError, ValueError):
    pass


class NoLabeledPixels(MixSupError, ValueError):
    pass


class BadSize(MixSupError, ValueError):
    pass


class MissingAnnotation(MixSupError, FileNotFoundError):
    pass


class CorruptImage(MixSupError, OSError):
    pass


class SizeMismatch(MixSupError, ValueError):
    pass


class EmptyDataset(MixSupError, ValueError):
    pass


class EmptyInput(MixSupError, ValueError):
    pass


class NonFiniteLoss(MixSupError, FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class ConfigError(MixSupError, ValueError):
    """Invalid or unknown configuration entry."""
