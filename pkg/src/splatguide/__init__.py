"""Anisotropic Gaussian splat guided diffusion inpainting, built on numpy."""

__version__ = "0.1.0"


class SplatGuideError(Exception):
    """Base class for errors raised by this package."""


class FormatError(SplatGuideError):
    """A file did not match its expected binary layout."""


class DimensionError(SplatGuideError, ValueError):
    """Array shapes or channel counts disagree."""


class DomainError(SplatGuideError, ValueError):
    """Input is outside the domain where an operation is defined."""


class NumericError(SplatGuideError, ArithmeticError):
    """A NaN/Inf or singular quantity showed up."""


class GenerationError(SplatGuideError):
    """Mask generation exhausted its stamp budget."""


class StateError(SplatGuideError, RuntimeError):
    """Backward pass called without a matching forward cache."""


class ConfigError(SplatGuideError, ValueError):
    """Invalid configuration."""
