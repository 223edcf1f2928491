"""Exception types shared across the package.

The CLI maps these onto exit codes: missing files exit 1, ParseError exits 2,
and every other constraint violation exits 3.
"""


class PixelhandError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PixelhandError):
    """Invalid configuration or incompatible shapes/arguments."""


class ParseError(PixelhandError):
    """Malformed input file."""


class DegenerateGeometryError(PixelhandError):
    """Box or pixel geometry with a vanishing side."""


class GenerationError(PixelhandError):
    """Synthetic scene constraints could not be satisfied."""


class EvaluationError(PixelhandError):
    """Metrics are undefined for the given inputs (e.g. empty ground truth)."""
