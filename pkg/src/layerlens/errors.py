"""Exception hierarchy shared across the package.

Everything raised on purpose derives from ``LayerlensError`` so the CLI can
map failures to exit codes (config errors -> 2, runtime errors -> 1).
"""


class LayerlensError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LayerlensError, ValueError):
    """Array shapes incompatible with an operation; message names both shapes."""


class SpecError(LayerlensError, ValueError):
    """Invalid network description (broken shape chain, spatial collapse, ...)."""


class TrainingDiverged(LayerlensError, RuntimeError):
    """Non-finite loss encountered; message names the stage."""


class WeightsError(LayerlensError):
    """Base for weight-file problems."""


class BadMagic(WeightsError):
    pass


class VersionMismatch(WeightsError):
    pass


class TruncatedFile(WeightsError):
    pass


class ChecksumMismatch(WeightsError):
    pass


class SpecMismatch(WeightsError):
    """Weight file was written for a different network description."""


class ManifestError(LayerlensError, ValueError):
    """Malformed or inconsistent dataset manifest; message carries line/field."""


class ImageFormatError(LayerlensError, ValueError):
    """Unsupported or truncated image file."""


class DegenerateDesign(LayerlensError, RuntimeError):
    """Perturbation design matrix carries no information (all rows identical)."""


class ConfigError(LayerlensError, ValueError):
    """Invalid experiment configuration; message names the offending key."""
