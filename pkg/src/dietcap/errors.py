"""Error taxonomy shared across the package.

Every failure a caller can act on maps to one of these classes. CLI entry
points catch :class:`DietcapError` and print the class name plus message in a
machine-readable line on stderr; anything else is a bug and propagates.
"""

from __future__ import annotations


class DietcapError(Exception):
    """Base class for all package-raised errors.

    ``code`` is an optional stable identifier for errors that scripts match
    on (e.g. ``E_NO_EMPTY``); most subclasses leave it None.
    """

    code: str | None = None

    def __init__(self, message: str, *, code: str | None = None) -> None:
        super().__init__(message)
        if code is not None:
            self.code = code


class ShapeError(DietcapError):
    """Array operands have incompatible shapes; message names both shapes."""


class NumericError(DietcapError):
    """NaN/Inf reached an op that requires finite input."""


class GraphError(DietcapError):
    """Tape misuse: backward twice, backward from a non-scalar, etc."""


class ConfigError(DietcapError):
    """Invalid configuration value or combination."""


class DataError(DietcapError):
    """Malformed or out-of-contract data (files, captions, features)."""


class VocabError(DataError):
    """Token outside the vocabulary in strict encoding mode."""


class LengthError(DataError):
    """Sequence exceeds the configured maximum length."""


class LexiconError(DataError):
    """Controlled-vocabulary list fails validation (duplicates, bad entry)."""


class UndefinedRateError(DietcapError):
    """Every caption pair was excluded; the accuracy rate has no value."""


class DegenerateGeometryError(DietcapError):
    """Point set has no 3-D extent (coplanar/collinear or too few points)."""


class DegenerateCloudError(DietcapError):
    """Depth cloud too small before or after denoising."""


class ReconstructionError(DietcapError):
    """No usable frame survived for a container."""


class PipelineError(DietcapError):
    """Episode-level pipeline failure, carries a stable ``code``."""


class FileFormatError(DataError):
    """On-disk artifact violates its format contract."""
