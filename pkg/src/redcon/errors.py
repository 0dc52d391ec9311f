"""Exception types shared across the package."""


class RedconError(Exception):
    """Base class for all package errors."""


class ShapeError(RedconError):
    """Tensor extents incompatible with the requested operation."""


class DegenerateInputError(RedconError):
    """Numerically degenerate input (e.g. a near-zero row fed to a normalizer)."""


class ConfigError(RedconError):
    """Invalid configuration value or combination."""


class ContractViolation(RedconError):
    """Caller broke a documented precondition (e.g. non-unit feature rows)."""


class NumericFaultError(RedconError):
    """Non-finite values showed up where finite math was required."""


class InputError(RedconError):
    """Malformed runtime input (bad ground-truth pairing, empty split, ...)."""


class CorpusFormatError(RedconError):
    """Base class for corpus/checkpoint file parse failures."""


class MalformedHeaderError(CorpusFormatError):
    """Header lines missing, garbled, or out of order."""


class VersionMismatchError(CorpusFormatError):
    """File carries an unsupported format version token."""


class TruncatedPayloadError(CorpusFormatError):
    """Binary payload shorter than the header promised."""
