"""Exception hierarchy shared across the package."""


class C2FError(Exception):
    """Base class for all package errors."""


class ShapeError(C2FError, ValueError):
    """Operand extents do not line up."""


class DomainError(C2FError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateInputError(DomainError):
    """Input cannot be normalized (e.g. a zero row)."""


class ContractError(C2FError, ValueError):
    """A caller-side precondition was violated."""


class NoEligibleCandidateError(C2FError):
    """Hard-negative sampling found nothing to draw from."""


class NonFiniteError(C2FError, FloatingPointError):
    """NaN or Inf appeared in a loss or gradient."""


class FormatError(C2FError, IOError):
    """Base for binary file decoding failures."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ConfigError(C2FError, ValueError):
    """Malformed or unknown configuration keys."""
