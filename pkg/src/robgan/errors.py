"""Exception types shared across the package."""


class RobganError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(RobganError):
    """Operand dimensions incompatible with the requested operation."""


class ValidationError(RobganError):
    """Input values outside the documented domain (labels, targets, weights)."""


class GraphError(RobganError):
    """Autodiff graph misuse: backward on a non-scalar, repeated backward,
    or an operand that is not attached to the expected graph."""


class NumericError(RobganError):
    """Non-finite values where finite ones are required."""


class AttackError(RobganError):
    """Adversarial attack failed mid-run (non-finite gradients)."""


class FormatError(RobganError):
    """Malformed binary file: bad magic, truncation, checksum mismatch,
    out-of-range field."""


class ConfigError(RobganError):
    """Run configuration rejected: unknown key, bad type, bad value."""
