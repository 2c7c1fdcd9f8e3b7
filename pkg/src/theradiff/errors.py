"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2,
DependencyError -> 3, everything else -> 1.
"""


class TheradiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TheradiffError):
    """Invalid configuration value or malformed config file."""


class ContractError(TheradiffError):
    """An operation was called with arguments violating its contract."""


class EncodingError(TheradiffError):
    """A categorical value could not be encoded against known levels."""


class IntegrityError(TheradiffError):
    """Stored artifacts are inconsistent (missing or mismatched pieces)."""


class DependencyError(TheradiffError):
    """A pipeline stage is missing a prerequisite artifact."""
