"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError and its subclasses map to
exit code 2, NonFiniteLossError to exit code 3.
"""


class GsdistillError(Exception):
    """Base class for all package errors."""


class ConfigError(GsdistillError):
    """Invalid configuration, ranges, or input files."""


class ContractError(GsdistillError):
    """Shape or dimension mismatch between arguments."""


class DegenerateImageError(GsdistillError):
    """Blank image where mass is required (m00 == 0)."""


class RenderError(GsdistillError):
    """Non-finite Gaussian parameters encountered while rendering."""


class TimestepRangeError(GsdistillError):
    """Timestep outside the usable sampling range (sigma_t == 0)."""


class NonFiniteLossError(GsdistillError):
    """Training produced a non-finite loss; run aborts with diagnostics."""
