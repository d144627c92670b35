"""Error taxonomy shared across the package.

Each error class carries the process exit code used by the command line
interface, so library failures map onto stable, scriptable codes:

* 2: bad configuration or bad call (shapes, empty batches, masking misuse)
* 3: malformed files (datasets, checkpoints, sidecars)
* 4: numeric failure (divergence, degenerate statistics)
* 5: planning produced no usable candidate
"""

from __future__ import annotations


class ArdynError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ArdynError):
    """Invalid configuration value, unknown key, or bad argument."""

    exit_code = 2


class ShapeError(ConfigError):
    """Array dimensions do not match what an operation requires."""


class EmptyBatchError(ConfigError):
    """An operation that needs at least one row received none."""


class MaskingError(ConfigError):
    """An autoregressive input revealed a dimension it must not see."""


class CacheError(ConfigError):
    """A backward pass was handed a stale or mismatched forward cache."""


class DataFormatError(ArdynError):
    """A file does not conform to the documented binary layout."""

    exit_code = 3


class NumericError(ArdynError):
    """A numeric quantity left the representable or sane range."""

    exit_code = 4


class DivergenceError(NumericError):
    """Training or rollout produced non-finite values."""


class DegenerateInputError(NumericError):
    """A statistic is undefined on this input (e.g. zero variance)."""


class DegenerateBootstrapError(NumericError):
    """Every bootstrap resample was degenerate for the metric."""


class PlanningFailureError(ArdynError):
    """The planner could not produce a finite candidate action."""

    exit_code = 5
