"""Exception hierarchy shared across the toolkit.

Every error carries a process exit code so the command line front end can
map failures onto stable, scriptable codes: 2 for configuration problems,
3 for bad input data, 4 for numeric failures.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all toolkit-raised errors."""

    exit_code = 1


class ConfigError(ToolkitError):
    """Invalid configuration value or command line argument."""

    exit_code = 2


class DataError(ToolkitError):
    """Input data is missing, malformed, or inconsistent."""

    exit_code = 3


class DimensionError(DataError):
    """Array or grid dimensions violate an operation's requirements."""


class EmptyInputError(DataError):
    """An operation received no usable (unmasked) input."""


class NumericError(ToolkitError):
    """A numeric computation failed or produced non-finite results."""

    exit_code = 4
