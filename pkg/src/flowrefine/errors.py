"""Error taxonomy shared by the library and the command-line front end.

Exit-code mapping used by the CLI: InputFileError -> 1, ConfigError -> 2,
NumericalError -> 3.
"""


class InputFileError(Exception):
    """An input file is missing, truncated, or violates its format."""


class ConfigError(Exception):
    """A configuration file or flag combination is invalid."""


class NumericalError(Exception):
    """A solver produced non-finite values and cannot continue."""
