"""Exception hierarchy shared across the toolkit.

Subclasses map onto the CLI exit codes: ConfigError -> 2,
NumericalError -> 3, InputFormatError (and plain OSError) -> 4.
"""


class FullfieldError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FullfieldError):
    """Invalid configuration. Carries every violation found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericalError(FullfieldError):
    """Degenerate geometry, divergence, or an otherwise unsolvable problem."""


class InputFormatError(FullfieldError):
    """A structured input file (PGM, PLY, rig, CSV) could not be parsed."""
