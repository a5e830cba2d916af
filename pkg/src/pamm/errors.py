"""Shared exception types.

ConfigError covers bad user input (files, configs, specifications) and maps
to CLI exit code 2; NumericError covers numerical failures (singular systems,
non-convergence) and maps to exit code 3.
"""


class PammError(Exception):
    pass


class ConfigError(PammError):
    pass


class NumericError(PammError):
    pass
