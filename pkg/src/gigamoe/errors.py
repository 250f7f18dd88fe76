"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI reports for it.
"""


class GigaMoEError(Exception):
    exit_code = 1


class ConfigError(GigaMoEError, ValueError):
    """Invalid configuration: bad field values, unknown keys, inconsistent shapes."""

    exit_code = 2


class ScheduleError(ConfigError):
    pass


class InputError(GigaMoEError, ValueError):
    """Bad runtime input: empty batches, out-of-range ids, malformed files."""

    exit_code = 3


class DimensionError(InputError):
    pass


class ContractError(InputError):
    pass


class LengthError(InputError):
    pass


class RangeError(InputError):
    pass


class NumericalError(GigaMoEError, ArithmeticError):
    exit_code = 4
