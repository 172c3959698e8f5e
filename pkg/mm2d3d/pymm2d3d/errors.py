"""
Exceptions raised by pymm2d3d.

Every error carries a short reason code (like the 'reason' field of the
command responses) and the process exit code the CLI maps it to.
"""


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class Mm2d3dError(Exception):
    """
    Base class of all library errors.
    """
    reason = 'Error'
    exit_code = EXIT_USAGE

    def __init__(self, msg: str = '') -> None:
        super().__init__(msg)
        self.msg = msg


class DimensionError(Mm2d3dError, ValueError):
    reason = 'DimensionMismatch'


class DomainError(Mm2d3dError, ValueError):
    reason = 'OutOfDomain'
    exit_code = EXIT_DATA


class UsageError(Mm2d3dError):
    reason = 'InvalidUsage'


class ConfigError(Mm2d3dError, ValueError):
    reason = 'InvalidConfig'


class ContractError(Mm2d3dError, ValueError):
    reason = 'ContractViolated'


class ConsistencyError(Mm2d3dError):
    reason = 'Inconsistent'


class NumericError(Mm2d3dError, ArithmeticError):
    reason = 'NumericFailure'
    exit_code = EXIT_NUMERIC


class FormatError(Mm2d3dError):
    """
    Malformed, truncated or missing file.
    offset is the byte position where decoding stopped (None for missing files).
    """
    reason = 'BadFormat'
    exit_code = EXIT_DATA

    def __init__(self, msg: str = '', offset: int = None) -> None:
        if offset is not None:
            msg = f'{msg} (at byte offset {offset})'
        super().__init__(msg)
        self.offset = offset


class TruncationError(FormatError):
    reason = 'Truncated'
