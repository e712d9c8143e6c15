"""Exception hierarchy shared across the package.

Compute-contract violations (bad math domains, format mismatches, severed
networks) and input/format problems (unparseable files, bad config) are kept
in separate branches so the CLI can map them to distinct exit codes.
"""


class CapskitError(Exception):
    """Base class for all package errors."""


class ContractError(CapskitError):
    """A compute-side contract was violated (CLI exit code 1)."""


class DomainError(ContractError):
    """Argument outside the mathematical domain of an operation."""


class FormatMismatchError(ContractError):
    """Fixed-point operands with different formats were combined."""


class AccumulatorOverflowError(ContractError):
    """Checked wide accumulator exceeded its 32-bit range."""


class ShapeError(ContractError):
    """Tensor shapes inconsistent with the operation's contract."""


class SeveredNetworkError(ContractError):
    """Pruning left a layer with zero surviving output channels."""


class InputError(CapskitError):
    """An input file or configuration was invalid (CLI exit code 2)."""


class ParseError(InputError):
    """A binary file failed to parse.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(InputError):
    """A file parsed but its internal consistency checks failed."""


class ConfigError(InputError):
    """A run-configuration file contained bad keys or values."""
