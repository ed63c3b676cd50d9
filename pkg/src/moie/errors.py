"""Exception hierarchy shared across the package."""


class MoieError(Exception):
    """Base class for all package errors."""


class ContractError(MoieError, ValueError):
    """A caller broke a documented precondition (shapes, ranges)."""


class InputError(MoieError, ValueError):
    """Bad user-supplied data or arguments."""


class StateError(MoieError, RuntimeError):
    """An operation was called in the wrong state."""


class NumericError(MoieError, ArithmeticError):
    """Non-finite values or a guarded division."""


class PipelineError(MoieError, RuntimeError):
    """A multi-step pipeline cannot continue."""


class ParseError(InputError):
    """Malformed file contents; message carries the row number."""
