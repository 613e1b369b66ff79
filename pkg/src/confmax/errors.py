"""Exception hierarchy shared by every confmax module."""


class ConfmaxError(Exception):
    pass


class ShapeError(ConfmaxError, ValueError):
    pass


class DomainError(ConfmaxError, ValueError):
    pass


class ContractError(ConfmaxError, RuntimeError):
    pass


class PoisonedStateError(ConfmaxError, FloatingPointError):
    """Raised when a NaN/Inf reaches an optimizer; the run must abort."""


class FormatError(ConfmaxError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ConfmaxError, ValueError):
    """Unreadable or invalid benchmark configuration."""
