"""Exception types raised across the simulator."""


class LFShieldError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LFShieldError, ValueError):
    pass


class ContractError(LFShieldError, ValueError):
    pass


class ConfigError(LFShieldError, ValueError):
    pass


class FormatError(LFShieldError, ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AggregationError(LFShieldError, RuntimeError):
    pass
