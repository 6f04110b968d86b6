"""Exception hierarchy shared by the simulator, the CLI and the API.

Normal protocol outcomes (an item absent from a frame, a queued lock request,
a rejected validation) are returned as values. Exceptions are reserved for
configuration mistakes and for states a correct protocol can never reach.
"""

from collections.abc import Iterable


class SimulationError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigurationError(SimulationError, ValueError):
    def __init__(self, message: str, *, fields: Iterable[str] = ()) -> None:
        self.fields = tuple(fields)
        if self.fields:
            message = f"{message} (fields: {', '.join(self.fields)})"
        super().__init__(message)


class ProtocolViolation(SimulationError):
    """A scheduler, lock manager or client hook was driven outside its contract."""


class UnknownItemError(SimulationError, KeyError):
    def __init__(self, item_id: int) -> None:
        self.item_id = item_id
        super().__init__(f"unknown item id {item_id}")

    def __str__(self) -> str:
        return f"unknown item id {self.item_id}"


class FrameDecodeError(SimulationError, ValueError):
    """Encoded frame bytes are truncated, padded or internally inconsistent."""


class InvariantViolation(SimulationError):
    """A checked run invariant (lock safety, bandwidth, accounting) failed."""


class ReportInputError(SimulationError):
    def __init__(self, message: str, *, missing: Iterable[str] = ()) -> None:
        self.missing = tuple(missing)
        if self.missing:
            message = f"{message}: {', '.join(self.missing)}"
        super().__init__(message)
