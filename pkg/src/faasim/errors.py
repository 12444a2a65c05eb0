"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class FaasimError(Exception):
    """Base class for all engine errors."""


class ContractViolation(FaasimError):
    """An operation was called with arguments that break its contract."""


class TsvParseError(FaasimError):
    """A model/matrix TSV file could not be parsed; message carries file and line."""


class PackFormatError(FaasimError):
    """A partition-pack container is malformed; message carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(FaasimError):
    """Wire chunks violate the reassembly protocol (missing/duplicate/mismatched)."""


class RowTooLargeError(ProtocolError):
    """A single row's compressed encoding exceeds the channel message limit."""


class ChannelError(FaasimError):
    """A channel request was rejected (batch over limits, unknown queue, ...)."""


class ObjectNotFound(ChannelError):
    """GET on a key that does not exist."""


class WorkerTimeout(FaasimError):
    """A worker starved waiting for inbound data."""

    def __init__(self, worker: int, layer: int, missing: list[int], waited_s: float):
        super().__init__(
            f"worker {worker} timed out in layer {layer} after {waited_s:.1f}s; "
            f"missing sources {sorted(missing)}"
        )
        self.worker = worker
        self.layer = layer
        self.missing = sorted(missing)


class WorkerFailed(FaasimError):
    """A worker raised; wraps the original error with the worker id."""

    def __init__(self, worker: int, cause: BaseException):
        super().__init__(f"worker {worker} failed: {cause}")
        self.worker = worker
        self.cause = cause
