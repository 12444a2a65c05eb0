"""In-process serverless communication backends with faithful wire semantics.

Two channels are provided: a pub-sub/queue broker (topics fan chunks out to
per-worker queues, long polling, visibility timeouts, at-least-once) and an
object store (atomic puts, gets, prefix lists). Every billable action is
recorded on a shared :class:`Meter`, both as running counters and as an
event log that cost reconciliation can re-price independently.
"""

from __future__ import annotations

import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChannelError,
    ContractViolation,
    ObjectNotFound,
    ProtocolError,
    RowTooLargeError,
)
from .sparse import SparseMatrix, merge_row_blocks

__all__ = [
    "ChannelLimits",
    "Chunk",
    "PolledMessage",
    "Meter",
    "MeterSnapshot",
    "MeterEvent",
    "ChaosConfig",
    "QueueBroker",
    "ObjectStore",
    "encode_block",
    "decode_block",
    "encode_rows",
    "decode_chunks",
]

HEADER_FORMAT = "<IIHHH"  # source, target, layer, chunk_index, chunk_count
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)

# raw-size heuristic for grouping rows into chunks before compressing once
_EST_BASE = 24
_EST_PER_ROW = 8
_EST_PER_NNZ = 8
_EST_COMPRESSION = 0.6


@dataclass(frozen=True)
class ChannelLimits:
    """Provider-style message and batching limits."""

    max_message_bytes: int = 262144
    max_batch_messages: int = 10
    max_batch_bytes: int = 262144
    billing_increment_bytes: int = 65536
    max_poll_messages: int = 10
    long_poll_wait_s: float = 1.0

    def __post_init__(self):
        numbers = (
            self.max_message_bytes,
            self.max_batch_messages,
            self.max_batch_bytes,
            self.billing_increment_bytes,
            self.max_poll_messages,
        )
        if any(v <= 0 for v in numbers) or self.long_poll_wait_s < 0:
            raise ContractViolation("channel limits must be positive")
        if self.billing_increment_bytes > self.max_message_bytes:
            raise ContractViolation("billing increment exceeds message limit")


@dataclass(frozen=True)
class Chunk:
    """One size-limited wire message carrying part of a row block."""

    source: int
    target: int
    layer: int
    index: int
    count: int
    body: bytes

    @property
    def serialized_size(self) -> int:
        return HEADER_SIZE + len(self.body)

    @property
    def dedup_key(self) -> tuple[int, int, int]:
        return (self.source, self.layer, self.index)

    def to_bytes(self) -> bytes:
        return struct.pack(HEADER_FORMAT, self.source, self.target, self.layer, self.index, self.count) + self.body

    @staticmethod
    def from_bytes(data: bytes) -> "Chunk":
        if len(data) < HEADER_SIZE:
            raise ProtocolError("chunk shorter than its header")
        source, target, layer, index, count = struct.unpack_from(HEADER_FORMAT, data)
        return Chunk(source, target, layer, index, count, data[HEADER_SIZE:])


# ---------------------------------------------------------------------------
# row-block codec
# ---------------------------------------------------------------------------


def _encode_raw(block: SparseMatrix) -> bytes:
    parts = [struct.pack("<I", block.n_rows)]
    for i in range(block.n_rows):
        cols, vals = block.row_slice(i)
        parts.append(struct.pack("<II", int(block.row_ids[i]), len(cols)))
        interleaved = np.empty(2 * len(cols), dtype=np.uint32)
        interleaved[0::2] = cols.astype(np.uint32)
        interleaved[1::2] = vals.astype(np.float32).view(np.uint32)
        parts.append(interleaved.tobytes())
    return b"".join(parts)


def encode_block(block: SparseMatrix) -> bytes:
    """zlib-compressed row-block encoding (the body of a chunk or object)."""
    return zlib.compress(_encode_raw(block))


def decode_block(data: bytes, n_cols: int) -> SparseMatrix:
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise ProtocolError(f"undecodable body: {exc}") from exc
    if len(raw) < 4:
        raise ProtocolError("body shorter than its row count")
    (n_rows,) = struct.unpack_from("<I", raw)
    pos = 4
    rows = []
    for _ in range(n_rows):
        if pos + 8 > len(raw):
            raise ProtocolError("truncated row header in body")
        gid, nnz = struct.unpack_from("<II", raw, pos)
        pos += 8
        need = 8 * nnz
        if pos + need > len(raw):
            raise ProtocolError("truncated row payload in body")
        interleaved = np.frombuffer(raw, dtype=np.uint32, count=2 * nnz, offset=pos)
        pos += need
        cols = interleaved[0::2].astype(np.int64)
        vals = interleaved[1::2].copy().view(np.float32)
        rows.append((int(gid), cols, vals))
    if pos != len(raw):
        raise ProtocolError("trailing bytes in body")
    return SparseMatrix.from_rows(n_cols, rows, dtype=np.float32)


def _estimated_row_bytes(block: SparseMatrix, i: int) -> float:
    nnz = int(block.row_ptr[i + 1] - block.row_ptr[i])
    return _EST_COMPRESSION * (_EST_PER_ROW + _EST_PER_NNZ * nnz)


def _rows_subset(block: SparseMatrix, indices: list[int]) -> SparseMatrix:
    rows = []
    for i in indices:
        cols, vals = block.row_slice(i)
        rows.append((int(block.row_ids[i]), cols, vals))
    return SparseMatrix.from_rows(block.n_cols, rows, dtype=np.float32)


def _encode_group(block: SparseMatrix, indices: list[int], body_limit: int) -> list[bytes]:
    body = encode_block(_rows_subset(block, indices))
    if len(body) <= body_limit:
        return [body]
    if len(indices) == 1:
        raise RowTooLargeError(
            f"row {int(block.row_ids[indices[0]])} compresses to {len(body)} bytes, "
            f"over the {body_limit}-byte body limit"
        )
    mid = len(indices) // 2
    return _encode_group(block, indices[:mid], body_limit) + _encode_group(
        block, indices[mid:], body_limit
    )


def encode_rows(block: SparseMatrix, limits: ChannelLimits) -> list[bytes]:
    """Split a row block into compressed chunk bodies under the message limit.

    Rows are grouped greedily by an estimated compressed size; each group is
    compressed once, and any group whose real size still exceeds the limit is
    bisected. An empty block encodes to exactly one zero-row body.
    """
    body_limit = limits.max_message_bytes - HEADER_SIZE
    if block.n_rows == 0:
        return [encode_block(block)]
    groups: list[list[int]] = []
    current: list[int] = []
    est = _EST_COMPRESSION * _EST_BASE
    for i in range(block.n_rows):
        row_est = _estimated_row_bytes(block, i)
        if current and est + row_est > body_limit:
            groups.append(current)
            current = [i]
            est = _EST_COMPRESSION * _EST_BASE + row_est
        else:
            current.append(i)
            est += row_est
    groups.append(current)
    bodies: list[bytes] = []
    for group in groups:
        bodies.extend(_encode_group(block, group, body_limit))
    return bodies


def decode_chunks(chunks: list[Chunk], n_cols: int) -> SparseMatrix:
    """Reassemble one (source, target, layer) transfer; inverse of encode."""
    if not chunks:
        raise ProtocolError("no chunks to decode")
    key = (chunks[0].source, chunks[0].target, chunks[0].layer, chunks[0].count)
    seen: dict[int, Chunk] = {}
    for c in chunks:
        if (c.source, c.target, c.layer, c.count) != key:
            raise ProtocolError(f"mixed chunk streams: {key} vs {(c.source, c.target, c.layer, c.count)}")
        if c.index in seen:
            raise ProtocolError(f"duplicate chunk index {c.index} from source {c.source}")
        if c.index >= c.count:
            raise ProtocolError(f"chunk index {c.index} out of range of count {c.count}")
        seen[c.index] = c
    if len(seen) != key[3]:
        missing = sorted(set(range(key[3])) - set(seen))
        raise ProtocolError(f"missing chunk indices {missing} from source {key[0]}")
    blocks = [decode_block(seen[i].body, n_cols) for i in range(key[3])]
    return merge_row_blocks(blocks, n_cols)


# ---------------------------------------------------------------------------
# metering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeterEvent:
    kind: str  # invoke | runtime_s | sns_publish | sns_bytes | sqs_call | s3_put | s3_get | s3_list
    units: float
    detail: str | None = None


@dataclass(frozen=True)
class MeterSnapshot:
    billed_publishes: int   # S
    publish_bytes: int      # Z
    queue_calls: int        # Q
    puts: int               # V
    gets: int               # R
    lists: int              # L
    invocations: int
    runtime_s: dict[int, float]
    events: tuple[MeterEvent, ...]

    @property
    def total_runtime_s(self) -> float:
        return sum(self.runtime_s.values())

    def to_json(self) -> dict:
        return {
            "S_billed_publishes": self.billed_publishes,
            "Z_publish_bytes": self.publish_bytes,
            "Q_queue_calls": self.queue_calls,
            "V_puts": self.puts,
            "R_gets": self.gets,
            "L_lists": self.lists,
            "invocations": self.invocations,
            "runtime_s": {str(k): v for k, v in sorted(self.runtime_s.items())},
        }


class Meter:
    """Thread-safe event counter for every billable action."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[MeterEvent] = []
        self.billed_publishes = 0
        self.publish_bytes = 0
        self.queue_calls = 0
        self.puts = 0
        self.gets = 0
        self.lists = 0
        self.invocations = 0
        self.runtime_s: dict[int, float] = {}

    def _emit(self, kind: str, units: float, detail: str | None = None):
        self._events.append(MeterEvent(kind, units, detail))

    def add_publish(self, billed_requests: int, nbytes: int) -> None:
        with self._lock:
            self.billed_publishes += billed_requests
            self.publish_bytes += nbytes
            self._emit("sns_publish", billed_requests)
            self._emit("sns_bytes", nbytes)

    def add_queue_call(self) -> None:
        with self._lock:
            self.queue_calls += 1
            self._emit("sqs_call", 1)

    def add_put(self, key: str) -> None:
        with self._lock:
            self.puts += 1
            self._emit("s3_put", 1, key)

    def add_get(self, key: str) -> None:
        with self._lock:
            self.gets += 1
            self._emit("s3_get", 1, key)

    def add_list(self, prefix: str) -> None:
        with self._lock:
            self.lists += 1
            self._emit("s3_list", 1, prefix)

    def add_invocation(self) -> None:
        with self._lock:
            self.invocations += 1
            self._emit("invoke", 1)

    def add_runtime(self, worker: int, seconds: float) -> None:
        with self._lock:
            self.runtime_s[worker] = self.runtime_s.get(worker, 0.0) + seconds
            self._emit("runtime_s", seconds, f"worker-{worker}")

    def snapshot(self) -> MeterSnapshot:
        with self._lock:
            return MeterSnapshot(
                billed_publishes=self.billed_publishes,
                publish_bytes=self.publish_bytes,
                queue_calls=self.queue_calls,
                puts=self.puts,
                gets=self.gets,
                lists=self.lists,
                invocations=self.invocations,
                runtime_s=dict(self.runtime_s),
                events=tuple(self._events),
            )


# ---------------------------------------------------------------------------
# pub-sub + queue backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChaosConfig:
    """Adversarial delivery schedule: delays, reordering, duplicates."""

    seed: int = 0
    duplicate_prob: float = 0.2
    max_delay_s: float = 0.004
    shuffle: bool = True


@dataclass(frozen=True)
class PolledMessage:
    receipt: int
    chunk: Chunk


@dataclass
class _QueueEntry:
    chunk: Chunk
    receipt: int
    available_at: float
    invisible_until: float = 0.0


class QueueBroker:
    """Topics fan chunks out to each target's dedicated queue.

    Delivery is at-least-once: polled messages become invisible and reappear
    after the visibility timeout unless deleted. Long polling blocks up to W
    seconds but returns as soon as anything arrives.
    """

    def __init__(
        self,
        n_workers: int,
        limits: ChannelLimits,
        n_topics: int = 10,
        visibility_timeout_s: float = 30.0,
        chaos: ChaosConfig | None = None,
        clock=time.monotonic,
    ):
        self.n_workers = n_workers
        self.limits = limits
        self.n_topics = n_topics
        self.visibility_timeout_s = visibility_timeout_s
        self._clock = clock
        self._cond = threading.Condition()
        self._queues: dict[int, list[_QueueEntry]] = {m: [] for m in range(n_workers)}
        self._next_receipt = 0
        self._chaos = chaos
        self._chaos_rng = np.random.default_rng(chaos.seed) if chaos else None

    def queue_size(self, worker: int) -> int:
        with self._cond:
            return len(self._queues[worker])

    def publish_batch(self, topic_id: int, batch: list[Chunk], meter: Meter) -> None:
        """Publish a batch; the filter policy routes each chunk to its target.

        Billing follows the provider rule: one publish request is billed per
        started 64 KB of the request payload, however many messages it holds.
        """
        if not 0 <= topic_id < self.n_topics:
            raise ChannelError(f"unknown topic {topic_id}")
        if not batch:
            raise ChannelError("empty publish batch")
        total = sum(c.serialized_size for c in batch)
        if len(batch) > self.limits.max_batch_messages or total > self.limits.max_batch_bytes:
            raise ChannelError(
                f"batch rejected: {len(batch)} messages / {total} bytes exceed "
                f"{self.limits.max_batch_messages} / {self.limits.max_batch_bytes}"
            )
        for c in batch:
            if c.serialized_size > self.limits.max_message_bytes:
                raise ChannelError(f"message of {c.serialized_size} bytes over the limit")
            if not 0 <= c.target < self.n_workers:
                raise ChannelError(f"no queue for target {c.target}")
        billed = -(-total // self.limits.billing_increment_bytes)  # ceil
        meter.add_publish(billed, total)
        now = self._clock()
        with self._cond:
            for c in batch:
                self._deliver_locked(c, now)
            self._cond.notify_all()

    def _deliver_locked(self, chunk: Chunk, now: float) -> None:
        copies = 1
        delay = 0.0
        if self._chaos is not None:
            if self._chaos_rng.random() < self._chaos.duplicate_prob:
                copies = 2
            delay = float(self._chaos_rng.random() * self._chaos.max_delay_s)
        for _ in range(copies):
            entry = _QueueEntry(chunk, self._next_receipt, now + delay)
            self._next_receipt += 1
            q = self._queues[chunk.target]
            if self._chaos is not None and self._chaos.shuffle and q:
                q.insert(int(self._chaos_rng.integers(0, len(q) + 1)), entry)
            else:
                q.append(entry)

    def _visible_locked(self, worker: int, now: float) -> list[_QueueEntry]:
        return [
            e
            for e in self._queues[worker]
            if e.available_at <= now and e.invisible_until <= now
        ]

    def poll(self, worker: int, limits: ChannelLimits, meter: Meter) -> list[PolledMessage]:
        """Poll the worker's queue; long polls wait up to W for arrivals."""
        if worker not in self._queues:
            raise ChannelError(f"unknown queue {worker}")
        meter.add_queue_call()
        deadline = self._clock() + limits.long_poll_wait_s
        with self._cond:
            while True:
                now = self._clock()
                visible = self._visible_locked(worker, now)
                if visible:
                    taken = visible[: limits.max_poll_messages]
                    for e in taken:
                        e.invisible_until = now + self.visibility_timeout_s
                    return [PolledMessage(e.receipt, e.chunk) for e in taken]
                remaining = deadline - now
                if remaining <= 0:
                    return []
                # wake early for delayed arrivals or visibility expiries
                horizon = remaining
                for e in self._queues[worker]:
                    wake = max(e.available_at, e.invisible_until) - now
                    if wake > 0:
                        horizon = min(horizon, wake)
                self._cond.wait(timeout=min(remaining, max(horizon, 0.001)))

    def delete_batch(self, worker: int, receipts: list[int], meter: Meter) -> None:
        """Deleted messages are never redelivered; unknown receipts are ignored."""
        if worker not in self._queues:
            raise ChannelError(f"unknown queue {worker}")
        meter.add_queue_call()
        wanted = set(receipts)
        with self._cond:
            self._queues[worker] = [e for e in self._queues[worker] if e.receipt not in wanted]


# ---------------------------------------------------------------------------
# object storage backend
# ---------------------------------------------------------------------------


class ObjectStore:
    """In-memory object storage: atomic puts, last-writer-wins overwrites."""

    def __init__(self, n_buckets: int = 10):
        self.n_buckets = n_buckets
        self._lock = threading.Lock()
        self._buckets: dict[str, dict[str, bytes]] = {
            f"bucket-{i}": {} for i in range(n_buckets)
        }

    def put(self, bucket: str, key: str, data: bytes, meter: Meter) -> None:
        meter.add_put(f"{bucket}/{key}")
        with self._lock:
            if bucket not in self._buckets:
                raise ChannelError(f"unknown bucket {bucket}")
            self._buckets[bucket][key] = bytes(data)

    def get(self, bucket: str, key: str, meter: Meter) -> bytes:
        meter.add_get(f"{bucket}/{key}")
        with self._lock:
            if bucket not in self._buckets:
                raise ChannelError(f"unknown bucket {bucket}")
            try:
                return self._buckets[bucket][key]
            except KeyError:
                raise ObjectNotFound(f"{bucket}/{key}") from None

    def list(self, bucket: str, prefix: str, meter: Meter) -> list[str]:
        meter.add_list(f"{bucket}/{prefix}")
        with self._lock:
            if bucket not in self._buckets:
                raise ChannelError(f"unknown bucket {bucket}")
            return sorted(k for k in self._buckets[bucket] if k.startswith(prefix))

    def all_keys(self) -> list[str]:
        """Every bucket-qualified key; test/inspection helper, not metered."""
        with self._lock:
            return sorted(
                f"{bucket}/{key}"
                for bucket, objects in self._buckets.items()
                for key in objects
            )
