"""FaaS-style worker pool running distributed sparse inference.

Workers are concurrent threads, one per emulated function instance. A
coordinator invokes worker 0; every worker then invokes its children in a
b-ary tree before doing any compute. Per layer, a worker extracts and
publishes the activation rows its peers need, multiplies its own block to
overlap compute with communication, drains its channel until every expected
source has delivered, accumulates partial products in ascending source rank,
and applies the activation. A barrier and a reduce to worker 0 finish the
run; both ride the data channel on reserved layer tags, so their API calls
are metered like everything else.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from .channels import (
    ChannelLimits,
    ChaosConfig,
    Chunk,
    Meter,
    MeterSnapshot,
    ObjectStore,
    QueueBroker,
    decode_block,
    decode_chunks,
    encode_block,
    encode_rows,
)
from .costs import PricingConfig, default_pricing
from .errors import ContractViolation, ProtocolError, WorkerFailed, WorkerTimeout
from .pack import PartitionPack, pack_to_model
from .sparse import (
    SparseMatrix,
    accumulate,
    apply_activation,
    extract_row_range,
    extract_rows,
    merge_row_blocks,
    serial_inference,
    spmm,
)

__all__ = [
    "RunConfig",
    "RunResult",
    "WorkerContext",
    "worker_invoke_children",
    "pop_batches",
    "run_inference",
]

log = logging.getLogger(__name__)

_OBJECT_SCAN_INTERVAL_S = 0.002


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one distributed run."""

    workers: int
    channel: str = "queue"
    branching: int = 4
    memory_mb: int = 1024
    limits: ChannelLimits = field(default_factory=ChannelLimits)
    pricing: PricingConfig = field(default_factory=default_pricing)
    seed: int = 0
    poll_timeout_s: float = 120.0
    visibility_timeout_s: float = 30.0
    shards: int = 10
    chaos: ChaosConfig | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ContractViolation("need at least one worker")
        if self.channel not in ("serial", "queue", "object"):
            raise ContractViolation(f"unknown channel {self.channel!r}")
        if self.channel == "serial" and self.workers != 1:
            raise ContractViolation("the serial channel runs exactly one worker")
        if self.branching < 1:
            raise ContractViolation("branching factor must be >= 1")


@dataclass(frozen=True)
class RunResult:
    output: SparseMatrix
    meter: MeterSnapshot
    elapsed_s: dict[int, float]


@dataclass
class WorkerContext:
    """One worker's identity, partition pack and channel handles."""

    worker: int
    n_workers: int
    branching: int
    pack: PartitionPack
    meter: Meter
    limits: ChannelLimits
    invoked_at: float

    def __post_init__(self):
        if self.pack.worker != self.worker:
            raise ContractViolation(
                f"pack for worker {self.pack.worker} handed to worker {self.worker}"
            )


def worker_invoke_children(ctx: WorkerContext, spawn) -> list[int]:
    """Start this worker's children in the b-ary invocation tree."""
    children = [
        c
        for c in (ctx.worker * ctx.branching + j + 1 for j in range(ctx.branching))
        if c < ctx.n_workers
    ]
    for child in children:
        ctx.meter.add_invocation()
        spawn(child)
    return children


def pop_batches(chunks: list[Chunk], limits: ChannelLimits) -> list[list[Chunk]]:
    """Greedy packing of the send buffer into maximal publish batches."""
    batches: list[list[Chunk]] = []
    current: list[Chunk] = []
    current_bytes = 0
    for c in chunks:
        size = c.serialized_size
        if current and (
            len(current) == limits.max_batch_messages
            or current_bytes + size > limits.max_batch_bytes
        ):
            batches.append(current)
            current, current_bytes = [], 0
        current.append(c)
        current_bytes += size
    if current:
        batches.append(current)
    return batches


class _Aborted(Exception):
    """Internal: another worker failed, unwind quietly."""


class _RecvState:
    """Cross-layer receive memory: dedup keys plus stashed early messages."""

    def __init__(self):
        self.seen: set[tuple[int, int, int]] = set()
        self.stash: dict[int, dict[int, dict[int, Chunk]]] = {}


class _Run:
    """Shared state for one distributed run."""

    def __init__(self, config: RunConfig, packs: dict[int, PartitionPack], x0: SparseMatrix):
        self.config = config
        self.packs = packs
        self.meter = Meter()
        self.batch_width = x0.n_cols
        self.inputs = {
            m: extract_row_range(x0, pack.input_start, pack.input_len)
            for m, pack in packs.items()
        }
        self.broker: QueueBroker | None = None
        self.store: ObjectStore | None = None
        if config.channel == "queue":
            self.broker = QueueBroker(
                config.workers,
                config.limits,
                n_topics=config.shards,
                visibility_timeout_s=config.visibility_timeout_s,
                chaos=config.chaos,
            )
        elif config.channel == "object":
            self.store = ObjectStore(n_buckets=config.shards)
        self.failed = threading.Event()
        self._lock = threading.Lock()
        self.threads: dict[int, threading.Thread] = {}
        self.results: dict[int, SparseMatrix] = {}
        self.errors: dict[int, BaseException] = {}

    def spawn(self, worker: int) -> None:
        thread = threading.Thread(
            target=self._worker_main, args=(worker,), name=f"worker-{worker}", daemon=True
        )
        with self._lock:
            if worker in self.threads:
                raise ContractViolation(f"worker {worker} invoked twice")
            self.threads[worker] = thread
        thread.start()

    def _worker_main(self, worker: int) -> None:
        started = time.perf_counter()
        try:
            ctx = WorkerContext(
                worker=worker,
                n_workers=self.config.workers,
                branching=self.config.branching,
                pack=self.packs[worker],
                meter=self.meter,
                limits=self.config.limits,
                invoked_at=started,
            )
            worker_invoke_children(ctx, self.spawn)
            if self.config.channel == "queue":
                result = _run_worker_queue(self, ctx, self.inputs[worker])
            else:
                result = _run_worker_object(self, ctx, self.inputs[worker])
            if result is not None:
                self.results[worker] = result
        except _Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the coordinator
            with self._lock:
                self.errors[worker] = exc
            self.failed.set()
        finally:
            self.meter.add_runtime(worker, time.perf_counter() - started)

    def check_abort(self) -> None:
        if self.failed.is_set():
            raise _Aborted()


# ---------------------------------------------------------------------------
# queue algorithm
# ---------------------------------------------------------------------------


def _note_chunk(
    got: dict[int, dict[int, Chunk]], counts: dict[int, int], chunk: Chunk, layer: int
) -> None:
    if chunk.source not in got:
        raise ProtocolError(
            f"layer {layer} chunk from unexpected source {chunk.source}"
        )
    expected = counts.setdefault(chunk.source, chunk.count)
    if expected != chunk.count:
        raise ProtocolError(
            f"source {chunk.source} announced {chunk.count} chunks after {expected}"
        )
    got[chunk.source][chunk.index] = chunk


def _receive_layer_queue(
    run: _Run, ctx: WorkerContext, state: _RecvState, layer: int, expected: set[int]
) -> dict[int, SparseMatrix]:
    """Drain the worker's queue until every expected source delivered layer k.

    Messages for later layers are stashed, never dropped; duplicates are
    recognized by (source, layer, chunk index) and ignored.
    """
    got: dict[int, dict[int, Chunk]] = {src: {} for src in expected}
    counts: dict[int, int] = {}
    for src, by_index in state.stash.pop(layer, {}).items():
        for chunk in by_index.values():
            _note_chunk(got, counts, chunk, layer)

    def satisfied() -> bool:
        return all(src in counts and len(got[src]) == counts[src] for src in expected)

    deadline = time.monotonic() + run.config.poll_timeout_s
    while not satisfied():
        run.check_abort()
        if time.monotonic() > deadline:
            missing = [s for s in expected if s not in counts or len(got[s]) < counts[s]]
            raise WorkerTimeout(ctx.worker, layer, missing, run.config.poll_timeout_s)
        polled = run.broker.poll(ctx.worker, ctx.limits, ctx.meter)
        if not polled:
            continue
        for message in polled:
            chunk = message.chunk
            key = chunk.dedup_key
            if key in state.seen:
                continue
            state.seen.add(key)
            if chunk.layer == layer:
                _note_chunk(got, counts, chunk, layer)
            elif chunk.layer > layer:
                stash = state.stash.setdefault(chunk.layer, {}).setdefault(chunk.source, {})
                stash[chunk.index] = chunk
        run.broker.delete_batch(ctx.worker, [m.receipt for m in polled], ctx.meter)
    return {
        src: decode_chunks(list(got[src].values()), run.batch_width) for src in expected
    }


def _publish_chunks(run: _Run, ctx: WorkerContext, chunks: list[Chunk]) -> None:
    topic = ctx.worker % run.config.shards
    for batch in pop_batches(chunks, ctx.limits):
        run.broker.publish_batch(topic, batch, ctx.meter)


def _encode_transfer(
    ctx: WorkerContext, target: int, layer: int, block: SparseMatrix
) -> list[Chunk]:
    bodies = encode_rows(block, ctx.limits)
    return [Chunk(ctx.worker, target, layer, i, len(bodies), b) for i, b in enumerate(bodies)]


def _run_worker_queue(run: _Run, ctx: WorkerContext, x0_m: SparseMatrix) -> SparseMatrix | None:
    pack = ctx.pack
    state = _RecvState()
    x = x0_m
    for k in range(1, pack.n_layers + 1):
        w_k = pack.layers[k - 1]
        outgoing: list[Chunk] = []
        for target, rows in pack.send[k - 1]:
            # a runtime-empty slot still publishes one empty chunk so the
            # receiver can tick the source off
            outgoing.extend(_encode_transfer(ctx, target, k, extract_rows(x, rows)))
        _publish_chunks(run, ctx, outgoing)
        z = spmm(w_k, x)
        blocks = _receive_layer_queue(run, ctx, state, k, {src for src, _ in pack.recv[k - 1]})
        for src in sorted(blocks):
            z = accumulate(z, w_k, blocks[src])
        x = apply_activation(z, pack.activation)
    _barrier_queue(run, ctx, state)
    return _reduce_queue(run, ctx, state, x)


def _barrier_queue(run: _Run, ctx: WorkerContext, state: _RecvState) -> None:
    n = ctx.n_workers
    if n == 1:
        return
    token_layer = ctx.pack.n_layers + 1
    empty = SparseMatrix.empty(run.batch_width)
    if ctx.worker == 0:
        _receive_layer_queue(run, ctx, state, token_layer, set(range(1, n)))
        releases = []
        for m in range(1, n):
            releases.extend(_encode_transfer(ctx, m, token_layer, empty))
        _publish_chunks(run, ctx, releases)
    else:
        _publish_chunks(run, ctx, _encode_transfer(ctx, 0, token_layer, empty))
        _receive_layer_queue(run, ctx, state, token_layer, {0})


def _reduce_queue(
    run: _Run, ctx: WorkerContext, state: _RecvState, x: SparseMatrix
) -> SparseMatrix | None:
    n = ctx.n_workers
    if n == 1:
        return x
    reduce_layer = ctx.pack.n_layers + 2
    if ctx.worker == 0:
        blocks = _receive_layer_queue(run, ctx, state, reduce_layer, set(range(1, n)))
        return merge_row_blocks([x] + [blocks[src] for src in sorted(blocks)], run.batch_width)
    _publish_chunks(run, ctx, _encode_transfer(ctx, 0, reduce_layer, x))
    return None


# ---------------------------------------------------------------------------
# object-store algorithm
# ---------------------------------------------------------------------------


def _object_bucket(run: _Run, target: int) -> str:
    return f"bucket-{target % run.config.shards}"


def _object_key(layer: int, target: int, source: int, empty: bool) -> str:
    ext = "nul" if empty else "dat"
    return f"{layer}/{target}/{source}_{target}.{ext}"


def _put_block(run: _Run, ctx: WorkerContext, layer: int, target: int, block: SparseMatrix) -> None:
    bucket = _object_bucket(run, target)
    if block.n_rows == 0:
        run.store.put(bucket, _object_key(layer, target, ctx.worker, empty=True), b"", ctx.meter)
    else:
        run.store.put(
            bucket, _object_key(layer, target, ctx.worker, empty=False), encode_block(block), ctx.meter
        )


def _receive_layer_object(
    run: _Run, ctx: WorkerContext, layer: int, expected: set[int]
) -> dict[int, SparseMatrix]:
    """Scan own prefix until every source wrote; never GET a ``.nul`` key."""
    pending = set(expected)
    blocks: dict[int, SparseMatrix] = {}
    bucket = _object_bucket(run, ctx.worker)
    prefix = f"{layer}/{ctx.worker}/"
    deadline = time.monotonic() + run.config.poll_timeout_s
    while pending:
        run.check_abort()
        if time.monotonic() > deadline:
            raise WorkerTimeout(ctx.worker, layer, sorted(pending), run.config.poll_timeout_s)
        for key in run.store.list(bucket, prefix, ctx.meter):
            name = key[len(prefix):]
            stem, _, ext = name.rpartition(".")
            source = int(stem.split("_")[0])
            if source not in pending:
                continue  # .dat from an already-satisfied source: no redundant GET
            if ext == "nul":
                pending.discard(source)
                continue
            blocks[source] = decode_block(run.store.get(bucket, key, ctx.meter), run.batch_width)
            pending.discard(source)
        if pending:
            time.sleep(_OBJECT_SCAN_INTERVAL_S)
    return blocks


def _run_worker_object(run: _Run, ctx: WorkerContext, x0_m: SparseMatrix) -> SparseMatrix | None:
    pack = ctx.pack
    x = x0_m
    for k in range(1, pack.n_layers + 1):
        w_k = pack.layers[k - 1]
        for target, rows in pack.send[k - 1]:
            _put_block(run, ctx, k, target, extract_rows(x, rows))
        z = spmm(w_k, x)
        blocks = _receive_layer_object(run, ctx, k, {src for src, _ in pack.recv[k - 1]})
        for src in sorted(blocks):
            z = accumulate(z, w_k, blocks[src])
        x = apply_activation(z, pack.activation)
    _barrier_object(run, ctx)
    return _reduce_object(run, ctx, x)


def _barrier_object(run: _Run, ctx: WorkerContext) -> None:
    n = ctx.n_workers
    if n == 1:
        return
    token_layer = ctx.pack.n_layers + 1
    empty = SparseMatrix.empty(run.batch_width)
    if ctx.worker == 0:
        _receive_layer_object(run, ctx, token_layer, set(range(1, n)))
        for m in range(1, n):
            _put_block(run, ctx, token_layer, m, empty)
    else:
        _put_block(run, ctx, token_layer, 0, empty)
        _receive_layer_object(run, ctx, token_layer, {0})


def _reduce_object(run: _Run, ctx: WorkerContext, x: SparseMatrix) -> SparseMatrix | None:
    n = ctx.n_workers
    if n == 1:
        return x
    reduce_layer = ctx.pack.n_layers + 2
    if ctx.worker == 0:
        blocks = _receive_layer_object(run, ctx, reduce_layer, set(range(1, n)))
        return merge_row_blocks([x] + [blocks[s] for s in sorted(blocks)], run.batch_width)
    _put_block(run, ctx, reduce_layer, 0, x)
    return None


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _run_serial(config: RunConfig, pack: PartitionPack, x0: SparseMatrix) -> RunResult:
    model = pack_to_model(pack)
    meter = Meter()
    holder: dict[str, SparseMatrix] = {}
    errors: list[BaseException] = []

    def body():
        started = time.perf_counter()
        try:
            holder["out"] = serial_inference(model, x0)
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)
        finally:
            meter.add_runtime(0, time.perf_counter() - started)

    meter.add_invocation()
    thread = threading.Thread(target=body, name="worker-0", daemon=True)
    thread.start()
    thread.join()
    if errors:
        raise WorkerFailed(0, errors[0]) from errors[0]
    snapshot = meter.snapshot()
    return RunResult(holder["out"], snapshot, dict(snapshot.runtime_s))


def run_inference(
    config: RunConfig, packs: list[PartitionPack], x0: SparseMatrix
) -> RunResult:
    """Coordinator entry point: launch the tree, run, reduce, freeze the meter."""
    by_worker = {p.worker: p for p in packs}
    if sorted(by_worker) != list(range(config.workers)):
        raise ContractViolation(
            f"need packs for workers 0..{config.workers - 1}, got {sorted(by_worker)}"
        )
    for p in packs:
        if p.n_parts != config.workers:
            raise ContractViolation(
                f"pack of worker {p.worker} was cut for {p.n_parts} parts, not {config.workers}"
            )
    if config.channel == "serial":
        return _run_serial(config, by_worker[0], x0)

    run = _Run(config, by_worker, x0)
    log.debug("launching %d workers over %s", config.workers, config.channel)
    run.meter.add_invocation()  # the coordinator invokes worker 0
    run.spawn(0)
    deadline = time.monotonic() + config.poll_timeout_s + 30.0
    pending = {0}
    while pending:
        if time.monotonic() > deadline:
            raise WorkerFailed(min(pending), TimeoutError("worker threads did not finish"))
        with run._lock:
            threads = dict(run.threads)
        pending = set()
        for worker, thread in threads.items():
            thread.join(timeout=0.2)
            if thread.is_alive():
                pending.add(worker)

    real_errors = {m: e for m, e in run.errors.items() if not isinstance(e, _Aborted)}
    if real_errors:
        worker = min(real_errors)
        error = real_errors[worker]
        if isinstance(error, (WorkerTimeout, WorkerFailed)):
            raise error
        raise WorkerFailed(worker, error) from error
    output = run.results.get(0)
    if output is None:
        raise WorkerFailed(0, RuntimeError("worker 0 produced no output"))
    output.validate()
    snapshot = run.meter.snapshot()
    return RunResult(output, snapshot, dict(snapshot.runtime_s))
