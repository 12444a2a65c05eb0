"""Partition-pack container: one worker's weights, maps and input ownership.

Binary layout (little-endian): magic ``FSDP``, u16 version, u32 worker id,
u32 part count, u32 layer count, u32 neuron count, f32 bias, f32 ceiling;
then one section per layer (matrix arrays + send map + receive map); then
the u32 (start, len) range of phase-0 input rows the worker owns.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, PackFormatError
from .partition import CommMaps, PartitionPlan, derive_comm_maps
from .sparse import ActivationSpec, ModelDef, SparseMatrix, extract_rows

__all__ = [
    "PartitionPack",
    "build_packs",
    "write_pack",
    "read_pack",
    "pack_filename",
    "model_to_pack",
    "pack_to_model",
]

MAGIC = b"FSDP"
VERSION = 1

MapEntries = list[tuple[int, np.ndarray]]


@dataclass
class PartitionPack:
    """Everything worker ``worker`` needs to run inference."""

    worker: int
    n_parts: int
    n_layers: int
    n_neurons: int
    activation: ActivationSpec
    layers: list[SparseMatrix]
    send: list[MapEntries]  # per layer: [(target, rows)...], targets ascending
    recv: list[MapEntries]
    input_start: int
    input_len: int

    def validate(self) -> None:
        if len(self.layers) != self.n_layers:
            raise ContractViolation("pack layer count mismatch")
        if len(self.send) != self.n_layers or len(self.recv) != self.n_layers:
            raise ContractViolation("pack map count mismatch")
        for w in self.layers:
            w.validate()
            if w.n_cols != self.n_neurons:
                raise ContractViolation("pack layer width mismatch")


def build_packs(plan: PartitionPlan, model: ModelDef, maps: CommMaps | None = None) -> list[PartitionPack]:
    """Slice a model into per-worker packs according to a plan."""
    maps = maps or derive_comm_maps(plan, model)
    packs = []
    for m in range(plan.n_parts):
        layers = []
        for k, w in enumerate(model.layers):
            mine = np.nonzero(plan.assignment[k][w.row_ids] == m)[0]
            layers.append(extract_rows(w, [int(w.row_ids[i]) for i in mine]))
        start, length = plan.input_ranges[m]
        packs.append(
            PartitionPack(
                worker=m,
                n_parts=plan.n_parts,
                n_layers=model.n_layers,
                n_neurons=model.n_neurons,
                activation=model.activation,
                layers=layers,
                send=[list(entries) for entries in maps.send[m]],
                recv=[list(entries) for entries in maps.recv[m]],
                input_start=start,
                input_len=length,
            )
        )
    return packs


def pack_filename(worker: int, n_parts: int) -> str:
    return f"pack_{worker}_of_{n_parts}.fsdp"


def model_to_pack(model: ModelDef) -> PartitionPack:
    """The unpartitioned (P=1) pack used to cache whole models on disk."""
    from .partition import partition_model

    return build_packs(partition_model(model, 1), model)[0]


def pack_to_model(pack: PartitionPack) -> ModelDef:
    if pack.n_parts != 1:
        raise ContractViolation("only a P=1 pack holds a whole model")
    model = ModelDef(pack.n_layers, pack.n_neurons, pack.layers, pack.activation)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u16(self, v: int):
        self.buf.write(struct.pack("<H", v))

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v: int):
        self.buf.write(struct.pack("<Q", v))

    def f32(self, v: float):
        self.buf.write(struct.pack("<f", v))

    def array(self, arr: np.ndarray, dtype: str):
        self.buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise PackFormatError(
                f"truncated pack: wanted {n} bytes, {len(self.data) - self.pos} left",
                offset=self.pos,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * item), dtype=dtype).copy()


def _write_map(w: _Writer, entries: MapEntries) -> None:
    w.u32(len(entries))
    for target, rows in entries:
        w.u32(target)
        w.u32(len(rows))
        w.array(np.asarray(rows), "<u4")


def _read_map(r: _Reader) -> MapEntries:
    count = r.u32()
    entries: MapEntries = []
    for _ in range(count):
        target = r.u32()
        n_rows = r.u32()
        rows = r.array(n_rows, "<u4").astype(np.int64)
        entries.append((target, rows))
    return entries


def write_pack(pack: PartitionPack, sink: str | os.PathLike | io.IOBase) -> None:
    pack.validate()
    w = _Writer()
    w.buf.write(MAGIC)
    w.u16(VERSION)
    w.u32(pack.worker)
    w.u32(pack.n_parts)
    w.u32(pack.n_layers)
    w.u32(pack.n_neurons)
    w.f32(pack.activation.bias)
    w.f32(pack.activation.y_max)
    for k in range(pack.n_layers):
        layer = pack.layers[k]
        w.u32(layer.n_rows)
        w.u64(layer.nnz)
        w.array(layer.row_ids, "<u4")
        w.array(layer.row_ptr, "<u8")
        w.array(layer.col_idx, "<u4")
        w.array(layer.values, "<f4")
        _write_map(w, pack.send[k])
        _write_map(w, pack.recv[k])
    w.u32(pack.input_start)
    w.u32(pack.input_len)
    data = w.buf.getvalue()
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)


def read_pack(source: str | os.PathLike | io.IOBase | bytes) -> PartitionPack:
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise PackFormatError(f"bad magic {magic!r}", offset=0)
    version = r.u16()
    if version != VERSION:
        raise PackFormatError(f"unsupported version {version}", offset=4)
    worker = r.u32()
    n_parts = r.u32()
    n_layers = r.u32()
    n_neurons = r.u32()
    bias = r.f32()
    y_max = r.f32()
    layers, send, recv = [], [], []
    for k in range(n_layers):
        section_at = r.pos
        n_rows = r.u32()
        nnz = r.u64()
        row_ids = r.array(n_rows, "<u4").astype(np.int64)
        row_ptr = r.array(n_rows + 1, "<u8").astype(np.int64)
        col_idx = r.array(nnz, "<u4").astype(np.int64)
        values = r.array(nnz, "<f4")
        if n_rows and row_ptr[-1] != nnz:
            raise PackFormatError(
                f"layer {k} row_ptr/nnz mismatch ({row_ptr[-1]} != {nnz})", offset=section_at
            )
        layer = SparseMatrix(n_neurons, row_ids, row_ptr, col_idx, values)
        try:
            layer.validate()
        except ContractViolation as exc:
            raise PackFormatError(f"layer {k} invalid: {exc}", offset=section_at) from exc
        layers.append(layer)
        send.append(_read_map(r))
        recv.append(_read_map(r))
    input_start = r.u32()
    input_len = r.u32()
    if r.pos != len(data):
        raise PackFormatError(f"{len(data) - r.pos} trailing bytes", offset=r.pos)
    pack = PartitionPack(
        worker=worker,
        n_parts=n_parts,
        n_layers=n_layers,
        n_neurons=n_neurons,
        activation=ActivationSpec(bias=bias, y_max=y_max),
        layers=layers,
        send=send,
        recv=recv,
        input_start=input_start,
        input_len=input_len,
    )
    pack.validate()
    return pack
