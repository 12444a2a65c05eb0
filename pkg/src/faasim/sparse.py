"""Sparse row-block matrices and the serial inference kernels.

A :class:`SparseMatrix` is a compressed row-major block that remembers the
global identity of every stored row, so one object can represent any row
subset of a logically larger matrix. Absent rows are zero. Weights and
activations are stored as float32; pre-activation accumulators produced by
:func:`spmm`/:func:`accumulate` are float64 so that partial products can be
summed in any grouping without intermediate rounding, which is what makes
distributed runs bit-identical to the serial path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation

__all__ = [
    "SparseMatrix",
    "ActivationSpec",
    "ModelDef",
    "spmm",
    "extract_rows",
    "extract_row_range",
    "accumulate",
    "apply_activation",
    "serial_inference",
    "merge_row_blocks",
]


@dataclass(eq=False)
class SparseMatrix:
    """CSR row block with global row identities.

    Invariants (see :meth:`validate`): ``row_ptr`` is non-decreasing and
    brackets ``col_idx``/``values``; column indices are strictly increasing
    within each row; ``row_ids`` are strictly increasing globals.
    """

    n_cols: int
    row_ids: np.ndarray  # (n_rows,) int64, strictly increasing
    row_ptr: np.ndarray  # (n_rows + 1,) int64
    col_idx: np.ndarray  # (nnz,) int64
    values: np.ndarray   # (nnz,) float32 or float64

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    # -- constructors ------------------------------------------------------

    @staticmethod
    def empty(n_cols: int, dtype=np.float32) -> "SparseMatrix":
        return SparseMatrix(
            n_cols=n_cols,
            row_ids=np.empty(0, dtype=np.int64),
            row_ptr=np.zeros(1, dtype=np.int64),
            col_idx=np.empty(0, dtype=np.int64),
            values=np.empty(0, dtype=dtype),
        )

    @staticmethod
    def from_rows(
        n_cols: int,
        rows: Sequence[tuple[int, Sequence[int], Sequence[float]]],
        dtype=np.float32,
    ) -> "SparseMatrix":
        """Build from ``(global_row_id, cols, vals)`` triples (any row order)."""
        rows = sorted(rows, key=lambda r: r[0])
        row_ids = np.array([r[0] for r in rows], dtype=np.int64)
        row_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
        cols_parts: list[np.ndarray] = []
        vals_parts: list[np.ndarray] = []
        for i, (_, cols, vals) in enumerate(rows):
            c = np.asarray(cols, dtype=np.int64)
            v = np.asarray(vals, dtype=dtype)
            if len(c) != len(v):
                raise ContractViolation("cols and vals length mismatch")
            order = np.argsort(c, kind="stable")
            cols_parts.append(c[order])
            vals_parts.append(v[order])
            row_ptr[i + 1] = row_ptr[i] + len(c)
        col_idx = np.concatenate(cols_parts) if cols_parts else np.empty(0, np.int64)
        values = np.concatenate(vals_parts) if vals_parts else np.empty(0, dtype)
        m = SparseMatrix(n_cols, row_ids, row_ptr, col_idx, values.astype(dtype))
        m.validate()
        return m

    @staticmethod
    def from_dense(dense: np.ndarray, row_ids: np.ndarray | None = None, dtype=np.float32) -> "SparseMatrix":
        """Dense (n, n_cols) array to sparse; zero rows are dropped."""
        dense = np.asarray(dense)
        n, n_cols = dense.shape
        ids = np.arange(n, dtype=np.int64) if row_ids is None else np.asarray(row_ids, np.int64)
        rows = []
        for i in range(n):
            cols = np.nonzero(dense[i])[0]
            if len(cols):
                rows.append((int(ids[i]), cols, dense[i][cols]))
        return SparseMatrix.from_rows(n_cols, rows, dtype=dtype)

    # -- accessors ---------------------------------------------------------

    def row_slice(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Columns and values of the i-th stored row."""
        s, e = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[s:e], self.values[s:e]

    def to_dense(self, n_global_rows: int) -> np.ndarray:
        out = np.zeros((n_global_rows, self.n_cols), dtype=np.float64)
        for i, gid in enumerate(self.row_ids):
            cols, vals = self.row_slice(i)
            out[gid, cols] = vals.astype(np.float64)
        return out

    def validate(self, require_nonzero: bool = False) -> None:
        """Raise ContractViolation if structural invariants are broken."""
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != len(self.col_idx):
            raise ContractViolation("row_ptr does not bracket col_idx")
        if len(self.row_ptr) != self.n_rows + 1:
            raise ContractViolation("row_ptr length != n_rows + 1")
        if len(self.values) != len(self.col_idx):
            raise ContractViolation("values/col_idx length mismatch")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ContractViolation("row_ptr not non-decreasing")
        if self.n_rows and np.any(np.diff(self.row_ids) <= 0):
            raise ContractViolation("row_ids not strictly increasing")
        if self.n_rows and (self.row_ids[0] < 0):
            raise ContractViolation("negative row id")
        for i in range(self.n_rows):
            cols, _ = self.row_slice(i)
            if len(cols) and (cols[0] < 0 or cols[-1] >= self.n_cols):
                raise ContractViolation(f"column index out of range in row {self.row_ids[i]}")
            if np.any(np.diff(cols) <= 0):
                raise ContractViolation(f"columns not strictly increasing in row {self.row_ids[i]}")
        if require_nonzero and len(self.values) and np.any(self.values == 0):
            raise ContractViolation("explicitly stored zero value")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.n_cols == other.n_cols
            and np.array_equal(self.row_ids, other.row_ids)
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:  # keep test failure output readable
        return f"SparseMatrix(n_rows={self.n_rows}, n_cols={self.n_cols}, nnz={self.nnz})"


@dataclass(frozen=True)
class ActivationSpec:
    """Uniform per-layer bias plus a ReLU-then-ceiling activation.

    Both parameters are snapped to float32 precision at construction so that
    in-memory models and models round-tripped through pack files behave
    identically.
    """

    bias: float = -0.30
    y_max: float = 32.0

    def __post_init__(self):
        object.__setattr__(self, "bias", float(np.float32(self.bias)))
        object.__setattr__(self, "y_max", float(np.float32(self.y_max)))
        if not self.y_max > 0:
            raise ContractViolation("y_max must be positive")


@dataclass
class ModelDef:
    """A stack of square sparse layers plus the activation that follows each."""

    n_layers: int
    n_neurons: int
    layers: list[SparseMatrix]
    activation: ActivationSpec

    def validate(self) -> None:
        if len(self.layers) != self.n_layers:
            raise ContractViolation("layer count mismatch")
        for k, w in enumerate(self.layers):
            if w.n_cols != self.n_neurons:
                raise ContractViolation(f"layer {k} has n_cols {w.n_cols} != {self.n_neurons}")
            if w.n_rows and int(w.row_ids[-1]) >= self.n_neurons:
                raise ContractViolation(f"layer {k} row id out of range")
            w.validate()


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _check_operand_rows(w: SparseMatrix, x: SparseMatrix) -> None:
    if x.n_rows and int(x.row_ids[-1]) >= w.n_cols:
        raise ContractViolation(
            f"operand row id {int(x.row_ids[-1])} exceeds left matrix width {w.n_cols}"
        )


def _match_operand(w: SparseMatrix, x: SparseMatrix) -> tuple[np.ndarray, np.ndarray]:
    """For every W nonzero, the matching X row position and a validity mask."""
    pos = np.searchsorted(x.row_ids, w.col_idx)
    if x.n_rows == 0 or w.nnz == 0:
        return pos, np.zeros(w.nnz, dtype=bool)
    clipped = np.minimum(pos, x.n_rows - 1)
    valid = (pos < x.n_rows) & (x.row_ids[clipped] == w.col_idx)
    return pos, valid


def _assemble(
    n_cols: int,
    ids: list[int],
    cols_parts: list[np.ndarray],
    vals_parts: list[np.ndarray],
    dtype,
) -> SparseMatrix:
    """Direct CSR assembly for kernel outputs whose rows are already ordered."""
    row_ids = np.asarray(ids, dtype=np.int64)
    row_ptr = np.zeros(len(ids) + 1, dtype=np.int64)
    if ids:
        np.cumsum([len(c) for c in cols_parts], out=row_ptr[1:])
        col_idx = np.concatenate(cols_parts)
        values = np.concatenate(vals_parts).astype(dtype, copy=False)
    else:
        col_idx = np.empty(0, dtype=np.int64)
        values = np.empty(0, dtype=dtype)
    return SparseMatrix(n_cols, row_ids, row_ptr, col_idx, values)


def spmm(w: SparseMatrix, x: SparseMatrix) -> SparseMatrix:
    """Sparse product ``Z = W @ X`` keeping W's global row identities.

    Per output row the products are accumulated in ascending column order of
    W, each product exact (float32 x float32 widened to float64). Output rows
    with no structural overlap are dropped; entries that cancel to exactly
    zero at runtime are kept (they disappear at activation time). The result
    carries float64 values.
    """
    _check_operand_rows(w, x)
    pos, valid = _match_operand(w, x)
    buf = np.zeros(x.n_cols, dtype=np.float64)
    touched = np.zeros(x.n_cols, dtype=bool)
    ids: list[int] = []
    cols_parts: list[np.ndarray] = []
    vals_parts: list[np.ndarray] = []
    for i in range(w.n_rows):
        s, e = int(w.row_ptr[i]), int(w.row_ptr[i + 1])
        hits = np.nonzero(valid[s:e])[0]
        if len(hits) == 0:
            continue
        for t in hits:
            p = int(pos[s + t])
            cs, ce = int(x.row_ptr[p]), int(x.row_ptr[p + 1])
            cols = x.col_idx[cs:ce]
            buf[cols] += np.float64(w.values[s + t]) * x.values[cs:ce].astype(np.float64)
            touched[cols] = True
        out_cols = np.nonzero(touched)[0]
        ids.append(int(w.row_ids[i]))
        cols_parts.append(out_cols)
        vals_parts.append(buf[out_cols].copy())
        buf[out_cols] = 0.0
        touched[out_cols] = False
    return _assemble(x.n_cols, ids, cols_parts, vals_parts, np.float64)


def _take_rows(x: SparseMatrix, positions: np.ndarray) -> SparseMatrix:
    """Sub-block from ascending stored-row positions, reusing array slices."""
    ids, cols_parts, vals_parts = [], [], []
    for p in positions:
        s, e = int(x.row_ptr[p]), int(x.row_ptr[p + 1])
        ids.append(int(x.row_ids[p]))
        cols_parts.append(x.col_idx[s:e])
        vals_parts.append(x.values[s:e])
    return _assemble(x.n_cols, ids, cols_parts, vals_parts, x.values.dtype)


def extract_rows(x: SparseMatrix, rows: Iterable[int]) -> SparseMatrix:
    """Sub-block of the requested global rows that are present in X."""
    wanted = np.asarray(rows if isinstance(rows, np.ndarray) else list(rows), dtype=np.int64)
    if len(wanted) == 0 or x.n_rows == 0:
        return SparseMatrix.empty(x.n_cols, dtype=x.values.dtype)
    pos = np.searchsorted(x.row_ids, wanted)
    mask = (pos < x.n_rows)
    mask[mask] &= x.row_ids[pos[mask]] == wanted[mask]
    return _take_rows(x, pos[mask])


def extract_row_range(x: SparseMatrix, start: int, length: int) -> SparseMatrix:
    """Sub-block of global rows in ``[start, start + length)``."""
    lo = int(np.searchsorted(x.row_ids, start))
    hi = int(np.searchsorted(x.row_ids, start + length))
    return _take_rows(x, np.arange(lo, hi))


def accumulate(z: SparseMatrix, w_m: SparseMatrix, x_hat: SparseMatrix) -> SparseMatrix:
    """Return ``Z + W_m @ X_hat`` for a row block of the same worker.

    Z's rows must be a subset of W_m's rows (absent rows are zero partials).
    Commutative in exact arithmetic; callers accumulate in ascending source
    rank so results are reproducible even when float64 sums round.
    """
    if x_hat.n_rows == 0:
        return z
    _check_operand_rows(w_m, x_hat)
    if z.n_rows:
        if z.n_cols != x_hat.n_cols:
            raise ContractViolation("accumulator and operand batch widths differ")
        inside = np.searchsorted(w_m.row_ids, z.row_ids)
        ok = (inside < w_m.n_rows)
        ok[ok] &= w_m.row_ids[inside[ok]] == z.row_ids[ok]
        if not np.all(ok):
            raise ContractViolation("accumulator rows are not a subset of the worker's row block")

    pos, valid = _match_operand(w_m, x_hat)
    z_next = 0  # z rows and w_m rows are both ascending; walk them together
    buf = np.zeros(x_hat.n_cols, dtype=np.float64)
    touched = np.zeros(x_hat.n_cols, dtype=bool)
    ids: list[int] = []
    cols_parts: list[np.ndarray] = []
    vals_parts: list[np.ndarray] = []
    for i in range(w_m.n_rows):
        gid = int(w_m.row_ids[i])
        zi = -1
        if z_next < z.n_rows and int(z.row_ids[z_next]) == gid:
            zi = z_next
            z_next += 1
        s, e = int(w_m.row_ptr[i]), int(w_m.row_ptr[i + 1])
        hits = np.nonzero(valid[s:e])[0]
        if len(hits) == 0:
            if zi >= 0:  # untouched partial passes through unchanged
                cols, vals = z.row_slice(zi)
                ids.append(gid)
                cols_parts.append(cols)
                vals_parts.append(vals.astype(np.float64, copy=False))
            continue
        if zi >= 0:
            cols, vals = z.row_slice(zi)
            buf[cols] = vals.astype(np.float64)
            touched[cols] = True
        for t in hits:
            p = int(pos[s + t])
            cs, ce = int(x_hat.row_ptr[p]), int(x_hat.row_ptr[p + 1])
            cols = x_hat.col_idx[cs:ce]
            buf[cols] += np.float64(w_m.values[s + t]) * x_hat.values[cs:ce].astype(np.float64)
            touched[cols] = True
        out_cols = np.nonzero(touched)[0]
        ids.append(gid)
        cols_parts.append(out_cols)
        vals_parts.append(buf[out_cols].copy())
        buf[out_cols] = 0.0
        touched[out_cols] = False
    return _assemble(x_hat.n_cols, ids, cols_parts, vals_parts, np.float64)


def apply_activation(z: SparseMatrix, spec: ActivationSpec) -> SparseMatrix:
    """Bias + ReLU + ceiling, rounding to float32 once per entry.

    Entries that end up exactly zero are removed, as are rows that become
    empty, so presence and nonzero-ness coincide afterwards.
    """
    bias = np.float64(spec.bias)
    y_max = np.float64(spec.y_max)
    shifted = z.values.astype(np.float64) + bias
    clamped = np.minimum(np.maximum(shifted, 0.0), y_max).astype(np.float32)
    keep = clamped != np.float32(0.0)
    if z.n_rows == 0:
        return SparseMatrix.empty(z.n_cols, dtype=np.float32)
    kept_per_row = np.add.reduceat(keep, z.row_ptr[:-1])
    kept_per_row[np.diff(z.row_ptr) == 0] = 0  # reduceat quirk on empty rows
    row_mask = kept_per_row > 0
    row_ptr = np.zeros(int(row_mask.sum()) + 1, dtype=np.int64)
    np.cumsum(kept_per_row[row_mask], out=row_ptr[1:])
    return SparseMatrix(
        n_cols=z.n_cols,
        row_ids=z.row_ids[row_mask],
        row_ptr=row_ptr,
        col_idx=z.col_idx[keep],
        values=clamped[keep],
    )


def serial_inference(model: ModelDef, x0: SparseMatrix) -> SparseMatrix:
    """Run all layers in-process; the ground truth for every distributed run."""
    if x0.n_rows and int(x0.row_ids[-1]) >= model.n_neurons:
        raise ContractViolation("input rows exceed model width")
    x = x0
    for w in model.layers:
        x = apply_activation(spmm(w, x), model.activation)
    return x


def merge_row_blocks(blocks: Iterable[SparseMatrix], n_cols: int) -> SparseMatrix:
    """Union of disjoint row blocks, sorted by global row id."""
    rows: list[tuple[int, np.ndarray, np.ndarray]] = []
    seen: set[int] = set()
    dtype = np.float32
    for b in blocks:
        dtype = b.values.dtype if b.nnz else dtype
        for i in range(b.n_rows):
            gid = int(b.row_ids[i])
            if gid in seen:
                raise ContractViolation(f"row {gid} present in more than one block")
            seen.add(gid)
            cols, vals = b.row_slice(i)
            rows.append((gid, cols, vals))
    rows.sort(key=lambda r: r[0])
    return _assemble(
        n_cols,
        [r[0] for r in rows],
        [r[1] for r in rows],
        [r[2] for r in rows],
        dtype,
    )
