"""Synthetic model/input generation and TSV model ingestion.

The generator produces banded pseudo-random layers: each row's nonzero
columns are drawn from a window around the diagonal. Pruned DNN benchmarks
have this kind of structured sparsity, and it is what gives a locality-aware
partitioner something to exploit; fully uniform columns would make every
layer an expander that no partitioner can cut well.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, TsvParseError
from .sparse import ActivationSpec, ModelDef, SparseMatrix

__all__ = [
    "GenSpec",
    "generate_model",
    "generate_inputs",
    "load_model_tsv",
    "load_matrix_tsv",
    "save_matrix_tsv",
    "nonzero_row_indices",
]

# weights come from a small dyadic set; products with float32 activations are
# exact in float64, which keeps distributed accumulation order-insensitive
WEIGHT_CHOICES = np.array([-0.5, -0.25, -0.125, 0.125, 0.25, 0.5, 1.0], dtype=np.float32)

_LAYER_STREAM = 0
_INPUT_STREAM = 1


@dataclass(frozen=True)
class GenSpec:
    """Parameters for the synthetic model and input batch."""

    neurons: int
    layers: int
    nnz_per_row: int
    batch: int = 1
    input_density: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.nnz_per_row > self.neurons:
            raise ContractViolation("nnz_per_row exceeds neuron count")
        if self.nnz_per_row < 1 or self.neurons < 1 or self.layers < 1:
            raise ContractViolation("neurons, layers and nnz_per_row must be positive")
        if self.batch < 1:
            raise ContractViolation("batch must be >= 1")
        if not 0.0 <= self.input_density <= 1.0:
            raise ContractViolation("input_density must lie in [0, 1]")


def _column_window(spec: GenSpec) -> int:
    return min(spec.neurons, max(2 * spec.nnz_per_row, spec.neurons // 8))


def generate_model(spec: GenSpec, activation: ActivationSpec | None = None) -> ModelDef:
    """Deterministic banded sparse model: same spec, same bytes."""
    n = spec.neurons
    window = _column_window(spec)
    layers = []
    for k in range(spec.layers):
        rng = np.random.default_rng([spec.seed, _LAYER_STREAM, k])
        rows = []
        for i in range(n):
            offsets = rng.choice(window, size=spec.nnz_per_row, replace=False)
            cols = (i - window // 2 + offsets) % n
            vals = rng.choice(WEIGHT_CHOICES, size=spec.nnz_per_row)
            order = np.argsort(cols, kind="stable")
            rows.append((i, cols[order], vals[order]))
        layers.append(SparseMatrix.from_rows(n, rows))
    model = ModelDef(spec.layers, n, layers, activation or ActivationSpec())
    model.validate()
    return model


def generate_inputs(spec: GenSpec) -> SparseMatrix:
    """Bernoulli(input_density) batch of ones, neurons x batch."""
    rng = np.random.default_rng([spec.seed, _INPUT_STREAM])
    mask = rng.random((spec.neurons, spec.batch)) < spec.input_density
    rows = []
    for i in range(spec.neurons):
        cols = np.nonzero(mask[i])[0]
        if len(cols):
            rows.append((i, cols, np.ones(len(cols), dtype=np.float32)))
    return SparseMatrix.from_rows(spec.batch, rows)


def _parse_triples(path: str | os.PathLike, n_rows: int, n_cols: int) -> SparseMatrix:
    """Whitespace-separated 1-based ``row col value`` triples; duplicates summed."""
    cells: dict[tuple[int, int], float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise TsvParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise TsvParseError(f"{path}:{lineno}: {exc}") from exc
            if not (1 <= r <= n_rows and 1 <= c <= n_cols):
                raise ContractViolation(
                    f"{path}:{lineno}: index ({r}, {c}) out of range for {n_rows}x{n_cols}"
                )
            key = (r - 1, c - 1)
            cells[key] = cells.get(key, 0.0) + v
    by_row: dict[int, list[tuple[int, float]]] = {}
    for (r, c), v in cells.items():
        by_row.setdefault(r, []).append((c, v))
    rows = []
    for r in sorted(by_row):
        pairs = sorted(by_row[r])
        rows.append((r, [c for c, _ in pairs], [v for _, v in pairs]))
    return SparseMatrix.from_rows(n_cols, rows)


def load_model_tsv(
    layer_paths: Sequence[str | os.PathLike],
    n_neurons: int,
    activation: ActivationSpec,
) -> ModelDef:
    """One TSV file per layer, in layer order."""
    layers = [_parse_triples(p, n_neurons, n_neurons) for p in layer_paths]
    model = ModelDef(len(layers), n_neurons, layers, activation)
    model.validate()
    return model


def load_matrix_tsv(path: str | os.PathLike, n_rows: int, n_cols: int) -> SparseMatrix:
    return _parse_triples(path, n_rows, n_cols)


def save_matrix_tsv(x: SparseMatrix, path: str | os.PathLike) -> None:
    """1-based triples, LF-terminated; float repr round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(x.n_rows):
            gid = int(x.row_ids[i])
            cols, vals = x.row_slice(i)
            for c, v in zip(cols, vals):
                fh.write(f"{gid + 1}\t{int(c) + 1}\t{float(v)!r}\n")


def nonzero_row_indices(x: SparseMatrix) -> list[int]:
    """Global ids of present rows; the categories used for ground-truth checks."""
    return [int(g) for g in x.row_ids]
