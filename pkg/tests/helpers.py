"""Shared independent oracles for partitioner and runtime tests."""

from itertools import product

import numpy as np

from faasim.partition import PhaseHypergraph, connectivity_cut


def exhaustive_best_cut(h: PhaseHypergraph, n_parts: int, epsilon: float) -> int | None:
    """Minimum connectivity cut over every balanced assignment, by enumeration.

    Returns None when no assignment satisfies the balance cap. Only usable for
    tiny instances (cost is n_parts ** n_vertices).
    """
    cap = (1.0 + epsilon) * float(h.vertex_weight.sum()) / n_parts
    best = None
    for combo in product(range(n_parts), repeat=h.n_vertices):
        assignment = np.asarray(combo, dtype=np.int64)
        loads = np.bincount(assignment, weights=h.vertex_weight, minlength=n_parts)
        if np.max(loads) > cap + 1e-9:
            continue
        cut = connectivity_cut(h, assignment, n_parts)
        if best is None or cut < best:
            best = cut
    return best


def random_phase_instance(n: int, seed: int, n_parts: int = 2, density: float = 0.4):
    """Small random layer + random previous ownership, as a phase hypergraph."""
    from faasim.partition import build_phase_hypergraph
    from faasim.sparse import SparseMatrix

    rng = np.random.default_rng(seed)
    dense = (rng.random((n, n)) < density).astype(np.float32)
    # keep every row non-empty so vertex weights are comparable
    for i in range(n):
        if not dense[i].any():
            dense[i, rng.integers(0, n)] = 1.0
    w = SparseMatrix.from_dense(dense)
    prev = rng.integers(0, n_parts, size=n).astype(np.int64)
    return build_phase_hypergraph(w, prev)


def block_diagonal_instance(block: int, n_blocks: int = 2):
    """Separable instance: dense blocks on the diagonal, ownership by block."""
    from faasim.partition import build_phase_hypergraph
    from faasim.sparse import SparseMatrix

    n = block * n_blocks
    dense = np.zeros((n, n), dtype=np.float32)
    for b in range(n_blocks):
        dense[b * block : (b + 1) * block, b * block : (b + 1) * block] = 1.0
    w = SparseMatrix.from_dense(dense)
    prev = np.repeat(np.arange(n_blocks, dtype=np.int64), block)
    return build_phase_hypergraph(w, prev)
