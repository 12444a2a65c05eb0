"""Multi-phase fixed-vertex hypergraph partitioning and communication maps.

Each layer k is partitioned in its own phase. The phase hypergraph has one
free vertex per weight-matrix row (weight = row nnz) and, per column j, one
net connecting the rows that read column j plus a fixed vertex pinned to the
part that produced row j of the previous activation. The objective is the
connectivity-minus-one cut sum((lambda(n) - 1)), which counts exactly the
activation rows that must cross worker boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .sparse import ModelDef, SparseMatrix

__all__ = [
    "PhaseHypergraph",
    "PartitionPlan",
    "CommMaps",
    "build_phase_hypergraph",
    "partition_phase",
    "connectivity_cut",
    "contiguous_input_ownership",
    "partition_model",
    "derive_comm_maps",
    "cut_metrics",
]


@dataclass
class PhaseHypergraph:
    """One partitioning phase: free row-vertices, column nets, fixed pins."""

    n_vertices: int
    vertex_weight: np.ndarray          # (n_vertices,) int64 row nnz
    net_pins: list[np.ndarray]         # per column j: free vertices reading j, ascending
    fixed_part: np.ndarray             # (n_vertices,) part of the fixed vertex of net j

    def incident_nets(self) -> list[np.ndarray]:
        """Per free vertex, the nets (columns) it pins."""
        buckets: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for j, pins in enumerate(self.net_pins):
            for v in pins:
                buckets[int(v)].append(j)
        return [np.asarray(b, dtype=np.int64) for b in buckets]


def build_phase_hypergraph(w_k: SparseMatrix, prev_assignment: np.ndarray) -> PhaseHypergraph:
    """Hypergraph for one layer given the previous phase's row ownership."""
    n = w_k.n_cols
    prev_assignment = np.asarray(prev_assignment)
    if len(prev_assignment) != n or np.any(prev_assignment < 0):
        raise ContractViolation("previous assignment must cover every column")
    weights = np.zeros(n, dtype=np.int64)
    pins: list[list[int]] = [[] for _ in range(n)]
    for i in range(w_k.n_rows):
        gid = int(w_k.row_ids[i])
        cols, _ = w_k.row_slice(i)
        weights[gid] = len(cols)
        for j in cols:
            pins[int(j)].append(gid)
    return PhaseHypergraph(
        n_vertices=n,
        vertex_weight=weights,
        net_pins=[np.asarray(p, dtype=np.int64) for p in pins],
        fixed_part=prev_assignment.astype(np.int64),
    )


def connectivity_cut(h: PhaseHypergraph, assignment: np.ndarray, n_parts: int) -> int:
    """sum over nets of (parts touched - 1), counting each net's fixed pin."""
    cut = 0
    for j, pins in enumerate(h.net_pins):
        parts = {int(h.fixed_part[j])}
        parts.update(int(assignment[v]) for v in pins)
        cut += len(parts) - 1
    return cut


def _balance_cap(h: PhaseHypergraph, n_parts: int, epsilon: float) -> float:
    return (1.0 + epsilon) * float(h.vertex_weight.sum()) / n_parts


def _greedy_affinity(h: PhaseHypergraph, n_parts: int, cap: float, incident: list[np.ndarray]) -> np.ndarray:
    """Initial placement: weighted vote of the fixed pins of incident nets."""
    assignment = np.full(h.n_vertices, -1, dtype=np.int64)
    load = np.zeros(n_parts, dtype=np.float64)
    # heaviest first so the balance constraint bites before parts fill up
    order = sorted(range(h.n_vertices), key=lambda v: (-int(h.vertex_weight[v]), v))
    for v in order:
        w = float(h.vertex_weight[v])
        votes = np.zeros(n_parts, dtype=np.int64)
        for j in incident[v]:
            votes[int(h.fixed_part[j])] += 1
        chosen = -1
        for p in sorted(range(n_parts), key=lambda p: (-votes[p], p)):
            if load[p] + w <= cap:
                chosen = p
                break
        if chosen < 0:
            chosen = int(np.argmin(load))
        assignment[v] = chosen
        load[chosen] += w
    return assignment


def _pin_counts(h: PhaseHypergraph, assignment: np.ndarray, n_parts: int) -> np.ndarray:
    """Per net per part pin counts, with each net's fixed pin included."""
    counts = np.zeros((h.n_vertices, n_parts), dtype=np.int64)
    for j, pins in enumerate(h.net_pins):
        counts[j, int(h.fixed_part[j])] += 1
        for v in pins:
            counts[j, int(assignment[v])] += 1
    return counts


def _fm_pass(
    h: PhaseHypergraph,
    assignment: np.ndarray,
    load: np.ndarray,
    counts: np.ndarray,
    n_parts: int,
    cap: float,
    incident: list[np.ndarray],
) -> bool:
    """One refinement pass: tentative single-vertex moves with rollback.

    Every vertex is moved at most once, to its best balanced destination even
    when the immediate gain is negative; the pass then keeps the prefix of
    moves with the best cumulative gain. Returns True if the cut improved.
    """
    history: list[tuple[int, int, int]] = []
    cum = 0
    best_cum = 0
    best_len = 0
    for v in range(h.n_vertices):
        nets = incident[v]
        if len(nets) == 0:
            continue
        a = int(assignment[v])
        w = float(h.vertex_weight[v])
        leave_gain = int(np.sum(counts[nets, a] == 1))
        best_gain, best_b = None, -1
        for b in range(n_parts):
            if b == a or load[b] + w > cap:
                continue
            gain = leave_gain - int(np.sum(counts[nets, b] == 0))
            if best_gain is None or gain > best_gain:
                best_gain, best_b = gain, b
        if best_b < 0:
            continue
        counts[nets, a] -= 1
        counts[nets, best_b] += 1
        load[a] -= w
        load[best_b] += w
        assignment[v] = best_b
        history.append((v, a, best_b))
        cum += best_gain
        if cum > best_cum:
            best_cum, best_len = cum, len(history)
    for v, a, b in reversed(history[best_len:]):
        nets = incident[v]
        counts[nets, b] -= 1
        counts[nets, a] += 1
        w = float(h.vertex_weight[v])
        load[b] -= w
        load[a] += w
        assignment[v] = a
    return best_cum > 0


def _move_gain(counts: np.ndarray, nets: np.ndarray, a: int, b: int) -> int:
    return int(np.sum(counts[nets, a] == 1)) - int(np.sum(counts[nets, b] == 0))


def _apply_move(
    h: PhaseHypergraph,
    assignment: np.ndarray,
    load: np.ndarray,
    counts: np.ndarray,
    incident: list[np.ndarray],
    v: int,
    b: int,
) -> None:
    a = int(assignment[v])
    nets = incident[v]
    counts[nets, a] -= 1
    counts[nets, b] += 1
    w = float(h.vertex_weight[v])
    load[a] -= w
    load[b] += w
    assignment[v] = b


def _swap_pass(
    h: PhaseHypergraph,
    assignment: np.ndarray,
    load: np.ndarray,
    counts: np.ndarray,
    cap: float,
    incident: list[np.ndarray],
) -> bool:
    """Apply the best cut-improving pairwise exchange, if any.

    Swaps escape single-move local optima (and tight balance caps) on small
    instances; single moves alone stall one step short surprisingly often.
    """
    best = None  # (-gain, u, v)
    for u in range(h.n_vertices):
        a = int(assignment[u])
        w_u = float(h.vertex_weight[u])
        for v in range(u + 1, h.n_vertices):
            b = int(assignment[v])
            if a == b:
                continue
            w_v = float(h.vertex_weight[v])
            if load[a] - w_u + w_v > cap or load[b] - w_v + w_u > cap:
                continue
            gain = _move_gain(counts, incident[u], a, b)
            _apply_move(h, assignment, load, counts, incident, u, b)
            gain += _move_gain(counts, incident[v], b, a)
            _apply_move(h, assignment, load, counts, incident, u, a)
            if gain > 0 and (best is None or (-gain, u, v) < best):
                best = (-gain, u, v)
    if best is None:
        return False
    _, u, v = best
    b = int(assignment[v])
    _apply_move(h, assignment, load, counts, incident, v, int(assignment[u]))
    _apply_move(h, assignment, load, counts, incident, u, b)
    return True


def _refine(
    h: PhaseHypergraph,
    assignment: np.ndarray,
    n_parts: int,
    cap: float,
    incident: list[np.ndarray],
) -> np.ndarray:
    """Run FM passes until stable; on small instances also try pair swaps."""
    load = np.zeros(n_parts, dtype=np.float64)
    for v in range(h.n_vertices):
        load[assignment[v]] += float(h.vertex_weight[v])
    counts = _pin_counts(h, assignment, n_parts)
    while True:
        while _fm_pass(h, assignment, load, counts, n_parts, cap, incident):
            pass
        if h.n_vertices > _SWAP_LIMIT:
            break
        if not _swap_pass(h, assignment, load, counts, cap, incident):
            break
    return assignment


# below these vertex counts extra work is cheap and closes most of the gap
# between local refinement and the true optimum
_MULTISTART_LIMIT = 64  # refine several deterministic starting points
_SWAP_LIMIT = 16        # O(n^2) pairwise-exchange escape from move stalls


def _start_points(
    h: PhaseHypergraph, n_parts: int, cap: float, incident: list[np.ndarray], seed: int
) -> list[np.ndarray]:
    starts = [_greedy_affinity(h, n_parts, cap, incident)]
    if h.n_vertices <= _MULTISTART_LIMIT:
        starts.append(np.arange(h.n_vertices, dtype=np.int64) % n_parts)
        rng = np.random.default_rng([seed, h.n_vertices])
        for _ in range(3):
            starts.append(_random_balanced(h, n_parts, cap, rng))
    return starts


def _repair_balance(
    h: PhaseHypergraph, assignment: np.ndarray, n_parts: int, cap: float
) -> None:
    """Move vertices out of over-cap parts, taking the cheapest cut damage.

    Starting points may overshoot the cap on lumpy instances; this walks the
    result back to feasibility whenever feasible destinations exist.
    """
    load = np.zeros(n_parts, dtype=np.float64)
    for v in range(h.n_vertices):
        load[assignment[v]] += float(h.vertex_weight[v])
    counts = _pin_counts(h, assignment, n_parts)
    incident = h.incident_nets()
    for _ in range(h.n_vertices):
        over = int(np.argmax(load))
        if load[over] <= cap:
            return
        best = None  # (cut damage, vertex, destination)
        for v in range(h.n_vertices):
            if assignment[v] != over or h.vertex_weight[v] == 0:
                continue
            w = float(h.vertex_weight[v])
            nets = incident[v]
            leave_gain = int(np.sum(counts[nets, over] == 1)) if len(nets) else 0
            for b in range(n_parts):
                if b == over or load[b] + w > cap:
                    continue
                damage = int(np.sum(counts[nets, b] == 0)) - leave_gain if len(nets) else 0
                if best is None or (damage, v, b) < best:
                    best = (damage, v, b)
        if best is None:
            return  # no feasible escape; leave as-is for infeasible instances
        _, v, b = best
        nets = incident[v]
        counts[nets, over] -= 1
        counts[nets, b] += 1
        w = float(h.vertex_weight[v])
        load[over] -= w
        load[b] += w
        assignment[v] = b


def _within_cap(h: PhaseHypergraph, assignment: np.ndarray, n_parts: int, cap: float) -> bool:
    loads = np.bincount(assignment, weights=h.vertex_weight, minlength=n_parts)
    return bool(np.max(loads) <= cap + 1e-9)


def partition_phase(h: PhaseHypergraph, n_parts: int, epsilon: float, seed: int = 0) -> np.ndarray:
    """Balanced P-way assignment of free vertices minimizing connectivity cut.

    Greedy net-affinity placement followed by FM refinement passes; on small
    instances a handful of extra seeded starting points are refined as well
    and the best result wins. Deterministic for a given seed; ties broken by
    lowest part then lowest vertex id.
    """
    if n_parts < 1:
        raise ContractViolation("need at least one part")
    if n_parts > h.n_vertices:
        raise ContractViolation(f"cannot split {h.n_vertices} vertices into {n_parts} parts")
    if n_parts == 1:
        return np.zeros(h.n_vertices, dtype=np.int64)
    cap = _balance_cap(h, n_parts, epsilon)
    incident = h.incident_nets()
    best = None  # (infeasible flag, cut, assignment)
    for start in _start_points(h, n_parts, cap, incident, seed):
        if not _within_cap(h, start, n_parts, cap):
            _repair_balance(h, start, n_parts, cap)
        refined = _refine(h, start, n_parts, cap, incident)
        key = (
            not _within_cap(h, refined, n_parts, cap),
            connectivity_cut(h, refined, n_parts),
        )
        if best is None or key < best[:2]:
            best = (*key, refined)
    return best[2]


def _random_balanced(
    h: PhaseHypergraph, n_parts: int, cap: float, rng: np.random.Generator
) -> np.ndarray:
    assignment = np.full(h.n_vertices, -1, dtype=np.int64)
    load = np.zeros(n_parts, dtype=np.float64)
    for v in rng.permutation(h.n_vertices):
        w = float(h.vertex_weight[v])
        open_parts = np.nonzero(load + w <= cap)[0]
        p = int(rng.choice(open_parts)) if len(open_parts) else int(np.argmin(load))
        assignment[v] = p
        load[p] += w
    return assignment


def contiguous_input_ownership(n: int, n_parts: int) -> list[tuple[int, int]]:
    """Phase-0 ownership: contiguous row blocks of the input vector."""
    base, extra = divmod(n, n_parts)
    ranges = []
    start = 0
    for m in range(n_parts):
        length = base + (1 if m < extra else 0)
        ranges.append((start, length))
        start += length
    return ranges


def _ownership_array(ranges: list[tuple[int, int]], n: int) -> np.ndarray:
    owner = np.zeros(n, dtype=np.int64)
    for m, (start, length) in enumerate(ranges):
        owner[start : start + length] = m
    return owner


@dataclass
class PartitionPlan:
    """Per-phase row ownership for every layer, plus the phase-0 input split."""

    n_parts: int
    epsilon: float
    scheme: str
    input_ranges: list[tuple[int, int]]
    assignment: np.ndarray  # (L, N) int64, assignment[k][row] = part

    @property
    def n_layers(self) -> int:
        return self.assignment.shape[0]

    def owner_of(self, layer: int, row: int) -> int:
        """Owner of activation row ``row`` after ``layer`` layers (0 = input)."""
        if layer == 0:
            return int(_ownership_array(self.input_ranges, self.assignment.shape[1])[row])
        return int(self.assignment[layer - 1][row])

    def prev_owner_array(self, k: int) -> np.ndarray:
        """Ownership of x^{k-1} rows, with k counted 1..L."""
        if k == 1:
            return _ownership_array(self.input_ranges, self.assignment.shape[1])
        return self.assignment[k - 2]

    def validate(self, model: ModelDef) -> None:
        if self.assignment.shape != (model.n_layers, model.n_neurons):
            raise ContractViolation("assignment shape mismatch")
        if np.any(self.assignment < 0) or np.any(self.assignment >= self.n_parts):
            raise ContractViolation("row without a valid part")
        for k, w in enumerate(model.layers):
            weights = np.zeros(model.n_neurons, dtype=np.int64)
            weights[w.row_ids] = np.diff(w.row_ptr)
            cap = (1.0 + self.epsilon) * weights.sum() / self.n_parts
            loads = np.bincount(self.assignment[k], weights=weights, minlength=self.n_parts)
            if weights.sum() and np.max(loads) > cap + 1e-9:
                raise ContractViolation(f"phase {k + 1} violates the balance cap")


def partition_model(
    model: ModelDef,
    n_parts: int,
    epsilon: float = 0.10,
    scheme: str = "hgp",
    seed: int = 0,
) -> PartitionPlan:
    """L-phase partitioning; each phase is pinned to the previous one's output."""
    if scheme not in ("hgp", "random"):
        raise ContractViolation(f"unknown scheme {scheme!r}")
    n = model.n_neurons
    input_ranges = contiguous_input_ownership(n, n_parts)
    prev = _ownership_array(input_ranges, n)
    assignment = np.zeros((model.n_layers, n), dtype=np.int64)
    for k, w in enumerate(model.layers):
        h = build_phase_hypergraph(w, prev)
        if scheme == "hgp":
            assignment[k] = partition_phase(h, n_parts, epsilon, seed)
        else:
            rng = np.random.default_rng([seed, k])
            assignment[k] = _random_balanced(h, n_parts, _balance_cap(h, n_parts, epsilon), rng)
        prev = assignment[k]
    plan = PartitionPlan(n_parts, epsilon, scheme, input_ranges, assignment)
    plan.validate(model)
    return plan


@dataclass
class CommMaps:
    """Structural per-layer send/receive row maps for every worker pair.

    ``send[m][k]`` is a list of ``(target, rows)`` with rows ascending;
    ``recv`` mirrors it from the target's side.
    """

    send: list[list[list[tuple[int, np.ndarray]]]]
    recv: list[list[list[tuple[int, np.ndarray]]]]

    def validate(self) -> None:
        sent = {}
        for m, per_layer in enumerate(self.send):
            for k, entries in enumerate(per_layer):
                targets = [n for n, _ in entries]
                if m in targets:
                    raise ContractViolation(f"worker {m} sends to itself in layer {k + 1}")
                if targets != sorted(targets):
                    raise ContractViolation("send entries not sorted by target")
                for n, rows in entries:
                    if len(rows) == 0:
                        raise ContractViolation("empty map slot")
                    sent[(m, n, k)] = rows
        received = {}
        for n, per_layer in enumerate(self.recv):
            for k, entries in enumerate(per_layer):
                for m, rows in entries:
                    if m == n:
                        raise ContractViolation(f"worker {n} receives from itself in layer {k + 1}")
                    received[(m, n, k)] = rows
        if set(sent) != set(received):
            raise ContractViolation("send/recv maps are not symmetric")
        for key, rows in sent.items():
            if not np.array_equal(rows, received[key]):
                raise ContractViolation(f"row lists differ for {key}")


def derive_comm_maps(plan: PartitionPlan, model: ModelDef) -> CommMaps:
    """rows(m -> n, k) = structural columns of W^k_n owned by m in phase k-1."""
    n_parts = plan.n_parts
    send: list[list[list[tuple[int, np.ndarray]]]] = [
        [[] for _ in range(model.n_layers)] for _ in range(n_parts)
    ]
    recv: list[list[list[tuple[int, np.ndarray]]]] = [
        [[] for _ in range(model.n_layers)] for _ in range(n_parts)
    ]
    for k, w in enumerate(model.layers, start=1):
        owner_prev = plan.prev_owner_array(k)
        part_of_row = plan.assignment[k - 1]
        needed: list[set[int]] = [set() for _ in range(n_parts)]
        for i in range(w.n_rows):
            part = int(part_of_row[int(w.row_ids[i])])
            cols, _ = w.row_slice(i)
            needed[part].update(int(c) for c in cols)
        for n in range(n_parts):
            by_source: dict[int, list[int]] = {}
            for j in sorted(needed[n]):
                m = int(owner_prev[j])
                if m != n:
                    by_source.setdefault(m, []).append(j)
            for m in sorted(by_source):
                rows = np.asarray(by_source[m], dtype=np.int64)
                send[m][k - 1].append((n, rows))
                recv[n][k - 1].append((m, rows))
        for m in range(n_parts):
            send[m][k - 1].sort(key=lambda e: e[0])
            recv[m][k - 1].sort(key=lambda e: e[0])
    maps = CommMaps(send, recv)
    maps.validate()
    return maps


def cut_metrics(plan: PartitionPlan, model: ModelDef) -> dict:
    """Communication volume and load balance figures for a plan."""
    maps = derive_comm_maps(plan, model)
    total = 0
    per_pair: dict[tuple[int, int], int] = {}
    per_worker_send = np.zeros(plan.n_parts, dtype=np.int64)
    for m, per_layer in enumerate(maps.send):
        for entries in per_layer:
            for n, rows in entries:
                total += len(rows)
                per_pair[(m, n)] = per_pair.get((m, n), 0) + len(rows)
                per_worker_send[m] += len(rows)

    imbalance = 1.0
    for k, w in enumerate(model.layers):
        weights = np.zeros(model.n_neurons, dtype=np.int64)
        weights[w.row_ids] = np.diff(w.row_ptr)
        if weights.sum() == 0:
            continue
        loads = np.bincount(plan.assignment[k], weights=weights, minlength=plan.n_parts)
        imbalance = max(imbalance, float(np.max(loads) / np.mean(loads)))

    return {
        "total_volume_rows": int(total),
        "per_pair_rows": {f"{m}->{n}": int(v) for (m, n), v in sorted(per_pair.items())},
        "max_send_volume": int(per_worker_send.max()) if plan.n_parts else 0,
        "load_imbalance": imbalance,
    }
