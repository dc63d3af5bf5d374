"""Offline point placement via balanced partitioning of the visibility graph.

The bipartite graph connects point groups to the views that see them; a
multilevel scheme (heavy-edge matching coarsening, greedy growth initial
partition, boundary refinement on uncoarsening) splits it first across
machines and then across each machine's GPUs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConsistencyError,
    InfeasiblePartitionError,
    ParameterError,
)
from .scene import SceneDataset
from .visibility import (
    INTERSECTING,
    GroupedCloud,
    cull_group,
    cull_points,
    frustum_from_view,
)

DEFAULT_EPSILON = 0.05
DEFAULT_RUNS = 4
COARSEN_FACTOR = 30  # stop coarsening at <= 30 * parts vertices


# ---------------------------------------------------------------------------
# bipartite visibility graph


@dataclass
class BipartiteGraph:
    """Group vertices (weight = group size) vs image vertices (weight =
    points accessed).  Edges carry visible-point counts >= 1."""

    group_weights: np.ndarray  # (ng,)
    edge_groups: np.ndarray  # (E,) group index per edge
    edge_views: np.ndarray  # (E,) view index per edge
    edge_weights: np.ndarray  # (E,)
    n_views: int

    @property
    def n_groups(self) -> int:
        return len(self.group_weights)

    @property
    def view_weights(self) -> np.ndarray:
        w = np.zeros(self.n_views, dtype=np.int64)
        np.add.at(w, self.edge_views, self.edge_weights)
        return w

    @property
    def n_vertices(self) -> int:
        return self.n_groups + self.n_views


def build_bipartite_graph(
    grouped: GroupedCloud, dataset: SceneDataset
) -> BipartiteGraph:
    """Exact per-group visible-point counts for every (group, view) pair."""
    if len(grouped.sorted_cloud) != len(dataset.cloud):
        raise ConsistencyError("grouped cloud does not match dataset cloud")
    temporal = dataset.profile.temporal
    cloud = grouped.sorted_cloud
    eg, ev, ew = [], [], []
    for view in dataset.views:
        fr = frustum_from_view(view)
        for g in grouped.groups:
            if cull_group(fr, g.aabb) != INTERSECTING:
                continue
            vis = cull_points(
                fr,
                cloud.positions[g.begin : g.end],
                view.time if temporal else None,
                cloud.timestamps[g.begin : g.end] if temporal else None,
            )
            count = int(vis.sum())
            if count > 0:
                eg.append(g.group_id)
                ev.append(view.id)
                ew.append(count)
    sizes = np.array([g.size for g in grouped.groups], dtype=np.int64)
    return BipartiteGraph(
        group_weights=sizes,
        edge_groups=np.array(eg, dtype=np.int64),
        edge_views=np.array(ev, dtype=np.int64),
        edge_weights=np.array(ew, dtype=np.int64),
        n_views=len(dataset.views),
    )


# ---------------------------------------------------------------------------
# generic weighted graph used by the multilevel partitioner


class _Graph:
    """Undirected weighted graph in CSR form with per-vertex balance weights."""

    def __init__(self, n, bal_weights, edges_u, edges_v, edges_w):
        self.n = n
        self.bal = np.asarray(bal_weights, dtype=np.float64)
        u = np.concatenate([edges_u, edges_v])
        v = np.concatenate([edges_v, edges_u])
        w = np.concatenate([edges_w, edges_w]).astype(np.float64)
        order = np.lexsort((v, u))
        u, v, w = u[order], v[order], w[order]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, u + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.indices = v
        self.eweights = w
        # one direction only, for cut computation
        self.eu = np.asarray(edges_u, dtype=np.int64)
        self.ev = np.asarray(edges_v, dtype=np.int64)
        self.ew = np.asarray(edges_w, dtype=np.float64)

    def neighbors(self, v):
        s, e = self.indptr[v], self.indptr[v + 1]
        return self.indices[s:e], self.eweights[s:e]

    def cut(self, labels) -> float:
        return float(self.ew[labels[self.eu] != labels[self.ev]].sum())


def _coarsen(graph: _Graph, rng: np.random.Generator, cap: float):
    """Heavy-edge matching contraction.  Returns (coarse graph, fine->coarse map)
    or None when no matching progress is possible."""
    n = graph.n
    match = np.full(n, -1, dtype=np.int64)
    for v in range(n):
        if match[v] != -1:
            continue
        nbrs, ws = graph.neighbors(v)
        best_w = -1.0
        cands = []
        for u, w in zip(nbrs, ws):
            if match[u] != -1 or u == v:
                continue
            if graph.bal[v] + graph.bal[u] > cap:
                continue
            if w > best_w:
                best_w = w
                cands = [u]
            elif w == best_w:
                cands.append(u)
        if cands:
            u = int(cands[rng.integers(len(cands))]) if len(cands) > 1 else int(cands[0])
            match[v] = u
            match[u] = v
    singles = match == -1
    if singles.all():
        return None
    # Coarse ids in order of first member index.
    cmap = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for v in range(n):
        if cmap[v] != -1:
            continue
        cmap[v] = next_id
        if match[v] != -1:
            cmap[match[v]] = next_id
        next_id += 1
    cbal = np.zeros(next_id)
    np.add.at(cbal, cmap, graph.bal)
    cu = cmap[graph.eu]
    cv = cmap[graph.ev]
    keep = cu != cv
    cu, cv, cw = cu[keep], cv[keep], graph.ew[keep]
    # merge parallel edges
    lo = np.minimum(cu, cv)
    hi = np.maximum(cu, cv)
    key = lo * next_id + hi
    order = np.argsort(key, kind="stable")
    key, lo, hi, cw = key[order], lo[order], hi[order], cw[order]
    uniq, start = np.unique(key, return_index=True)
    sums = np.add.reduceat(cw, start) if len(cw) else cw
    coarse = _Graph(next_id, cbal, lo[start], hi[start], sums)
    return coarse, cmap


def _greedy_growth(graph: _Graph, parts: int, rng: np.random.Generator):
    """Grow parts 0..parts-2 from random seeds by max connection weight;
    leftovers go to the last part."""
    n = graph.n
    labels = np.full(n, -1, dtype=np.int64)
    unassigned = n
    total = graph.bal.sum()
    target = total / parts
    conn = np.zeros(n)
    for p in range(parts - 1):
        if unassigned <= parts - p - 1:
            break
        free = np.flatnonzero(labels == -1)
        seed_v = int(free[rng.integers(len(free))])
        conn[:] = 0.0
        weight = 0.0
        current = seed_v
        while True:
            labels[current] = p
            unassigned -= 1
            weight += graph.bal[current]
            nbrs, ws = graph.neighbors(current)
            for u, w in zip(nbrs, ws):
                if labels[u] == -1:
                    conn[u] += w
            if weight >= target or unassigned <= parts - p - 1:
                break
            free = np.flatnonzero(labels == -1)
            fc = conn[free]
            if fc.max() > 0:
                current = int(free[int(np.argmax(fc))])
            else:
                current = int(free[rng.integers(len(free))])
    labels[labels == -1] = parts - 1
    return labels


def _part_weights(graph: _Graph, labels, parts):
    w = np.zeros(parts)
    np.add.at(w, labels, graph.bal)
    return w


def _build_conn(graph: _Graph, labels, parts):
    """(n, parts) connection weight of each vertex to each part."""
    conn = np.zeros((graph.n, parts))
    np.add.at(conn, (graph.eu, labels[graph.ev]), graph.ew)
    np.add.at(conn, (graph.ev, labels[graph.eu]), graph.ew)
    return conn


def _apply_move(graph: _Graph, conn, labels, v, to):
    frm = labels[v]
    nbrs, ws = graph.neighbors(v)
    np.add.at(conn, (nbrs, frm), -ws)
    np.add.at(conn, (nbrs, to), ws)
    labels[v] = to


def _rebalance(graph: _Graph, labels, parts, cap, conn, weights):
    """Force every part under the weight cap, preferring low-damage moves."""
    guard = 10 * graph.n + 10
    while guard > 0:
        over = np.flatnonzero(weights > cap)
        if len(over) == 0:
            return True
        guard -= 1
        p = int(over[np.argmax(weights[over])])
        members = np.flatnonzero((labels == p) & (graph.bal > 0))
        best = None  # (neg gain, v, t)
        for v in members:
            room = cap - (weights + graph.bal[v])
            for t in range(parts):
                if t == p or room[t] < 0:
                    continue
                gain = conn[v, t] - conn[v, p]
                cand = (-gain, weights[t], int(v), t)
                if best is None or cand < best:
                    best = cand
        if best is None:
            return False
        _, _, v, t = best
        weights[p] -= graph.bal[v]
        weights[t] += graph.bal[v]
        _apply_move(graph, conn, labels, v, t)
    return bool((_part_weights(graph, labels, parts) <= cap).all())


def _refine(graph: _Graph, labels, parts, cap, max_moves=None, history=None,
            rebalance=True):
    """Greedy boundary refinement: each accepted move strictly decreases the
    cut, or keeps it equal while strictly decreasing the sum of squared part
    weights.  Monotone and terminating.  `history` collects
    (cut_gain, sumsq_delta) per accepted move."""
    n = graph.n
    if max_moves is None:
        max_moves = 100 * n + 100
    conn = _build_conn(graph, labels, parts)
    weights = _part_weights(graph, labels, parts)
    if rebalance:
        _rebalance(graph, labels, parts, cap, conn, weights)
    moves = 0
    while moves < max_moves:
        own = conn[np.arange(n), labels][:, None]
        gains = conn - own
        feasible = (weights[None, :] + graph.bal[:, None]) <= cap
        gains = np.where(feasible, gains, -np.inf)
        gains[np.arange(n), labels] = -np.inf
        best = gains.max()
        if best < 0:
            break
        if best > 0:
            flat = int(np.argmax(gains))  # first occurrence = lowest (v, t)
            v, t = divmod(flat, parts)
        else:
            # zero-gain moves accepted only if they strictly improve balance
            cand = np.argwhere(gains == 0.0)
            v = t = -1
            best_delta = 0.0
            for cv, ct in cand:
                w = graph.bal[cv]
                if w == 0:
                    continue
                delta = 2.0 * w * (weights[ct] - weights[labels[cv]] + w)
                if delta < best_delta - 1e-12:
                    best_delta = delta
                    v, t = int(cv), int(ct)
            if v == -1:
                break
        frm = labels[v]
        if history is not None:
            w = graph.bal[v]
            sumsq_delta = 2.0 * w * (weights[t] - weights[frm] + w)
            history.append((float(gains[v, t]), float(sumsq_delta)))
        weights[frm] -= graph.bal[v]
        weights[t] += graph.bal[v]
        _apply_move(graph, conn, labels, v, t)
        moves += 1
    return labels


def _multilevel_kway(graph: _Graph, parts: int, eps: float, rng):
    cap = (1.0 + eps) * graph.bal.sum() / parts
    levels = [graph]
    maps = []
    g = graph
    while g.n > COARSEN_FACTOR * parts:
        res = _coarsen(g, rng, cap)
        if res is None:
            break
        g, cmap = res
        levels.append(g)
        maps.append(cmap)
        if levels[-2].n - g.n < max(1, levels[-2].n // 20):
            break  # negligible progress
    labels = _greedy_growth(levels[-1], parts, rng)
    labels = _refine(levels[-1], labels, parts, cap)
    for lvl in range(len(maps) - 1, -1, -1):
        labels = labels[maps[lvl]]
        labels = _refine(levels[lvl], labels, parts, cap)
    return labels


# ---------------------------------------------------------------------------
# public API


@dataclass
class PartitionQuality:
    edge_cut: float
    balance: float
    part_weights: list[float]

    def to_json(self) -> dict:
        return {
            "edge_cut": self.edge_cut,
            "balance": self.balance,
            "part_weights": self.part_weights,
        }


def _to_generic(graph: BipartiteGraph, image_weight_factor: float) -> _Graph:
    ng = graph.n_groups
    bal = np.concatenate(
        [
            graph.group_weights.astype(np.float64),
            image_weight_factor * graph.view_weights.astype(np.float64),
        ]
    )
    return _Graph(
        graph.n_vertices,
        bal,
        graph.edge_groups,
        graph.edge_views + ng,
        graph.edge_weights,
    )


def evaluate_partition(
    graph: BipartiteGraph, labels, parts, image_weight_factor=0.0
) -> PartitionQuality:
    g = _to_generic(graph, image_weight_factor)
    labels = np.asarray(labels, dtype=np.int64)
    weights = _part_weights(g, labels, parts)
    mean = g.bal.sum() / parts
    balance = float(weights.max() / mean) if mean > 0 else 1.0
    return PartitionQuality(g.cut(labels), balance, [float(w) for w in weights])


def partition_graph(
    graph: BipartiteGraph,
    parts: int,
    eps: float = DEFAULT_EPSILON,
    seed: int = 0,
    runs: int = DEFAULT_RUNS,
    image_weight_factor: float = 0.0,
):
    """Partition all vertices (groups then images) into `parts` parts.

    Returns (labels array over n_groups + n_views vertices, PartitionQuality).
    Best of `runs` independent multilevel runs by (cut, balance).
    """
    if parts < 1:
        raise ParameterError("parts must be >= 1")
    if graph.n_vertices == 0:
        raise ParameterError("graph is empty")
    g = _to_generic(graph, image_weight_factor)
    if parts == 1:
        labels = np.zeros(g.n, dtype=np.int64)
        return labels, evaluate_partition(graph, labels, 1, image_weight_factor)
    cap = (1.0 + eps) * g.bal.sum() / parts
    heavy = int(np.argmax(g.bal))
    if g.bal[heavy] > cap:
        raise InfeasiblePartitionError(
            f"vertex {heavy} (weight {g.bal[heavy]:g}) exceeds the balance "
            f"cap {cap:g}; no {parts}-way partition satisfies eps={eps}"
        )
    best = None
    for r in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), r]))
        labels = _multilevel_kway(g, parts, eps, rng)
        q = evaluate_partition(graph, labels, parts, image_weight_factor)
        key = (q.edge_cut, q.balance, r)
        if best is None or key < best[0]:
            best = (key, labels, q)
    return best[1], best[2]


@dataclass
class PartitionAssignment:
    """group -> (machine, gpu) map plus the image-vertex machine labels."""

    group_machine: np.ndarray
    group_gpu: np.ndarray
    machines: int
    gpus_per_machine: int
    group_weights: np.ndarray
    image_machine: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def n_groups(self) -> int:
        return len(self.group_machine)

    @property
    def n_gpus(self) -> int:
        return self.machines * self.gpus_per_machine

    def flat_gpu(self, group_id: int) -> int:
        return int(
            self.group_machine[group_id] * self.gpus_per_machine
            + self.group_gpu[group_id]
        )

    def flat_gpus(self) -> np.ndarray:
        return self.group_machine * self.gpus_per_machine + self.group_gpu

    def per_gpu_weights(self) -> np.ndarray:
        w = np.zeros(self.n_gpus, dtype=np.int64)
        np.add.at(w, self.flat_gpus(), self.group_weights)
        return w


def _machine_seed(seed: int, machine: int) -> int:
    return int(seed) + machine * 1000003


def hierarchical_partition(
    graph: BipartiteGraph,
    machines: int,
    gpus_per_machine: int,
    eps: float = DEFAULT_EPSILON,
    seed: int = 0,
) -> PartitionAssignment:
    """Machine-level partition of the full graph, then a GPU-level partition
    of each machine's induced subgraph."""
    if machines < 1 or gpus_per_machine < 1:
        raise ParameterError("machines and gpus_per_machine must be >= 1")
    ng = graph.n_groups
    l1, _ = partition_graph(graph, machines, eps, seed)
    group_machine = l1[:ng].copy()
    image_machine = l1[ng:].copy()

    # For the per-machine subgraphs, images join the machine holding most of
    # the points they access (their level-1 label can differ).
    incident = np.zeros((graph.n_views, machines))
    np.add.at(
        incident,
        (graph.edge_views, group_machine[graph.edge_groups]),
        graph.edge_weights,
    )
    image_heaviest = np.where(
        incident.sum(axis=1) > 0, np.argmax(incident, axis=1), image_machine
    )

    group_gpu = np.zeros(ng, dtype=np.int64)
    for m in range(machines):
        gsel = np.flatnonzero(group_machine == m)
        if len(gsel) == 0:
            continue
        if gpus_per_machine == 1:
            continue
        vsel = np.flatnonzero(image_heaviest == m)
        gmap = {int(g): i for i, g in enumerate(gsel)}
        vmap = {int(v): i for i, v in enumerate(vsel)}
        emask = np.isin(graph.edge_groups, gsel) & np.isin(graph.edge_views, vsel)
        sub = BipartiteGraph(
            group_weights=graph.group_weights[gsel],
            edge_groups=np.array(
                [gmap[int(g)] for g in graph.edge_groups[emask]], dtype=np.int64
            ),
            edge_views=np.array(
                [vmap[int(v)] for v in graph.edge_views[emask]], dtype=np.int64
            ),
            edge_weights=graph.edge_weights[emask],
            n_views=len(vsel),
        )
        sl, _ = partition_graph(sub, gpus_per_machine, eps, _machine_seed(seed, m))
        group_gpu[gsel] = sl[: len(gsel)]
    return PartitionAssignment(
        group_machine=group_machine,
        group_gpu=group_gpu,
        machines=machines,
        gpus_per_machine=gpus_per_machine,
        group_weights=graph.group_weights.copy(),
        image_machine=image_machine,
    )


def image_ownership(assignment: PartitionAssignment, graph: BipartiteGraph):
    """view_id -> owning machine, from the level-1 image vertex labels."""
    if len(assignment.image_machine) != graph.n_views:
        raise ConsistencyError("assignment image labels do not match graph views")
    return {v: int(assignment.image_machine[v]) for v in range(graph.n_views)}


# ---------------------------------------------------------------------------
# import / export


def save_partition_csv(assignment: PartitionAssignment, path: str) -> None:
    with open(path, "w") as f:
        f.write("group_id,machine,gpu\n")
        for g in range(assignment.n_groups):
            f.write(
                f"{g},{int(assignment.group_machine[g])},"
                f"{int(assignment.group_gpu[g])}\n"
            )


def load_partition_csv(
    path: str, group_weights, machines=None, gpus_per_machine=None
) -> PartitionAssignment:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != "group_id,machine,gpu":
        raise ParameterError(f"{path} is not a partition CSV")
    rows = sorted(tuple(int(x) for x in ln.split(",")) for ln in lines[1:])
    gids = [r[0] for r in rows]
    if gids != list(range(len(rows))):
        raise ParameterError("partition CSV must cover group ids 0..n-1 exactly once")
    gm = np.array([r[1] for r in rows], dtype=np.int64)
    gg = np.array([r[2] for r in rows], dtype=np.int64)
    machines = machines or int(gm.max()) + 1
    gpus_per_machine = gpus_per_machine or int(gg.max()) + 1
    return PartitionAssignment(
        gm, gg, machines, gpus_per_machine,
        np.asarray(group_weights, dtype=np.int64),
    )


def save_quality_json(quality: PartitionQuality, path: str) -> None:
    with open(path, "w") as f:
        json.dump(quality.to_json(), f, indent=1, sort_keys=True)
