"""Per-iteration communication/compute accounting over training epochs.

For each batch the simulator builds the patch x GPU access matrix, assigns
patches either randomly (the baseline, with randomly scattered points) or
via the locality-aware pipeline (Z-order grouping, hierarchical graph
partitioning, LSA + local search), and counts every point transfer split by
intra/inter machine scope.  The backward leg mirrors the forward transfers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ComparisonError, ConstraintError, ParameterError
from .partition import (
    build_bipartite_graph,
    hierarchical_partition,
    image_ownership,
)
from .placement import (
    CostCoefficients,
    PlacementSolution,
    hierarchical_place,
    intra_node_coefficients,
)
from .scene import SceneDataset
from .visibility import (
    EXACT,
    build_access_matrix,
    point_gpu_from_partition,
    zorder_group,
)

FRESH = "fresh"


@dataclass(frozen=True)
class StaleFromEpoch:
    """Placement decided on the access matrices recorded in epoch `epoch`
    (same iteration index); accounting always uses the fresh matrix."""

    epoch: int


@dataclass(frozen=True)
class ClusterTopology:
    machines: int
    gpus_per_machine: int
    inter_bandwidth: float  # bytes/s
    intra_bandwidth: float  # bytes/s
    compute_cost: float = 1e-7  # seconds per in-frustum point

    def __post_init__(self):
        if self.machines < 1 or self.gpus_per_machine < 1:
            raise ParameterError("machines and gpus_per_machine must be >= 1")
        if self.inter_bandwidth <= 0 or self.intra_bandwidth <= 0:
            raise ParameterError("bandwidths must be positive")
        if self.intra_bandwidth < self.inter_bandwidth:
            raise ParameterError("intra bandwidth must be >= inter bandwidth")

    @property
    def n_gpus(self) -> int:
        return self.machines * self.gpus_per_machine

    def machine_of(self, gpu: int) -> int:
        return gpu // self.gpus_per_machine


@dataclass(frozen=True)
class RandomStrategy:
    """Baseline: points scattered by seeded shuffle into equal contiguous
    chunks of the unsorted cloud; patches shuffled then dealt round-robin."""

    seed: int = 0

    name = "random"


@dataclass(frozen=True)
class LocalityAwareStrategy:
    group_size: int = 2048
    eps: float = 0.05
    seed: int = 0
    inter_coeffs: CostCoefficients = field(default_factory=CostCoefficients)
    intra_coeffs: CostCoefficients = field(
        default_factory=intra_node_coefficients
    )
    max_sweeps: int = 200

    name = "locality"


@dataclass
class IterationTrace:
    """Per-GPU point counts for one iteration, forward leg; the backward leg
    has identical volumes with send/recv swapped."""

    send_intra: np.ndarray
    send_inter: np.ndarray
    recv_intra: np.ndarray
    recv_inter: np.ndarray
    comp: np.ndarray
    total_points: int  # sum of the access matrix
    bytes_per_point: int
    est_time: float = 0.0
    batch: list[int] = field(default_factory=list)
    ownership_hits: int = 0
    n_patches: int = 0

    @property
    def backward_send_intra(self) -> np.ndarray:
        return self.recv_intra

    @property
    def backward_send_inter(self) -> np.ndarray:
        return self.recv_inter

    @property
    def backward_recv_intra(self) -> np.ndarray:
        return self.send_intra

    @property
    def backward_recv_inter(self) -> np.ndarray:
        return self.send_inter

    @property
    def inter_points_forward(self) -> int:
        return int(self.send_inter.sum())


def account_iteration(
    matrix: np.ndarray,
    solution: PlacementSolution,
    topology: ClusterTopology,
    bytes_per_point: int,
) -> IterationTrace:
    """Count per-GPU forward transfers from the fresh access matrix."""
    matrix = np.asarray(matrix, dtype=np.int64)
    B, N = matrix.shape
    if N != topology.n_gpus:
        raise ConstraintError("matrix GPU count does not match topology")
    solution.check_cardinality()
    W = solution.assignment
    gm = topology.gpus_per_machine
    machine = np.arange(N) // gm

    send_intra = np.zeros(N, dtype=np.int64)
    send_inter = np.zeros(N, dtype=np.int64)
    recv_intra = np.zeros(N, dtype=np.int64)
    recv_inter = np.zeros(N, dtype=np.int64)
    comp = np.zeros(N, dtype=np.int64)
    for j in range(B):
        w = int(W[j])
        mw = machine[w]
        row = matrix[j]
        comp[w] += int(row.sum())
        for k in range(N):
            if k == w:
                continue
            x = int(row[k])
            if x == 0:
                continue
            if machine[k] == mw:
                send_intra[k] += x
                recv_intra[w] += x
            else:
                send_inter[k] += x
                recv_inter[w] += x
    trace = IterationTrace(
        send_intra=send_intra,
        send_inter=send_inter,
        recv_intra=recv_intra,
        recv_inter=recv_inter,
        comp=comp,
        total_points=int(matrix.sum()),
        bytes_per_point=bytes_per_point,
        n_patches=B,
    )
    trace.est_time = estimate_step_time(trace, topology)
    return trace


def estimate_step_time(trace: IterationTrace, topology: ClusterTopology) -> float:
    """Bottleneck proxy: slowest GPU paying its compute plus the scoped
    transfer time of both legs (backward mirrors forward, so inter/intra
    volumes double).  Not a wall-clock prediction."""
    bpp = trace.bytes_per_point
    inter = trace.send_inter + trace.recv_inter
    intra = trace.send_intra + trace.recv_intra
    per_gpu = (
        trace.comp * topology.compute_cost
        + 2.0 * inter * bpp / topology.inter_bandwidth
        + 2.0 * intra * bpp / topology.intra_bandwidth
    )
    return float(per_gpu.max())


@dataclass
class EpochReport:
    strategy: str
    seed: int
    epochs: int
    batch_size: int
    patch_factor: int
    topology: ClusterTopology
    traces: list[IterationTrace]
    batch_schedule: list[list[int]]
    total_inter_points_forward: int = 0
    total_inter_points_both: int = 0
    mean_comp: float = 0.0
    max_comp: int = 0
    comp_imbalance: float = 0.0  # mean over iterations of max/mean comp
    ownership_hit_rate: float = 0.0
    comp_samples: list[int] = field(default_factory=list)

    def finalize(self):
        fwd = sum(t.inter_points_forward for t in self.traces)
        self.total_inter_points_forward = fwd
        self.total_inter_points_both = 2 * fwd  # backward mirrors forward
        comps = np.concatenate([t.comp for t in self.traces])
        self.mean_comp = float(comps.mean())
        self.max_comp = int(comps.max())
        ratios = [
            t.comp.max() / t.comp.mean() for t in self.traces if t.comp.mean() > 0
        ]
        self.comp_imbalance = float(np.mean(ratios)) if ratios else 1.0
        hits = sum(t.ownership_hits for t in self.traces)
        patches = sum(t.n_patches for t in self.traces)
        self.ownership_hit_rate = hits / patches if patches else 0.0
        self.comp_samples = [int(c) for c in comps]

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "patch_factor": self.patch_factor,
            "topology": {
                "machines": self.topology.machines,
                "gpus_per_machine": self.topology.gpus_per_machine,
                "inter_bandwidth": self.topology.inter_bandwidth,
                "intra_bandwidth": self.topology.intra_bandwidth,
                "compute_cost": self.topology.compute_cost,
            },
            "batch_schedule": self.batch_schedule,
            "total_inter_points_forward": self.total_inter_points_forward,
            "total_inter_points_both": self.total_inter_points_both,
            "mean_comp": self.mean_comp,
            "max_comp": self.max_comp,
            "comp_imbalance": self.comp_imbalance,
            "ownership_hit_rate": self.ownership_hit_rate,
            "iterations": [
                {
                    "send_intra": [int(v) for v in t.send_intra],
                    "send_inter": [int(v) for v in t.send_inter],
                    "recv_intra": [int(v) for v in t.recv_intra],
                    "recv_inter": [int(v) for v in t.recv_inter],
                    "comp": [int(v) for v in t.comp],
                    "total_points": t.total_points,
                    "est_time": t.est_time,
                    "batch": t.batch,
                }
                for t in self.traces
            ],
        }


def _random_point_gpus(n_points: int, n_gpus: int, rng) -> np.ndarray:
    """Equal contiguous chunks of a seeded shuffle of the unsorted cloud."""
    perm = rng.permutation(n_points)
    out = np.empty(n_points, dtype=np.int64)
    chunk = n_points // n_gpus
    extra = n_points % n_gpus
    start = 0
    for k in range(n_gpus):
        size = chunk + (1 if k < extra else 0)
        out[perm[start : start + size]] = k
        start += size
    return out


def _random_placement(n_patches: int, n_gpus: int, rng) -> PlacementSolution:
    order = rng.permutation(n_patches)
    W = np.empty(n_patches, dtype=np.int64)
    W[order] = np.arange(n_patches) % n_gpus
    return PlacementSolution(W, n_gpus)


def run_training_sim(
    dataset: SceneDataset,
    topology: ClusterTopology,
    strategy,
    epochs: int,
    batch_size: int,
    P: int,
    seed: int,
    staleness=FRESH,
) -> EpochReport:
    """Simulate `epochs` epochs of training and return the accounting report.

    Batches are seeded shuffles of the view list; iterations drop the final
    partial batch.  Random and LocalityAware runs with the same seed process
    identical batch sequences, so reductions isolate the placement policy.
    """
    n_views = len(dataset.views)
    if batch_size > n_views:
        raise ParameterError("batch_size must be <= number of views")
    N = topology.n_gpus
    n_patches = batch_size * P * P
    if n_patches % N != 0:
        good = [pp for pp in range(1, 9) if (batch_size * pp * pp) % N == 0]
        raise ConstraintError(
            f"batch_size*P^2 = {n_patches} not divisible by {N} GPUs; "
            f"valid P values for this batch size: {good}"
        )
    temporal = dataset.profile.temporal
    bpp = dataset.profile.bytes_per_point

    if isinstance(strategy, LocalityAwareStrategy):
        grouped = zorder_group(dataset.cloud, strategy.group_size)
        graph = build_bipartite_graph(grouped, dataset)
        assignment = hierarchical_partition(
            graph,
            topology.machines,
            topology.gpus_per_machine,
            strategy.eps,
            strategy.seed,
        )
        point_gpu = point_gpu_from_partition(grouped, assignment)
        owner = image_ownership(assignment, graph)
        strategy_name = strategy.name
    elif isinstance(strategy, RandomStrategy):
        # Grouping only accelerates culling; GPU ids are a random scatter.
        grouped = zorder_group(dataset.cloud)
        srng = np.random.default_rng(np.random.SeedSequence([strategy.seed, 17]))
        raw = _random_point_gpus(len(dataset.cloud), N, srng)
        point_gpu = raw[grouped.permutation]
        owner = {
            v: int(m)
            for v, m in enumerate(srng.integers(0, topology.machines, n_views))
        }
        strategy_name = strategy.name
    else:
        raise ParameterError(f"unknown strategy {strategy!r}")

    view_by_id = {v.id: v for v in dataset.views}
    schedule = []
    for e in range(epochs):
        erng = np.random.default_rng(np.random.SeedSequence([int(seed), 2, e]))
        order = erng.permutation(n_views)
        for i in range(n_views // batch_size):
            schedule.append(
                (e, [int(v) for v in order[i * batch_size : (i + 1) * batch_size]])
            )

    iters_per_epoch = n_views // batch_size
    recorded = {}  # iteration index within epoch -> matrix from the stale epoch
    traces = []
    for it, (epoch, batch_ids) in enumerate(schedule):
        batch = [view_by_id[v] for v in batch_ids]
        matrix = build_access_matrix(
            grouped, point_gpu, batch, P, EXACT, temporal=temporal
        )
        idx_in_epoch = it % iters_per_epoch
        placement_matrix = matrix
        if isinstance(staleness, StaleFromEpoch):
            if epoch == staleness.epoch:
                recorded[idx_in_epoch] = matrix
            elif epoch > staleness.epoch and idx_in_epoch in recorded:
                placement_matrix = recorded[idx_in_epoch]

        if isinstance(strategy, LocalityAwareStrategy):
            sol = hierarchical_place(
                placement_matrix,
                topology.machines,
                topology.gpus_per_machine,
                strategy.inter_coeffs,
                strategy.intra_coeffs,
                max_sweeps=strategy.max_sweeps,
            )
        else:
            irng = np.random.default_rng(
                np.random.SeedSequence([strategy.seed, 3, it])
            )
            sol = _random_placement(n_patches, N, irng)

        trace = account_iteration(matrix, sol, topology, bpp)
        trace.batch = batch_ids
        P2 = P * P
        hits = 0
        for j, w in enumerate(sol.assignment):
            view_id = batch_ids[j // P2]
            if topology.machine_of(int(w)) == owner[view_id]:
                hits += 1
        trace.ownership_hits = hits
        traces.append(trace)

    report = EpochReport(
        strategy=strategy_name,
        seed=seed,
        epochs=epochs,
        batch_size=batch_size,
        patch_factor=P,
        topology=topology,
        traces=traces,
        batch_schedule=[b for _, b in schedule],
    )
    report.finalize()
    return report


def comm_reduction(baseline: EpochReport, ours: EpochReport) -> float:
    """Percent reduction of forward inter-machine point transfers."""
    if baseline.batch_schedule != ours.batch_schedule:
        raise ComparisonError("reports were produced from different schedules")
    base = baseline.total_inter_points_forward
    if base == 0:
        return 0.0
    return 100.0 * (1.0 - ours.total_inter_points_forward / base)


# ---------------------------------------------------------------------------
# export


def save_report_json(report: EpochReport, path: str) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=1, sort_keys=True)


def save_iterations_csv(report: EpochReport, path: str) -> None:
    """Forward-leg per-GPU counts, one row per (iteration, gpu)."""
    with open(path, "w") as f:
        f.write("iter,gpu,send_intra,send_inter,recv_intra,recv_inter,comp,est_time\n")
        for it, t in enumerate(report.traces):
            for k in range(len(t.comp)):
                f.write(
                    f"{it},{k},{int(t.send_intra[k])},{int(t.send_inter[k])},"
                    f"{int(t.recv_intra[k])},{int(t.recv_inter[k])},"
                    f"{int(t.comp[k])},{t.est_time!r}\n"
                )
