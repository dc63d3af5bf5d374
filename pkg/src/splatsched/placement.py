"""Online assignment of image patches to GPUs.

LSA gives a communication-optimal initial solution under the equal-patches
constraint; steepest-ascent pairwise swaps then reduce a p-norm relaxation
of the max send/recv/compute terms.  A brute-force enumerator serves as the
exact oracle on small instances.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConstraintError, InstanceTooLargeError, ParameterError

BRUTE_FORCE_GUARD = 10**6


@dataclass(frozen=True)
class CostCoefficients:
    """Objective weights: alpha on total communication (exact objective only),
    beta/gamma on max send/recv, delta on max compute; p is the norm used by
    the relaxed search objective (math.inf recovers the max)."""

    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 0.25
    delta: float = 0.5
    p: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.alpha == self.beta == self.gamma == self.delta == 0:
            raise ParameterError("at least one coefficient must be positive")
        if not (self.p >= 1):
            raise ParameterError("p must be >= 1 (or inf)")


# Intra-machine default: compute-dominated, small send/recv terms.
def intra_node_coefficients(p: float = 2.0) -> CostCoefficients:
    return CostCoefficients(alpha=0.0, beta=0.1, gamma=0.1, delta=1.0, p=p)


@dataclass
class PlacementSolution:
    assignment: np.ndarray  # (B,) GPU index per patch
    n_gpus: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    @property
    def n_patches(self) -> int:
        return len(self.assignment)

    def per_gpu_counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_gpus)

    def check_cardinality(self):
        counts = self.per_gpu_counts()
        if counts.min() != counts.max():
            raise ConstraintError(
                f"patches per GPU must be equal, got {counts.tolist()}"
            )


@dataclass
class ObjectiveBreakdown:
    total_local: int
    send: np.ndarray
    recv: np.ndarray
    comp: np.ndarray
    exact_value: float
    relaxed_value: float

    @property
    def max_send(self) -> int:
        return int(self.send.max())

    @property
    def max_recv(self) -> int:
        return int(self.recv.max())

    @property
    def max_comp(self) -> int:
        return int(self.comp.max())

    def to_json(self) -> dict:
        return {
            "total_local": int(self.total_local),
            "send": [int(v) for v in self.send],
            "recv": [int(v) for v in self.recv],
            "comp": [int(v) for v in self.comp],
            "max_send": self.max_send,
            "max_recv": self.max_recv,
            "max_comp": self.max_comp,
            "exact_value": self.exact_value,
            "relaxed_value": self.relaxed_value,
        }


@dataclass
class ProfilerStats:
    t_comm: float
    t_comp: float
    max_send: float = 0.0
    max_recv: float = 0.0

    def __post_init__(self):
        if self.t_comm < 0 or self.t_comp < 0:
            raise ParameterError("times must be non-negative")
        if self.t_comm + self.t_comp == 0:
            raise ParameterError("t_comm + t_comp must be positive")


def compute_loads(matrix: np.ndarray, W: np.ndarray):
    """(send, recv, comp, total_local) per-GPU integer load vectors."""
    matrix = np.asarray(matrix, dtype=np.int64)
    W = np.asarray(W, dtype=np.int64)
    B, N = matrix.shape
    rowsum = matrix.sum(axis=1)
    local = matrix[np.arange(B), W]
    own = np.zeros(N, dtype=np.int64)
    np.add.at(own, W, local)
    send = matrix.sum(axis=0) - own
    recv = np.zeros(N, dtype=np.int64)
    np.add.at(recv, W, rowsum - local)
    comp = np.zeros(N, dtype=np.int64)
    np.add.at(comp, W, rowsum)
    return send, recv, comp, int(local.sum())


def _pnorm(x: np.ndarray, p: float) -> float:
    if math.isinf(p):
        return float(x.max()) if len(x) else 0.0
    return float(np.power(x.astype(np.float64), p).sum() ** (1.0 / p))


def objective(
    matrix: np.ndarray, solution: PlacementSolution, coeffs: CostCoefficients
) -> ObjectiveBreakdown:
    """Exact objective (with max terms) and its p-norm relaxation."""
    solution.check_cardinality()
    send, recv, comp, total_local = compute_loads(matrix, solution.assignment)
    exact = (
        coeffs.alpha * (-total_local)
        + coeffs.beta * send.max()
        + coeffs.gamma * recv.max()
        + coeffs.delta * comp.max()
    )
    relaxed = (
        coeffs.beta * _pnorm(send, coeffs.p)
        + coeffs.gamma * _pnorm(recv, coeffs.p)
        + coeffs.delta * _pnorm(comp, coeffs.p)
    )
    return ObjectiveBreakdown(total_local, send, recv, comp, float(exact), relaxed)


def lsa_assign(matrix: np.ndarray, slots_per_gpu: int) -> PlacementSolution:
    """Communication-optimal assignment with exactly slots_per_gpu patches per
    GPU, via linear sum assignment on the slot-expanded square cost matrix."""
    matrix = np.asarray(matrix, dtype=np.int64)
    B, N = matrix.shape
    if slots_per_gpu * N != B:
        raise ConstraintError(
            f"{B} patches cannot be split into {N} GPUs x {slots_per_gpu} slots"
        )
    cost = np.repeat(-matrix, slots_per_gpu, axis=1)
    rows, cols = linear_sum_assignment(cost)
    W = np.empty(B, dtype=np.int64)
    W[rows] = cols // slots_per_gpu
    return PlacementSolution(W, N)


def local_search(
    matrix: np.ndarray,
    init: PlacementSolution,
    coeffs: CostCoefficients,
    max_sweeps: int = 200,
    wall_time: float | None = None,
):
    """Steepest-ascent pairwise swaps under the relaxed objective.

    Each step evaluates every candidate swap (pairs of patches on different
    GPUs) with O(1) load deltas and applies the single best strictly
    improving one; ties go to the lexicographically smallest (a, b) pair.
    Returns (solution, info) where info carries the per-step relaxed values.
    """
    matrix = np.asarray(matrix, dtype=np.int64)
    init.check_cardinality()
    B, N = matrix.shape
    W = init.assignment.copy()
    send, recv, comp, _ = compute_loads(matrix, W)
    send = send.astype(np.float64)
    recv = recv.astype(np.float64)
    comp = comp.astype(np.float64)
    rowsum = matrix.sum(axis=1).astype(np.float64)
    mat = matrix.astype(np.float64)
    p = coeffs.p
    finite_p = not math.isinf(p)

    pa, pb = np.triu_indices(B, k=1)  # lex order: argmin = smallest (a, b)
    start = time.monotonic()

    def norm_term(vec, pow_sum, ia, na, ib, nb):
        # p-norm after replacing entries ia -> na and ib -> nb
        if finite_p:
            s = pow_sum - vec[ia] ** p - vec[ib] ** p + na**p + nb**p
            return np.maximum(s, 0.0) ** (1.0 / p)
        top = np.argsort(vec)[-3:][::-1]  # top-3 covers two replaced entries
        others = np.full(na.shape, -np.inf)
        for tidx in top:
            tv = vec[tidx]
            m = (ia != tidx) & (ib != tidx)
            others = np.where(m & (others < tv), tv, others)
        return np.maximum(np.maximum(na, nb), others)

    def relaxed_of(s, r, c):
        return (
            coeffs.beta * _pnorm(s, p)
            + coeffs.gamma * _pnorm(r, p)
            + coeffs.delta * _pnorm(c, p)
        )

    history = [relaxed_of(send, recv, comp)]
    n_swaps = 0
    for _ in range(max_sweeps):
        if wall_time is not None and time.monotonic() - start > wall_time:
            break
        ka = W[pa]
        kb = W[pb]
        active = ka != kb
        if not active.any():
            break
        a = pa[active]
        b = pb[active]
        ka = ka[active]
        kb = kb[active]
        # After swapping a (ka->kb) and b (kb->ka):
        s_ka = send[ka] + mat[a, ka] - mat[b, ka]
        s_kb = send[kb] + mat[b, kb] - mat[a, kb]
        r_ka = recv[ka] + (rowsum[b] - mat[b, ka]) - (rowsum[a] - mat[a, ka])
        r_kb = recv[kb] + (rowsum[a] - mat[a, kb]) - (rowsum[b] - mat[b, kb])
        c_ka = comp[ka] + rowsum[b] - rowsum[a]
        c_kb = comp[kb] + rowsum[a] - rowsum[b]
        if finite_p:
            ps_send = float(np.power(send, p).sum())
            ps_recv = float(np.power(recv, p).sum())
            ps_comp = float(np.power(comp, p).sum())
        else:
            ps_send = ps_recv = ps_comp = 0.0
        val = (
            coeffs.beta * norm_term(send, ps_send, ka, s_ka, kb, s_kb)
            + coeffs.gamma * norm_term(recv, ps_recv, ka, r_ka, kb, r_kb)
            + coeffs.delta * norm_term(comp, ps_comp, ka, c_ka, kb, c_kb)
        )
        best = int(np.argmin(val))
        current = history[-1]
        scale = max(abs(current), 1.0)
        if val[best] >= current - 1e-12 * scale:
            break
        i, j = int(a[best]), int(b[best])
        wi, wj = W[i], W[j]
        send[wi] = s_ka[best]
        send[wj] = s_kb[best]
        recv[wi] = r_ka[best]
        recv[wj] = r_kb[best]
        comp[wi] = c_ka[best]
        comp[wj] = c_kb[best]
        W[i], W[j] = wj, wi
        history.append(relaxed_of(send, recv, comp))
        n_swaps += 1
    info = {"relaxed_history": history, "n_swaps": n_swaps}
    return PlacementSolution(W, N), info


def auto_coefficients(stats: ProfilerStats, p: float = 2.0) -> CostCoefficients:
    """Coefficients from profiled communication/compute shares.  The compute
    weight takes the compute time share; the communication share is split
    between send and receive caps by their recent peak volumes.  alpha is
    zero in the relaxed phase (the norm parameter p stands in for it)."""
    total = stats.t_comm + stats.t_comp
    delta = stats.t_comp / total
    comm_share = stats.t_comm / total
    vol = stats.max_recv + stats.max_send
    if vol == 0:
        beta = gamma = comm_share / 2.0
    else:
        beta = comm_share * stats.max_recv / vol
        gamma = comm_share * stats.max_send / vol
    return CostCoefficients(alpha=0.0, beta=beta, gamma=gamma, delta=delta, p=p)


def place(
    matrix: np.ndarray,
    coeffs: CostCoefficients,
    max_sweeps: int = 200,
    wall_time: float | None = None,
) -> PlacementSolution:
    """LSA initialization followed by local search on a flat GPU set."""
    B, N = np.asarray(matrix).shape
    if B % N != 0:
        raise ConstraintError(f"{N} GPUs must divide {B} patches")
    sol = lsa_assign(matrix, B // N)
    sol, _ = local_search(matrix, sol, coeffs, max_sweeps, wall_time)
    return sol


def hierarchical_place(
    matrix: np.ndarray,
    machines: int,
    gpus_per_machine: int,
    inter_coeffs: CostCoefficients | None = None,
    intra_coeffs: CostCoefficients | None = None,
    max_sweeps: int = 200,
    wall_time: float | None = None,
) -> PlacementSolution:
    """Assign patches to machines first, then to GPUs within each machine.

    The machine-level matrix sums each machine's GPU columns.  The intra
    level runs on the machine's local columns with communication-light
    coefficients (intra-node bandwidth is high, so compute balance wins).
    """
    matrix = np.asarray(matrix, dtype=np.int64)
    B, N = matrix.shape
    if N != machines * gpus_per_machine:
        raise ConstraintError(
            f"matrix has {N} GPU columns, topology has "
            f"{machines}x{gpus_per_machine}"
        )
    if B % machines != 0 or B % N != 0:
        raise ConstraintError(
            f"{B} patches must be divisible by machines ({machines}) and "
            f"GPUs ({N})"
        )
    inter = inter_coeffs if inter_coeffs is not None else CostCoefficients()
    intra = intra_coeffs if intra_coeffs is not None else intra_node_coefficients()

    if machines == 1:
        return place(matrix, inter, max_sweeps, wall_time)

    machine_matrix = matrix.reshape(B, machines, gpus_per_machine).sum(axis=2)
    msol = place(machine_matrix, inter, max_sweeps, wall_time)

    W = np.empty(B, dtype=np.int64)
    for m in range(machines):
        patches = np.flatnonzero(msol.assignment == m)
        local = matrix[np.ix_(patches, np.arange(N).reshape(machines, -1)[m])]
        if gpus_per_machine == 1:
            W[patches] = m
            continue
        lsol = place(local, intra, max_sweeps, wall_time)
        W[patches] = m * gpus_per_machine + lsol.assignment
    return PlacementSolution(W, N)


def _count_assignments(B: int, N: int, slots: int) -> int:
    total = 1
    remaining = B
    for _ in range(N):
        total *= math.comb(remaining, slots)
        remaining -= slots
    return total


def brute_force_optimal(
    matrix: np.ndarray, coeffs: CostCoefficients
) -> PlacementSolution:
    """Exhaustive minimizer of the exact objective over all equal-count
    assignments; ties resolve to the lexicographically smallest W."""
    matrix = np.asarray(matrix, dtype=np.int64)
    B, N = matrix.shape
    if B % N != 0:
        raise ConstraintError(f"{N} GPUs must divide {B} patches")
    slots = B // N
    n_assignments = _count_assignments(B, N, slots)
    if n_assignments > BRUTE_FORCE_GUARD:
        raise InstanceTooLargeError(
            f"{n_assignments} assignments exceed the {BRUTE_FORCE_GUARD} guard"
        )
    best_val = None
    best_W = None
    W = np.empty(B, dtype=np.int64)
    capacity = [slots] * N

    def recurse(j):
        nonlocal best_val, best_W
        if j == B:
            val = objective(matrix, PlacementSolution(W, N), coeffs).exact_value
            if best_val is None or val < best_val:
                best_val = val
                best_W = W.copy()
            return
        for k in range(N):  # ascending k => lexicographic enumeration
            if capacity[k] == 0:
                continue
            capacity[k] -= 1
            W[j] = k
            recurse(j + 1)
            capacity[k] += 1

    recurse(0)
    return PlacementSolution(best_W, N)


# ---------------------------------------------------------------------------
# trace-replay I/O


def save_solution_csv(solution: PlacementSolution, path: str) -> None:
    with open(path, "w") as f:
        f.write("patch_id,gpu\n")
        for j, k in enumerate(solution.assignment):
            f.write(f"{j},{int(k)}\n")


def save_breakdown_json(breakdown: ObjectiveBreakdown, path: str) -> None:
    with open(path, "w") as f:
        json.dump(breakdown.to_json(), f, indent=1, sort_keys=True)
