"""Z-order grouping, frustum construction and culling, access-matrix build.

The access matrix counts, for every image patch in a batch and every GPU,
how many in-frustum points that patch needs from that GPU.  Patch frusta use
half-open pixel rectangles so a view's in-frustum points are partitioned
exactly across its patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConsistencyError, ParameterError
from .scene import CameraView, PointCloud

OUTSIDE = "outside"
INTERSECTING = "intersecting"

EXACT = "exact"
GROUP_APPROX = "group_approx"

DEFAULT_GROUP_SIZE = 2048
DEFAULT_BITS_PER_AXIS = 21


# ---------------------------------------------------------------------------
# Morton codes


def _quantize(coords: np.ndarray, bbox: np.ndarray, bits: int) -> np.ndarray:
    """Quantize (n, 3) coords into [0, 2^bits - 1] per axis."""
    mn = bbox[0].astype(np.float64)
    extent = bbox[1].astype(np.float64) - mn
    extent = np.where(extent == 0, 1.0, extent)
    scale = float(2**bits - 1)
    q = np.floor((coords.astype(np.float64) - mn) / extent * scale)
    return np.clip(q, 0, scale).astype(np.uint64)


def _interleave3(q: np.ndarray, bits: int) -> np.ndarray:
    """Interleave quantized (n, 3) ints: x bits at 0,3,6..., y at 1,4..., z at 2,5..."""
    codes = np.zeros(len(q), dtype=np.uint64)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    for b in range(bits):
        bit = np.uint64(b)
        codes |= ((x >> bit) & np.uint64(1)) << np.uint64(3 * b)
        codes |= ((y >> bit) & np.uint64(1)) << np.uint64(3 * b + 1)
        codes |= ((z >> bit) & np.uint64(1)) << np.uint64(3 * b + 2)
    return codes


def morton_codes(
    positions: np.ndarray, bbox: np.ndarray, bits_per_axis: int = DEFAULT_BITS_PER_AXIS
) -> np.ndarray:
    """Z-order codes for (n, 3) positions inside bbox (clamped on boundary)."""
    if not (1 <= bits_per_axis <= 21):
        raise ParameterError("bits_per_axis must be in [1, 21]")
    q = _quantize(np.atleast_2d(positions), np.asarray(bbox), bits_per_axis)
    return _interleave3(q, bits_per_axis)


def morton_code(point, bbox, bits_per_axis: int = DEFAULT_BITS_PER_AXIS) -> int:
    """Z-order code of a single point (x, y, z)."""
    p = np.asarray(
        point.as_array() if hasattr(point, "as_array") else point, dtype=np.float64
    )
    return int(morton_codes(p.reshape(1, 3), bbox, bits_per_axis)[0])


# ---------------------------------------------------------------------------
# grouping


@dataclass(frozen=True)
class PointGroup:
    group_id: int
    begin: int
    end: int
    aabb: np.ndarray  # (2, 3): [min; max]

    @property
    def size(self) -> int:
        return self.end - self.begin


@dataclass
class GroupedCloud:
    """Z-order-sorted cloud plus contiguous groups of at most G points.

    sorted_cloud[i] == original_cloud[permutation[i]].
    """

    sorted_cloud: PointCloud
    permutation: np.ndarray
    groups: list[PointGroup]
    group_size: int

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of_point(self) -> np.ndarray:
        """(n,) group id per sorted point index."""
        out = np.empty(len(self.sorted_cloud), dtype=np.int64)
        for g in self.groups:
            out[g.begin : g.end] = g.group_id
        return out


def zorder_group(
    cloud: PointCloud,
    G: int = DEFAULT_GROUP_SIZE,
    bits_per_axis: int = DEFAULT_BITS_PER_AXIS,
) -> GroupedCloud:
    """Sort by Morton code (stable; ties keep original order) and tile into groups."""
    if G < 1:
        raise ParameterError("group size G must be >= 1")
    codes = morton_codes(cloud.positions, cloud.bbox, bits_per_axis)
    perm = np.argsort(codes, kind="stable")
    sorted_cloud = PointCloud(
        cloud.positions[perm],
        None if cloud.timestamps is None else cloud.timestamps[perm],
    )
    n = len(cloud)
    groups = []
    for gid, begin in enumerate(range(0, n, G)):
        end = min(begin + G, n)
        block = sorted_cloud.positions[begin:end]
        aabb = np.stack([block.min(axis=0), block.max(axis=0)])
        groups.append(PointGroup(gid, begin, end, aabb))
    return GroupedCloud(sorted_cloud, perm, groups, G)


# ---------------------------------------------------------------------------
# frusta


@dataclass
class Frustum:
    """Six planes (near, far, left, right, top, bottom) as (n, offset) rows.

    Inside means signed distance n.p + offset >= 0 for inclusive planes and
    > 0 for exclusive ones.  The right/bottom planes of patch frusta are
    exclusive so adjacent patches partition the image plane exactly.
    """

    planes: np.ndarray  # (6, 4)
    inclusive: np.ndarray  # (6,) bool

    def signed_distances(self, positions: np.ndarray) -> np.ndarray:
        """(n, 6) signed distances of (n, 3) positions to all planes."""
        p = np.atleast_2d(positions).astype(np.float64)
        return p @ self.planes[:, :3].T + self.planes[:, 3]

    def contains(self, positions: np.ndarray) -> np.ndarray:
        d = self.signed_distances(positions)
        ok = np.where(self.inclusive, d >= 0.0, d > 0.0)
        return ok.all(axis=1)


def _patch_edges(extent: int, P: int) -> list[int]:
    return [(c * extent) // P for c in range(P)] + [extent]


def frustum_from_view(view: CameraView, patch=None) -> Frustum:
    """Frustum of a camera view, optionally restricted to a pixel rectangle.

    `patch` is (x0, y0, x1, y1) in pixels, half-open.  Adjacent patches that
    share an edge coordinate produce exactly negated side planes, which makes
    the per-patch point sets a partition of the view's point set.
    """
    if patch is None:
        patch = (0, 0, view.width, view.height)
    x0, y0, x1, y1 = patch
    if not (0 <= x0 < x1 <= view.width and 0 <= y0 < y1 <= view.height):
        raise ParameterError(f"patch rectangle {patch} invalid for "
                             f"{view.width}x{view.height} image")

    tan_x = math.tan(view.fov_x / 2.0)
    tan_y = math.tan(view.fov_y / 2.0)

    def slope_x(px):
        return (2.0 * px / view.width - 1.0) * tan_x

    def slope_y(py):
        return (2.0 * py / view.height - 1.0) * tan_y

    def unit(v):
        return v / np.linalg.norm(v)

    # Camera-frame plane normals; min-side planes are inward-positive and the
    # max-side planes are their exact negations at the shared edge slope.
    def edge_x(px):
        return unit(np.array([1.0, 0.0, -slope_x(px)]))

    def edge_y(py):
        return unit(np.array([0.0, 1.0, -slope_y(py)]))

    cam_planes = [
        (np.array([0.0, 0.0, 1.0]), -view.near, True),  # near
        (np.array([0.0, 0.0, -1.0]), view.far, True),  # far
        (edge_x(x0), 0.0, True),  # left
        (-edge_x(x1), 0.0, False),  # right (exclusive)
        (edge_y(y0), 0.0, True),  # top
        (-edge_y(y1), 0.0, False),  # bottom (exclusive)
    ]
    planes = np.empty((6, 4))
    inclusive = np.empty(6, dtype=bool)
    for i, (n_cam, c_cam, inc) in enumerate(cam_planes):
        n_world = view.rotation @ n_cam
        planes[i, :3] = n_world
        planes[i, 3] = c_cam - n_world @ view.position
        inclusive[i] = inc
    return Frustum(planes, inclusive)


def patch_frusta(view: CameraView, P: int) -> list[Frustum]:
    """P*P patch frusta in row-major (patch_row, patch_col) order."""
    if P < 1:
        raise ParameterError("patch factor P must be >= 1")
    xs = _patch_edges(view.width, P)
    ys = _patch_edges(view.height, P)
    out = []
    for r in range(P):
        for c in range(P):
            out.append(frustum_from_view(view, (xs[c], ys[r], xs[c + 1], ys[r + 1])))
    return out


# ---------------------------------------------------------------------------
# culling


def cull_points(
    frustum: Frustum,
    positions: np.ndarray,
    view_time: float | None = None,
    presence: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean visibility mask for (n, 3) positions; temporal if args given."""
    if (view_time is None) != (presence is None):
        raise ConfigurationError(
            "view_time and presence intervals must be supplied together"
        )
    mask = frustum.contains(positions)
    if view_time is not None:
        presence = np.atleast_2d(presence)
        mask &= (presence[:, 0] <= view_time) & (view_time <= presence[:, 1])
    return mask


def cull_point(frustum, point, view_time=None, presence=None) -> bool:
    p = np.asarray(
        point.as_array() if hasattr(point, "as_array") else point, dtype=np.float64
    ).reshape(1, 3)
    pres = None if presence is None else np.asarray(presence).reshape(1, 2)
    return bool(cull_points(frustum, p, view_time, pres)[0])


def cull_group(frustum: Frustum, aabb: np.ndarray) -> str:
    """Conservative AABB test: OUTSIDE only if some single plane rejects all
    8 corners strictly; never OUTSIDE for a box containing a visible point."""
    aabb = np.asarray(aabb, dtype=np.float64)
    if (aabb[0] > aabb[1]).any():
        raise ParameterError("AABB must have min <= max per axis")
    corners = np.array(
        [[aabb[i, 0], aabb[j, 1], aabb[k, 2]]
         for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    )
    d = frustum.signed_distances(corners)  # (8, 6)
    if (d < 0.0).all(axis=0).any():
        return OUTSIDE
    return INTERSECTING


# ---------------------------------------------------------------------------
# access matrix


def _candidate_indices(grouped: GroupedCloud, frustum: Frustum) -> np.ndarray:
    """Sorted-cloud indices of all groups not culled by the AABB test."""
    ranges = [
        (g.begin, g.end)
        for g in grouped.groups
        if cull_group(frustum, g.aabb) == INTERSECTING
    ]
    if not ranges:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([np.arange(b, e, dtype=np.int64) for b, e in ranges])


def point_gpu_from_partition(grouped: GroupedCloud, partition) -> np.ndarray:
    """(n,) flat GPU index per sorted point, expanded from a group partition."""
    if partition.n_groups != grouped.n_groups:
        raise ConsistencyError(
            f"partition covers {partition.n_groups} groups, "
            f"cloud has {grouped.n_groups}"
        )
    out = np.empty(len(grouped.sorted_cloud), dtype=np.int64)
    for g in grouped.groups:
        out[g.begin : g.end] = partition.flat_gpu(g.group_id)
    return out


def build_access_matrix(
    grouped: GroupedCloud,
    partition,
    batch: list[CameraView],
    P: int = 1,
    granularity: str = EXACT,
    temporal: bool = False,
) -> np.ndarray:
    """(B*P*P, N) matrix of in-frustum point counts per patch and GPU.

    Row index = view_position_in_batch * P^2 + patch_row * P + patch_col.
    `partition` may be a PartitionAssignment or a precomputed (n,) array of
    per-sorted-point GPU ids (the latter supports non-group-aligned baselines).
    """
    if isinstance(partition, np.ndarray):
        point_gpu = partition.astype(np.int64)
        if len(point_gpu) != len(grouped.sorted_cloud):
            raise ConsistencyError("per-point GPU array length mismatch")
        n_gpus = int(point_gpu.max()) + 1 if len(point_gpu) else 1
    else:
        point_gpu = point_gpu_from_partition(grouped, partition)
        n_gpus = partition.n_gpus
    if granularity not in (EXACT, GROUP_APPROX):
        raise ParameterError(f"unknown granularity {granularity!r}")

    cloud = grouped.sorted_cloud
    if temporal and cloud.timestamps is None:
        raise ConfigurationError("temporal culling requested without timestamps")

    rows = []
    for view in batch:
        if temporal and view.time is None:
            raise ConfigurationError(f"view {view.id} lacks a timestamp")
        for fr in patch_frusta(view, P):
            idx = _candidate_indices(grouped, fr)
            counts = np.zeros(n_gpus, dtype=np.int64)
            if len(idx):
                if granularity == EXACT:
                    vis = cull_points(
                        fr,
                        cloud.positions[idx],
                        view.time if temporal else None,
                        cloud.timestamps[idx] if temporal else None,
                    )
                    sel = idx[vis]
                else:
                    sel = idx
                if len(sel):
                    counts = np.bincount(point_gpu[sel], minlength=n_gpus)
            rows.append(counts)
    return np.stack(rows).astype(np.int64)


def save_access_matrix_csv(matrix: np.ndarray, path: str) -> None:
    n = matrix.shape[1]
    header = "patch_id," + ",".join(f"gpu_{k}" for k in range(n))
    with open(path, "w") as f:
        f.write(header + "\n")
        for j, row in enumerate(matrix):
            f.write(str(j) + "," + ",".join(str(int(v)) for v in row) + "\n")


def load_access_matrix_csv(path: str) -> np.ndarray:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("patch_id,"):
        raise ParameterError(f"{path} is not an access-matrix CSV")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append([int(v) for v in parts[1:]])
    return np.array(rows, dtype=np.int64)
