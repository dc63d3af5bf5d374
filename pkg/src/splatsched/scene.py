"""Synthetic scenes, camera trajectories and dataset file I/O.

Point clouds carry positions only (plus an optional per-point presence
interval for temporal workloads); the per-point transfer cost comes from a
WorkloadProfile instead of real splat attributes.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DatasetFormatError, DatasetVersionError, ParameterError

FORMAT_VERSION = "splatsched-v1"
POINTS_MAGIC = b"SSPC"

CULLING_SPATIAL = "spatial"
CULLING_SPATIOTEMPORAL = "spatiotemporal"


@dataclass(frozen=True)
class WorkloadProfile:
    """Per-point cost model of one rendering workload.

    splat_state_elements is the number of view-dependent elements exchanged
    per point; bytes_per_element converts counts to wire bytes.
    """

    name: str
    splat_state_elements: int
    bytes_per_element: int = 4
    culling_mode: str = CULLING_SPATIAL

    def __post_init__(self):
        if self.splat_state_elements <= 0:
            raise ParameterError("splat_state_elements must be positive")
        if self.bytes_per_element <= 0:
            raise ParameterError("bytes_per_element must be positive")
        if self.culling_mode not in (CULLING_SPATIAL, CULLING_SPATIOTEMPORAL):
            raise ParameterError(f"unknown culling_mode {self.culling_mode!r}")

    @property
    def bytes_per_point(self) -> int:
        return self.splat_state_elements * self.bytes_per_element

    @property
    def temporal(self) -> bool:
        return self.culling_mode == CULLING_SPATIOTEMPORAL


# Built-in profiles: 11/20/29 view-dependent elements of 4 bytes each.
PROFILE_3DGS = WorkloadProfile("3dgs", 11)
PROFILE_2DGS = WorkloadProfile("2dgs", 20)
PROFILE_3DCX = WorkloadProfile("3dcx", 29)
# The temporal variant reuses the 3DGS-sized view-dependent state but culls
# on presence intervals as well.
PROFILE_4DGS = WorkloadProfile("4dgs", 11, culling_mode=CULLING_SPATIOTEMPORAL)

BUILTIN_PROFILES = {
    p.name: p for p in (PROFILE_3DGS, PROFILE_2DGS, PROFILE_3DCX, PROFILE_4DGS)
}


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ParameterError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class PointCloud:
    """Positions (n, 3) float32, optional presence intervals (n, 2) float32."""

    positions: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ParameterError("positions must have shape (n, 3)")
        if len(self.positions) == 0:
            raise ParameterError("point cloud must be non-empty")
        if not np.isfinite(self.positions).all():
            raise ParameterError("positions must be finite")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float32)
            if self.timestamps.shape != (len(self.positions), 2):
                raise ParameterError("timestamps must have shape (n, 2)")
            if (self.timestamps[:, 0] > self.timestamps[:, 1]).any():
                raise ParameterError("presence intervals need t_start <= t_end")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def bbox(self) -> np.ndarray:
        """(2, 3) array [min_xyz; max_xyz] over all points."""
        return np.stack([self.positions.min(axis=0), self.positions.max(axis=0)])

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if not np.array_equal(self.positions, other.positions):
            return False
        if (self.timestamps is None) != (other.timestamps is None):
            return False
        if self.timestamps is not None:
            return np.array_equal(self.timestamps, other.timestamps)
        return True


@dataclass
class CameraView:
    """Pinhole camera: +x right, +y down, +z forward in camera frame.

    rotation maps camera-frame vectors to world-frame.
    """

    id: int
    position: np.ndarray
    rotation: np.ndarray
    fov_x: float
    fov_y: float
    near: float
    far: float
    width: int
    height: int
    time: float | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.position.shape != (3,):
            raise ParameterError("camera position must have shape (3,)")
        if self.rotation.shape != (3, 3):
            raise ParameterError("camera rotation must have shape (3, 3)")
        if not (0 < self.near < self.far):
            raise ParameterError("camera needs 0 < near < far")
        if not (0 < self.fov_x < math.pi and 0 < self.fov_y < math.pi):
            raise ParameterError("fov must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ParameterError("image size must be >= 1 pixel")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ParameterError(f"rotation not orthonormal (error {err:g})")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def __eq__(self, other):
        if not isinstance(other, CameraView):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.rotation, other.rotation)
            and self.fov_x == other.fov_x
            and self.fov_y == other.fov_y
            and self.near == other.near
            and self.far == other.far
            and self.width == other.width
            and self.height == other.height
            and self.time == other.time
        )


@dataclass
class SceneDataset:
    cloud: PointCloud
    views: list[CameraView]
    profile: WorkloadProfile

    def __post_init__(self):
        ids = [v.id for v in self.views]
        if ids != list(range(len(ids))):
            raise ParameterError("view ids must be unique and contiguous from 0")
        if self.profile.temporal:
            if self.cloud.timestamps is None:
                raise ParameterError("spatio-temporal profile requires timestamps")
            if any(v.time is None for v in self.views):
                raise ParameterError("spatio-temporal profile requires view times")

    def __eq__(self, other):
        if not isinstance(other, SceneDataset):
            return NotImplemented
        return (
            self.cloud == other.cloud
            and self.views == other.views
            and self.profile == other.profile
        )


# ---------------------------------------------------------------------------
# generators


def _point_rng(seed: int) -> np.random.Generator:
    # Points and views are drawn from independent streams so that changing
    # n_views never perturbs the point cloud.
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0]))


def _view_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1]))


def _look_down_rotation() -> np.ndarray:
    # right = +x, image-down = -y (so world north is image up), forward = -z
    return np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


def _heading_rotation(direction: np.ndarray) -> np.ndarray:
    """Camera looking along `direction` with world +z up."""
    fwd = np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ParameterError("camera heading must be non-zero")
    fwd = fwd / n
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / rn
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)
    # Re-orthonormalize so the strict orthonormality check passes.
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _serpentine_centers(rows: int, cols: int, cell_x: float, cell_y: float):
    centers = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        for c in cs:
            centers.append([(c + 0.5) * cell_x, (r + 0.5) * cell_y])
    return np.array(centers)


def _resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """n positions evenly spaced by arclength along a polyline."""
    if n == 1:
        return points[:1].copy()
    seg = np.diff(points, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if total == 0:
        return np.repeat(points[:1], n, axis=0)
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, points.shape[1]))
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    t = (targets - cum[idx]) / np.where(seglen[idx] == 0, 1.0, seglen[idx])
    out = points[idx] + t[:, None] * seg[idx]
    return out


def _draw_presence_intervals(rng: np.random.Generator, n: int, duration: float):
    # Uniform intervals with mean length 20% of the scene duration.
    length = rng.uniform(0.0, 0.4 * duration, n)
    start = rng.uniform(0.0, 1.0, n) * (duration - length)
    return np.stack([start, start + length], axis=1).astype(np.float32)


def generate_aerial_scene(
    seed: int,
    n_points: int,
    grid: tuple[int, int] = (4, 4),
    n_views: int = 16,
    altitude: float = 50.0,
    image_size: tuple[int, int] = (256, 256),
    fov: float | None = None,
    duration: float | None = None,
) -> SceneDataset:
    """Downward-facing cameras on a serpentine grid over a noisy ground plane.

    If `duration` is given the scene becomes temporal: points get presence
    intervals and views get timestamps spread over [0, duration].
    """
    rows, cols = grid
    if n_points < 1:
        raise ParameterError("n_points must be >= 1")
    if n_views < 1:
        raise ParameterError("n_views must be >= 1")
    if altitude <= 0:
        raise ParameterError("altitude must be > 0")
    if rows < 1 or cols < 1:
        raise ParameterError("grid dimensions must be >= 1")

    prng = _point_rng(seed)
    fov = 2.0 * math.atan(0.6) if fov is None else float(fov)
    cell = float(altitude)  # grid cell edge; frustum footprint slightly larger

    # Per-cell density noise, then uniform positions within each cell.
    mult = prng.uniform(0.5, 1.5, size=rows * cols)
    counts = prng.multinomial(n_points, mult / mult.sum())
    xs, ys = [], []
    k = 0
    for r in range(rows):
        for c in range(cols):
            m = counts[k]
            xs.append(prng.uniform(c * cell, (c + 1) * cell, m))
            ys.append(prng.uniform(r * cell, (r + 1) * cell, m))
            k += 1
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    z = prng.uniform(0.0, 0.02 * altitude, n_points)
    positions = np.stack([x, y, z], axis=1).astype(np.float32)

    timestamps = None
    profile = PROFILE_3DGS
    if duration is not None:
        if duration <= 0:
            raise ParameterError("duration must be > 0")
        timestamps = _draw_presence_intervals(prng, n_points, float(duration))
        profile = PROFILE_4DGS

    centers = _serpentine_centers(rows, cols, cell, cell)
    path = _resample_polyline(centers, n_views)
    rot = _look_down_rotation()
    width, height = image_size
    views = []
    view_times = (
        np.linspace(0.0, float(duration), n_views) if duration is not None else None
    )
    for i in range(n_views):
        views.append(
            CameraView(
                id=i,
                position=np.array([path[i, 0], path[i, 1], altitude]),
                rotation=rot,
                fov_x=fov,
                fov_y=fov,
                near=0.05 * altitude,
                far=4.0 * altitude,
                width=width,
                height=height,
                time=float(view_times[i]) if view_times is not None else None,
            )
        )
    return SceneDataset(PointCloud(positions, timestamps), views, profile)


def generate_street_scene(
    seed: int,
    n_points: int,
    trajectory_waypoints,
    n_views: int,
    corridor_radius: float = 8.0,
    background_fraction: float = 0.05,
    image_size: tuple[int, int] = (256, 256),
    far_scale: float = 0.12,
    duration: float | None = None,
) -> SceneDataset:
    """Corridor of points around a polyline plus sparse distant background.

    Cameras sit on the polyline and face the direction of travel.  The far
    plane covers `far_scale` of the trajectory length plus the background
    shell, so frusta span both nearby corridor content and distant
    background points; trajectories with turns keep most corridor access
    local the way building occlusion would in a real capture.
    """
    wps = np.asarray(
        [p.as_array() if isinstance(p, Point3) else np.asarray(p, dtype=np.float64)
         for p in trajectory_waypoints]
    )
    if wps.ndim != 2 or wps.shape[1] != 3 or len(wps) < 2:
        raise ParameterError("need at least 2 waypoints of shape (3,)")
    if n_points < 1:
        raise ParameterError("n_points must be >= 1")
    if n_views < 1:
        raise ParameterError("n_views must be >= 1")
    if not (0.0 <= background_fraction < 1.0):
        raise ParameterError("background_fraction must be in [0, 1)")

    prng = _point_rng(seed)
    seg = np.diff(wps, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    total_len = seglen.sum()
    if total_len == 0:
        raise ParameterError("trajectory has zero length")

    n_bg = int(round(background_fraction * n_points))
    n_corr = n_points - n_bg

    # Corridor points: length-weighted segment choice, gaussian lateral offset.
    sidx = prng.choice(len(seg), size=n_corr, p=seglen / total_len)
    t = prng.uniform(0.0, 1.0, n_corr)
    base = wps[sidx] + t[:, None] * seg[sidx]
    dirs = seg[sidx] / seglen[sidx][:, None]
    up = np.array([0.0, 0.0, 1.0])
    side = np.cross(dirs, up)
    sn = np.linalg.norm(side, axis=1, keepdims=True)
    side = side / np.where(sn < 1e-12, 1.0, sn)
    side[sn[:, 0] < 1e-12] = [1.0, 0.0, 0.0]
    lat = prng.normal(0.0, corridor_radius / 2.5, n_corr)
    vert = np.abs(prng.normal(0.0, corridor_radius / 5.0, n_corr))
    corr = base + lat[:, None] * side + vert[:, None] * up

    # Background: a distant shell around the trajectory.
    center = wps.mean(axis=0)
    theta = prng.uniform(0.0, 2.0 * math.pi, n_bg)
    rad = 0.15 * total_len + prng.uniform(10.0, 30.0, n_bg) * corridor_radius
    bz = prng.uniform(0.0, 10.0 * corridor_radius, n_bg)
    bg = np.stack(
        [center[0] + rad * np.cos(theta), center[1] + rad * np.sin(theta), bz], axis=1
    )
    positions = np.concatenate([corr, bg]).astype(np.float32)

    timestamps = None
    profile = PROFILE_3DGS
    if duration is not None:
        if duration <= 0:
            raise ParameterError("duration must be > 0")
        timestamps = _draw_presence_intervals(prng, n_points, float(duration))
        profile = PROFILE_4DGS

    cam_pos = _resample_polyline(wps, n_views)
    far = far_scale * total_len + 30.0 * corridor_radius
    width, height = image_size
    view_times = (
        np.linspace(0.0, float(duration), n_views) if duration is not None else None
    )
    views = []
    for i in range(n_views):
        # Heading from the local tangent of the resampled path.
        j = min(i + 1, n_views - 1)
        h = cam_pos[j] - cam_pos[i] if j != i else cam_pos[i] - cam_pos[i - 1]
        if np.linalg.norm(h) < 1e-12:
            h = seg[0]
        views.append(
            CameraView(
                id=i,
                position=cam_pos[i],
                rotation=_heading_rotation(h),
                fov_x=1.2,
                fov_y=1.2,
                near=0.5,
                far=far,
                width=width,
                height=height,
                time=float(view_times[i]) if view_times is not None else None,
            )
        )
    return SceneDataset(PointCloud(positions, timestamps), views, profile)


# ---------------------------------------------------------------------------
# dataset file format

HEADER_NAME = "dataset.json"
POINTS_NAME = "points.bin"


def _view_to_json(v: CameraView) -> dict:
    return {
        "id": v.id,
        "position": [float(c) for c in v.position],
        "rotation": [float(c) for c in v.rotation.reshape(-1)],
        "fov_x": v.fov_x,
        "fov_y": v.fov_y,
        "near": v.near,
        "far": v.far,
        "width": v.width,
        "height": v.height,
        "time": v.time,
    }


def _view_from_json(d: dict) -> CameraView:
    return CameraView(
        id=int(d["id"]),
        position=np.array(d["position"], dtype=np.float64),
        rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
        fov_x=float(d["fov_x"]),
        fov_y=float(d["fov_y"]),
        near=float(d["near"]),
        far=float(d["far"]),
        width=int(d["width"]),
        height=int(d["height"]),
        time=None if d.get("time") is None else float(d["time"]),
    )


def save_dataset(dataset: SceneDataset, path: str) -> None:
    """Write dataset.json + points.bin into directory `path`."""
    os.makedirs(path, exist_ok=True)
    temporal = dataset.cloud.timestamps is not None
    header = {
        "version": FORMAT_VERSION,
        "profile": {
            "name": dataset.profile.name,
            "splat_state_elements": dataset.profile.splat_state_elements,
            "bytes_per_element": dataset.profile.bytes_per_element,
            "culling_mode": dataset.profile.culling_mode,
        },
        "n_points": len(dataset.cloud),
        "temporal": temporal,
        "points_file": POINTS_NAME,
        "views": [_view_to_json(v) for v in dataset.views],
    }
    with open(os.path.join(path, HEADER_NAME), "w") as f:
        json.dump(header, f, indent=1, sort_keys=True)
    with open(os.path.join(path, POINTS_NAME), "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<I", len(dataset.cloud)))
        f.write(dataset.cloud.positions.astype("<f4").tobytes())
        if temporal:
            f.write(dataset.cloud.timestamps.astype("<f4").tobytes())


def load_dataset(path: str) -> SceneDataset:
    """Read a dataset written by save_dataset from directory `path`."""
    header_path = os.path.join(path, HEADER_NAME)
    try:
        with open(header_path) as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"invalid JSON header: {e.msg}", e.pos) from e
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported dataset version {version!r}, expected {FORMAT_VERSION!r}"
        )
    prof = header["profile"]
    profile = WorkloadProfile(
        name=prof["name"],
        splat_state_elements=int(prof["splat_state_elements"]),
        bytes_per_element=int(prof["bytes_per_element"]),
        culling_mode=prof["culling_mode"],
    )
    n = int(header["n_points"])
    temporal = bool(header["temporal"])

    bin_path = os.path.join(path, header.get("points_file", POINTS_NAME))
    with open(bin_path, "rb") as f:
        blob = f.read()
    if blob[:4] != POINTS_MAGIC:
        raise DatasetFormatError("bad magic bytes in points file", 0)
    if len(blob) < 8:
        raise DatasetFormatError("points file truncated in header", len(blob))
    (count,) = struct.unpack_from("<I", blob, 4)
    if count != n:
        raise DatasetFormatError(
            f"point count {count} disagrees with header ({n})", 4
        )
    expected = 8 + count * 12 + (count * 8 if temporal else 0)
    if len(blob) != expected:
        raise DatasetFormatError(
            f"points file has {len(blob)} bytes, expected {expected}",
            min(len(blob), expected),
        )
    positions = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=8)
    positions = positions.reshape(count, 3).copy()
    timestamps = None
    if temporal:
        timestamps = np.frombuffer(
            blob, dtype="<f4", count=count * 2, offset=8 + count * 12
        ).reshape(count, 2).copy()
    views = [_view_from_json(d) for d in header["views"]]
    return SceneDataset(PointCloud(positions, timestamps), views, profile)
