"""Ray-cast visibility grids and the auxiliary visibility forecast."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .densegrid import ClassInfo, SemanticVoxelGrid, grid_centroids
from .sparse4d import CameraIntrinsics, PointCloudFrame, Sequence

OCCLUDED = 0
VISIBLE_EMPTY = 1
SURFACE = 2

VISIBILITY_CLASSES = [ClassInfo("occluded_or_unknown"), ClassInfo("visible_empty"), ClassInfo("surface")]


@dataclass
class GridSpec:
    extents: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.extents = tuple(int(v) for v in self.extents)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if min(self.extents) < 1 or self.voxel_size <= 0:
            raise ValueError(f"invalid grid spec {self}")

    @classmethod
    def of(cls, grid) -> "GridSpec":
        return cls(tuple(grid.extents), grid.voxel_size, np.array(grid.origin))


@dataclass
class VisibilityGrid:
    labels: np.ndarray  # (X, Y, Z) in {OCCLUDED, VISIBLE_EMPTY, SURFACE}
    voxel_size: float
    origin: np.ndarray
    n_skipped: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int16)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.labels.ndim != 3:
            raise ValueError("labels must be (X, Y, Z)")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > SURFACE):
            raise ValueError("visibility labels must be occluded, visible-empty or surface")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.extents, self.voxel_size, self.origin)

    def to_semantic(self) -> SemanticVoxelGrid:
        return SemanticVoxelGrid(self.labels, self.voxel_size, self.origin, VISIBILITY_CLASSES)

    @classmethod
    def from_semantic(cls, grid: SemanticVoxelGrid) -> "VisibilityGrid":
        if [c.name for c in grid.classes] != [c.name for c in VISIBILITY_CLASSES]:
            raise ValueError("grid does not carry the 3-class visibility table")
        return cls(grid.labels, grid.voxel_size, grid.origin)

    def structurally_equal(self, other: "VisibilityGrid") -> bool:
        return self.to_semantic().structurally_equal(other.to_semantic())


@numba.njit(cache=True)
def _cast_rays(cam, pts, origin, vs, ext, visible, surface):
    skipped = 0
    s = (cam - origin) / vs
    for p in range(pts.shape[0]):
        e = (pts[p] - origin) / vs
        d = e - s
        if d[0] == 0.0 and d[1] == 0.0 and d[2] == 0.0:
            skipped += 1
            continue
        inside = True
        for a in range(3):
            if not (0.0 <= e[a] < ext[a]):
                inside = False
        if inside:
            surface[int(np.floor(e[0])), int(np.floor(e[1])), int(np.floor(e[2]))] = True
        # clip the segment to the grid box [0, ext]
        t0 = 0.0
        t1 = 1.0
        miss = False
        for a in range(3):
            if d[a] == 0.0:
                if s[a] < 0.0 or s[a] > ext[a]:
                    miss = True
            else:
                ta = (0.0 - s[a]) / d[a]
                tb = (ext[a] - s[a]) / d[a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if miss or t0 >= t1:
            continue
        idx = np.empty(3, np.int64)
        step = np.empty(3, np.int64)
        tmax = np.empty(3)
        tdelta = np.empty(3)
        for a in range(3):
            pa = s[a] + t0 * d[a]
            i = int(np.floor(pa))
            if d[a] < 0.0 and pa == np.floor(pa):
                i -= 1
            i = min(max(i, 0), ext[a] - 1)
            idx[a] = i
            if d[a] > 0.0:
                step[a] = 1
                tmax[a] = (i + 1 - s[a]) / d[a]
                tdelta[a] = 1.0 / d[a]
            elif d[a] < 0.0:
                step[a] = -1
                tmax[a] = (i - s[a]) / d[a]
                tdelta[a] = -1.0 / d[a]
            else:
                step[a] = 0
                tmax[a] = np.inf
                tdelta[a] = np.inf
        while True:
            visible[idx[0], idx[1], idx[2]] = True
            a = 0
            if tmax[1] < tmax[a]:
                a = 1
            if tmax[2] < tmax[a]:
                a = 2
            if tmax[a] >= t1:
                break
            idx[a] += step[a]
            if idx[a] < 0 or idx[a] >= ext[a]:
                break
            tmax[a] += tdelta[a]
    return skipped


def compute_visibility_grid(frame: PointCloudFrame, pose, intrinsics: CameraIntrinsics | None, spec: GridSpec) -> VisibilityGrid:
    """Label voxels crossed by camera-to-point segments visible-empty and hit voxels surface.

    Segments are clipped to the grid box and traversed voxel by voxel; surface
    wins over visible-empty; everything else is occluded-or-unknown. Points at
    the camera center are skipped and counted.
    """
    cam = np.asarray(pose, dtype=np.float64)[:3, 3].copy()
    ext = np.array(spec.extents, dtype=np.int64)
    visible = np.zeros(spec.extents, dtype=np.bool_)
    surface = np.zeros(spec.extents, dtype=np.bool_)
    pts = np.ascontiguousarray(frame.coords, dtype=np.float64)
    skipped = 0
    if len(pts):
        skipped = _cast_rays(cam, pts, spec.origin.copy(), float(spec.voxel_size), ext, visible, surface)
    labels = np.full(spec.extents, OCCLUDED, dtype=np.int16)
    labels[visible] = VISIBLE_EMPTY
    labels[surface] = SURFACE
    return VisibilityGrid(labels, spec.voxel_size, spec.origin, int(skipped))


def merge_visibility(grids: list[VisibilityGrid], poses=None) -> VisibilityGrid:
    """Combine per-frame grids; the last grid is the latest frame.

    Visible-empty anywhere counts unless the latest frame sees a surface
    there; the latest frame's surfaces dominate.
    """
    if not grids:
        raise ValueError("nothing to merge")
    if poses is not None and len(poses) != len(grids):
        raise ValueError("one pose per grid required")
    ref = grids[0].spec
    for g in grids[1:]:
        if g.extents != ref.extents or not np.isclose(g.voxel_size, ref.voxel_size) or not np.allclose(g.origin, ref.origin):
            raise ValueError("visibility grids disagree on geometry")
    any_visible = np.zeros(ref.extents, dtype=bool)
    for g in grids:
        any_visible |= g.labels == VISIBLE_EMPTY
    latest_surface = grids[-1].labels == SURFACE
    labels = np.full(ref.extents, OCCLUDED, dtype=np.int16)
    labels[any_visible] = VISIBLE_EMPTY
    labels[latest_surface] = SURFACE
    return VisibilityGrid(labels, ref.voxel_size, ref.origin)


def visibility_frame(grid: VisibilityGrid, timestamp: int) -> PointCloudFrame:
    """Single-channel point cloud at the centroids of visible-empty voxels."""
    cents = grid_centroids(grid.extents, grid.voxel_size, grid.origin)
    sel = (grid.labels == VISIBLE_EMPTY).reshape(-1)
    return PointCloudFrame(cents[sel], np.ones((int(sel.sum()), 1)), timestamp)


def visibility_sequence(grids: list[VisibilityGrid], timestamps=None) -> Sequence:
    """Input sequence for the binary visibility model built from past grids."""
    if timestamps is None:
        timestamps = list(range(len(grids)))
    return Sequence([visibility_frame(g, t) for g, t in zip(grids, timestamps)])


def binary_to_visibility(grid: SemanticVoxelGrid) -> VisibilityGrid:
    """Map binary labels (1 = visible-empty) into a three-way grid."""
    labels = np.where(grid.labels == 1, VISIBLE_EMPTY, OCCLUDED).astype(np.int16)
    return VisibilityGrid(labels, grid.voxel_size, grid.origin)


def visibility_to_binary(grid: VisibilityGrid) -> SemanticVoxelGrid:
    from .network import BINARY_CLASSES

    labels = (grid.labels == VISIBLE_EMPTY).astype(np.int16)
    return SemanticVoxelGrid(labels, grid.voxel_size, grid.origin, BINARY_CLASSES)


def forecast_visibility(vis_model, past: list[VisibilityGrid], spec: GridSpec | None = None) -> VisibilityGrid:
    """Forecast the next frame's visible-empty voxels from past visibility grids."""
    from .network import forward
    from .implicitfield import render_high_res

    spec = spec or past[-1].spec
    cfg = vis_model.config
    if tuple(cfg.output_extents) != spec.extents or not np.isclose(cfg.output_voxel_size, spec.voxel_size):
        raise ValueError("visibility model geometry does not match the requested grid")
    field = forward(vis_model, visibility_sequence(past))
    binary = render_high_res(field, spec.extents, spec.voxel_size, spec.origin)
    return binary_to_visibility(binary)
