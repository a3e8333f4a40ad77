"""Evaluation suite: occupancy IoU, semantic mIoU, movable/static IoU, Chamfer
distance, and projection of a complete grid back to a partial point cloud."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .densegrid import ClassInfo, SemanticVoxelGrid
from .sparse4d import CameraIntrinsics, PointCloudFrame


class GeometryMismatch(ValueError):
    pass


def _check_geometry(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid) -> None:
    if not pred.same_geometry(gt):
        raise GeometryMismatch(f"pred {pred.extents}@{pred.voxel_size} vs gt {gt.extents}@{gt.voxel_size}")


def _check_tables(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, classes) -> list[ClassInfo]:
    table = list(classes) if classes is not None else gt.classes
    names = [c.name for c in table]
    if [c.name for c in pred.classes] != names or [c.name for c in gt.classes] != names:
        raise ValueError("class tables differ between pred, gt and the given table")
    return table


def iou(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid) -> float:
    """Occupancy IoU (any non-empty label counts as occupied); 1 when both are empty."""
    _check_geometry(pred, gt)
    p, g = pred.labels != 0, gt.labels != 0
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def confusion_counts(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, n_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class TP, FP, FN over all voxels (index 0 is the empty class)."""
    conf = np.bincount(
        gt.labels.reshape(-1).astype(np.int64) * n_classes + pred.labels.reshape(-1),
        minlength=n_classes * n_classes,
    ).reshape(n_classes, n_classes)
    tp = np.diag(conf).copy()
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    return tp, fp, fn


def per_class_iou(pred, gt, classes=None) -> dict[str, float]:
    """IoU for every semantic class present in pred or gt; empty excluded."""
    _check_geometry(pred, gt)
    table = _check_tables(pred, gt, classes)
    tp, fp, fn = confusion_counts(pred, gt, len(table))
    out = {}
    for c in range(1, len(table)):
        denom = tp[c] + fp[c] + fn[c]
        if denom == 0:
            continue
        out[table[c].name] = tp[c] / denom
    return out


def miou(pred, gt, classes=None) -> tuple[float, dict[str, float]]:
    """Mean per-class IoU over classes present in either grid.

    When no semantic class appears anywhere the mean is reported as 1.
    """
    per = per_class_iou(pred, gt, classes)
    if not per:
        return 1.0, per
    return float(np.mean(list(per.values()))), per


def movable_static_iou(pred, gt, classes=None) -> tuple[float | None, float | None]:
    """Mean per-class IoU over movable and over static classes.

    A side with no defined (or no present) class is reported as None.
    """
    table = list(classes) if classes is not None else gt.classes
    per = per_class_iou(pred, gt, table)
    mov = [per[c.name] for c in table[1:] if c.movable and c.name in per]
    sta = [per[c.name] for c in table[1:] if not c.movable and c.name in per]
    return (float(np.mean(mov)) if mov else None, float(np.mean(sta)) if sta else None)


def chamfer(a, b) -> float:
    """Symmetric mean squared nearest-neighbour distance, in squared units."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    da, _ = cKDTree(b).query(a, k=1)
    db, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(da**2) + np.mean(db**2))


@dataclass
class MetricReport:
    iou: float
    miou: float
    per_class_iou: dict[str, float]
    movable_iou: float | None
    static_iou: float | None
    chamfer: float | None
    tp: dict[str, int] = field(default_factory=dict)
    fp: dict[str, int] = field(default_factory=dict)
    fn: dict[str, int] = field(default_factory=dict)

    def to_lines(self, prefix: str = "") -> list[str]:
        """``key=value`` lines; absent values print as ``none``."""

        def fmt(v):
            return "none" if v is None else repr(float(v)) if isinstance(v, float) else str(v)

        lines = [
            f"{prefix}iou={fmt(self.iou)}",
            f"{prefix}miou={fmt(self.miou)}",
            f"{prefix}movable_iou={fmt(self.movable_iou)}",
            f"{prefix}static_iou={fmt(self.static_iou)}",
            f"{prefix}chamfer={fmt(self.chamfer)}",
        ]
        for name, v in self.per_class_iou.items():
            lines.append(f"{prefix}class.{name}.iou={fmt(float(v))}")
        for name in self.tp:
            lines.append(f"{prefix}class.{name}.tp={self.tp[name]}")
            lines.append(f"{prefix}class.{name}.fp={self.fp[name]}")
            lines.append(f"{prefix}class.{name}.fn={self.fn[name]}")
        return lines

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "miou": self.miou,
            "per_class_iou": dict(self.per_class_iou),
            "movable_iou": self.movable_iou,
            "static_iou": self.static_iou,
            "chamfer": self.chamfer,
            "tp": dict(self.tp),
            "fp": dict(self.fp),
            "fn": dict(self.fn),
        }


def occupied_centroids(grid: SemanticVoxelGrid) -> np.ndarray:
    ijk = np.argwhere(grid.labels != 0)
    return grid.origin + (ijk + 0.5) * grid.voxel_size


def evaluate(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, classes=None, with_chamfer: bool = True) -> MetricReport:
    table = list(classes) if classes is not None else gt.classes
    m, per = miou(pred, gt, table)
    mov, sta = movable_static_iou(pred, gt, table)
    tp, fp, fn = confusion_counts(pred, gt, len(table))
    cd = None
    if with_chamfer:
        pa, pb = occupied_centroids(pred), occupied_centroids(gt)
        if len(pa) and len(pb):
            cd = chamfer(pa, pb)
        elif not len(pa) and not len(pb):
            cd = 0.0
    names = [c.name for c in table]
    return MetricReport(
        iou=iou(pred, gt),
        miou=m,
        per_class_iou=per,
        movable_iou=mov,
        static_iou=sta,
        chamfer=cd,
        tp={names[c]: int(tp[c]) for c in range(1, len(table))},
        fp={names[c]: int(fp[c]) for c in range(1, len(table))},
        fn={names[c]: int(fn[c]) for c in range(1, len(table))},
    )


def parse_report(text: str) -> dict[str, float | int | None]:
    """Inverse of ``MetricReport.to_lines``: ``key=value`` per line, ``#`` comments."""
    out: dict[str, float | int | None] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"malformed report line {raw!r}")
        if val == "none":
            out[key] = None
        elif key.endswith((".tp", ".fp", ".fn")) or key.endswith("count"):
            out[key] = int(val)
        else:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


@numba.njit(cache=True)
def _first_hits(cam, dirs, occ, origin, vs, out_t, out_idx):
    ext = occ.shape
    s = (cam - origin) / vs
    for r in range(dirs.shape[0]):
        d = dirs[r] / vs
        t0 = 0.0
        t1 = np.inf
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
        out_t[r] = -1.0
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
        t_entry = t0
        while True:
            if occ[idx[0], idx[1], idx[2]]:
                out_t[r] = t_entry
                out_idx[r, 0] = idx[0]
                out_idx[r, 1] = idx[1]
                out_idx[r, 2] = idx[2]
                break
            a = 0
            if tmax[1] < tmax[a]:
                a = 1
            if tmax[2] < tmax[a]:
                a = 2
            if tmax[a] >= t1:
                break
            t_entry = tmax[a]
            idx[a] += step[a]
            if idx[a] < 0 or idx[a] >= ext[a]:
                break
            tmax[a] += tdelta[a]


def project_to_partial(grid: SemanticVoxelGrid, pose, intrinsics: CameraIntrinsics, timestamp: int = 0) -> PointCloudFrame:
    """One point per pixel at the entry of its ray into the first occupied voxel.

    Features are the hit voxel's label. Pixels whose rays hit nothing produce
    no point.
    """
    if not isinstance(intrinsics, CameraIntrinsics):
        raise ValueError("intrinsics required")
    pose = np.asarray(pose, dtype=np.float64)
    R, cam = pose[:3, :3], pose[:3, 3].copy()
    dirs = intrinsics.pixel_rays() @ R.T
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    occ = np.ascontiguousarray(grid.labels != 0)
    t = np.empty(len(dirs))
    hit_idx = np.zeros((len(dirs), 3), dtype=np.int64)
    _first_hits(cam, dirs, occ, grid.origin.copy(), float(grid.voxel_size), t, hit_idx)
    hit = t >= 0
    pts = cam + dirs[hit] * t[hit, None]
    ijk = hit_idx[hit]
    labels = grid.labels[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(np.float64)
    return PointCloudFrame(pts, labels.reshape(-1, 1), timestamp)
