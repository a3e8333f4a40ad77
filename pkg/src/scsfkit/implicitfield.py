"""Semantic-occupancy implicit field over a low-resolution feature grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .densegrid import ClassInfo, DenseGrid, SemanticVoxelGrid, grid_centroids
from .tensor import MLP, NonFiniteError, ShapeError, Tensor, cross_entropy, no_grad


def trilinear_weights(extents, voxel_size: float, origin, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corner cell indices (flat, C order) and weights for each query point.

    The lattice is the set of cell centroids; points beyond the outermost
    centroids clamp onto the hull face. Returns ``(idx, w)``, both (N, 8).
    """
    ext = np.asarray(extents, dtype=np.int64)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = (p - np.asarray(origin)) / voxel_size - 0.5
    u = np.clip(u, 0.0, (ext - 1).astype(np.float64))
    base = np.minimum(np.floor(u).astype(np.int64), np.maximum(ext - 2, 0))
    frac = u - base
    idx = np.empty((len(p), 8), dtype=np.int64)
    w = np.empty((len(p), 8))
    X, Y, Z = ext
    c = 0
    for a in (0, 1):
        wa = frac[:, 0] if a else 1.0 - frac[:, 0]
        ia = np.minimum(base[:, 0] + a, X - 1)
        for b in (0, 1):
            wb = frac[:, 1] if b else 1.0 - frac[:, 1]
            ib = np.minimum(base[:, 1] + b, Y - 1)
            for cc in (0, 1):
                wc = frac[:, 2] if cc else 1.0 - frac[:, 2]
                ic = np.minimum(base[:, 2] + cc, Z - 1)
                idx[:, c] = (ia * Y + ib) * Z + ic
                w[:, c] = wa * wb * wc
                c += 1
    return idx, w


def interpolation_matrix(grid: DenseGrid, points: np.ndarray) -> sp.csr_matrix:
    idx, w = trilinear_weights(grid.extents, grid.voxel_size, grid.origin, points)
    n = idx.shape[0]
    rows = np.repeat(np.arange(n), 8)
    return sp.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(n, grid.n_cells))


def trilinear_interpolate(E: DenseGrid, points) -> Tensor:
    """Features at arbitrary points, (N, D); differentiable w.r.t. ``E``."""
    M = interpolation_matrix(E, points)
    flat = E.flat()
    MT = M.T.tocsr()
    return Tensor.from_op(M @ flat.data, (flat,), lambda g: (MT @ g,))


@dataclass
class TrainingSample:
    points: np.ndarray  # (n, 3)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ImplicitField:
    base: DenseGrid
    head: MLP
    classes: list[ClassInfo]

    def __post_init__(self):
        if self.head.widths[0] != self.base.width:
            raise ShapeError(f"head input width {self.head.widths[0]} != grid width {self.base.width}")
        if self.head.widths[-1] != len(self.classes):
            raise ShapeError("head output width must equal the class count")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def query_semantic(f: ImplicitField, points) -> Tensor:
    """Logits over {empty} U classes at each point, (N, c)."""
    logits = f.head(trilinear_interpolate(f.base, points))
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite logits")
    return logits


def sample_training_points(gt: SemanticVoxelGrid, n: int, rng) -> TrainingSample:
    """Uniform draw without replacement over every GT voxel centroid, empty ones included."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    total = gt.labels.size
    if n >= total:
        idx = np.arange(total)
    else:
        idx = rng.choice(total, size=n, replace=False)
    X, Y, Z = gt.extents
    ijk = np.stack(np.unravel_index(idx, (X, Y, Z)), axis=1)
    points = gt.origin + (ijk + 0.5) * gt.voxel_size
    return TrainingSample(points, gt.labels.reshape(-1)[idx].astype(np.int64))


def scsf_loss(f: ImplicitField, samples: TrainingSample, class_weights=None) -> Tensor:
    if len(samples) == 0:
        raise ValueError("no samples")
    return cross_entropy(query_semantic(f, samples.points), samples.labels, class_weights)


def render_high_res(f: ImplicitField, extents, voxel_size: float, origin=None, mask=None, chunk: int = 65536) -> SemanticVoxelGrid:
    """Argmax label at every voxel centroid of the requested grid.

    Ties go to the lowest class id. With a visibility ``mask`` of the same
    geometry, its visible-empty voxels are forced to empty.
    """
    if voxel_size > f.base.voxel_size + 1e-12:
        raise ValueError("render_high_res only queries at or below the base resolution")
    origin = f.base.origin if origin is None else np.asarray(origin, dtype=np.float64)
    extents = tuple(int(v) for v in extents)
    pts = grid_centroids(extents, voxel_size, origin)
    labels = np.empty(len(pts), dtype=np.int16)
    with no_grad():
        for lo in range(0, len(pts), chunk):
            logits = query_semantic(f, pts[lo : lo + chunk]).data
            labels[lo : lo + chunk] = np.argmax(logits, axis=1)
    out = SemanticVoxelGrid(labels.reshape(extents), voxel_size, origin, f.classes)
    if mask is not None:
        out = apply_visibility_mask(out, mask)
    return out


def apply_visibility_mask(grid: SemanticVoxelGrid, mask) -> SemanticVoxelGrid:
    from .visibility import VISIBLE_EMPTY

    if tuple(mask.extents) != grid.extents or not np.isclose(mask.voxel_size, grid.voxel_size) or not np.allclose(mask.origin, grid.origin):
        raise ShapeError("visibility mask geometry differs from the rendered grid")
    labels = grid.labels.copy()
    labels[mask.labels == VISIBLE_EMPTY] = 0
    return SemanticVoxelGrid(labels, grid.voxel_size, grid.origin, grid.classes)
