"""Dense 3D feature volumes, label volumes, and the decoder's convolutions."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .sparse4d import SparseTensor4D
from .tensor import Module, ShapeError, Tensor, parameter, reshape, segment_sum


@dataclass
class DenseGrid:
    """Feature volume of shape (X, Y, Z, D); cell (i, j, k) is centered at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``."""

    features: Tensor
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dropped: int = 0

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.features.ndim != 4 or min(self.features.shape[:3]) < 1:
            raise ShapeError(f"dense grid features must be (X, Y, Z, D), got {self.features.shape}")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[:3])

    @property
    def width(self) -> int:
        return self.features.shape[3]

    @property
    def n_cells(self) -> int:
        X, Y, Z = self.extents
        return X * Y * Z

    def flat(self) -> Tensor:
        return reshape(self.features, (self.n_cells, self.width))

    def centroids(self) -> np.ndarray:
        return grid_centroids(self.extents, self.voxel_size, self.origin)


def grid_centroids(extents, voxel_size: float, origin) -> np.ndarray:
    """World centers of all cells in C order, (X*Y*Z, 3)."""
    X, Y, Z = extents
    ii, jj, kk = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    ijk = np.stack([ii.reshape(-1), jj.reshape(-1), kk.reshape(-1)], axis=1)
    return np.asarray(origin, dtype=np.float64) + (ijk + 0.5) * voxel_size


@dataclass
class ClassInfo:
    name: str
    movable: bool = False


@dataclass
class SemanticVoxelGrid:
    """Label volume; label 0 is always the empty class."""

    labels: np.ndarray  # (X, Y, Z) integer
    voxel_size: float
    origin: np.ndarray
    classes: list[ClassInfo]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int16)
        if self.labels.ndim != 3:
            raise ShapeError("labels must be (X, Y, Z)")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.classes = [c if isinstance(c, ClassInfo) else ClassInfo(*c) for c in self.classes]
        if not self.classes:
            raise ValueError("class table must hold at least the empty class")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ValueError("label outside the class table")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def occupied(self) -> np.ndarray:
        return self.labels != 0

    def centroids(self) -> np.ndarray:
        return grid_centroids(self.extents, self.voxel_size, self.origin)

    def same_geometry(self, other) -> bool:
        return (
            self.extents == tuple(other.extents)
            and np.isclose(self.voxel_size, other.voxel_size, rtol=0, atol=1e-12)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def structurally_equal(self, other: "SemanticVoxelGrid") -> bool:
        return (
            self.same_geometry(other)
            and [(c.name, c.movable) for c in self.classes] == [(c.name, c.movable) for c in other.classes]
            and np.array_equal(self.labels, other.labels)
        )

    def copy(self) -> "SemanticVoxelGrid":
        return SemanticVoxelGrid(self.labels.copy(), self.voxel_size, self.origin.copy(), list(self.classes))


GRID_FORMAT_VERSION = 1


def dumps_grid(grid: SemanticVoxelGrid) -> str:
    """Sparse text form: header, class table, then ``x y z label`` for non-empty voxels."""
    X, Y, Z = grid.extents
    out = io.StringIO()
    out.write(f"SCSFGRID {GRID_FORMAT_VERSION}\n")
    out.write(f"extents {X} {Y} {Z}\n")
    out.write(f"voxel_size {float(grid.voxel_size)!r}\n")
    out.write("origin " + " ".join(repr(float(v)) for v in grid.origin) + "\n")
    out.write(f"classes {len(grid.classes)}\n")
    for i, c in enumerate(grid.classes):
        out.write(f"{i} {c.name} {int(c.movable)}\n")
    nz = np.argwhere(grid.labels != 0)
    out.write(f"voxels {len(nz)}\n")
    labels = grid.labels[tuple(nz.T)] if len(nz) else []
    for (x, y, z), lab in zip(nz, labels):
        out.write(f"{x} {y} {z} {lab}\n")
    return out.getvalue()


def loads_grid(text: str) -> SemanticVoxelGrid:
    lines = iter(text.splitlines())

    def expect(tag: str) -> list[str]:
        parts = next(lines).split()
        if not parts or parts[0] != tag:
            raise ValueError(f"expected {tag!r} line, got {parts!r}")
        return parts[1:]

    version = expect("SCSFGRID")
    if int(version[0]) != GRID_FORMAT_VERSION:
        raise ValueError(f"unsupported grid format version {version[0]}")
    X, Y, Z = (int(v) for v in expect("extents"))
    voxel_size = float(expect("voxel_size")[0])
    origin = np.array([float(v) for v in expect("origin")])
    n_cls = int(expect("classes")[0])
    classes = []
    for _ in range(n_cls):
        i, name, mov = next(lines).split()
        classes.append(ClassInfo(name, bool(int(mov))))
    n_vox = int(expect("voxels")[0])
    labels = np.zeros((X, Y, Z), dtype=np.int16)
    if n_vox:
        rows = np.loadtxt(io.StringIO("\n".join(next(lines) for _ in range(n_vox))), dtype=np.int64, ndmin=2)
        labels[rows[:, 0], rows[:, 1], rows[:, 2]] = rows[:, 3]
    return SemanticVoxelGrid(labels, voxel_size, origin, classes)


def fill_dense(s: SparseTensor4D, extents, origin=None) -> DenseGrid:
    """Scatter a single-time-slice sparse tensor into a zero dense grid.

    Voxels outside ``extents`` are dropped; the count is kept on the result
    and reported through ``warnings``.
    """
    X, Y, Z = (int(v) for v in extents)
    origin = s.origin if origin is None else np.asarray(origin, dtype=np.float64)
    if len(s) and len(np.unique(s.coords[:, 3])) > 1:
        raise ValueError("fill_dense expects a single time slice; apply temporal_collapse first")
    shift = (s.origin - origin) / s.voxel_size
    if not np.allclose(shift, np.round(shift), atol=1e-6):
        raise ValueError("sparse lattice is not aligned with the grid origin")
    D = s.n_features
    ijk = s.coords[:, :3] // s.stride + np.round(shift).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.array([X, Y, Z])), axis=1)
    dropped = int((~inside).sum())
    if dropped:
        warnings.warn(f"fill_dense dropped {dropped} out-of-bounds voxels", stacklevel=2)
    rows = np.nonzero(inside)[0]
    flat_idx = (ijk[rows, 0] * Y + ijk[rows, 1]) * Z + ijk[rows, 2]
    # dropped rows go to a sink bucket that is sliced away
    seg = np.full(len(s), X * Y * Z, dtype=np.int64)
    seg[rows] = flat_idx
    dense = _drop_last(segment_sum(s.features, seg, X * Y * Z + 1))
    return DenseGrid(reshape(dense, (X, Y, Z, D)), s.voxel_size, origin, dropped)


def _drop_last(t: Tensor) -> Tensor:
    n = t.shape[0] - 1
    return Tensor.from_op(t.data[:n], (t,), lambda g: (np.concatenate([g, np.zeros((1,) + g.shape[1:])]),))


class ConvWeights3D(Module):
    """Per-offset weight matrices for a 3x3x3 kernel plus bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, identity: bool = False):
        self.weight = parameter((27, d_in, d_out), rng, fan_in=27 * d_in)
        if identity:
            if d_in != d_out:
                raise ShapeError("identity init needs d_in == d_out")
            self.weight.data[:] = 0.0
            self.weight.data[13] = np.eye(d_in)
        self.bias = parameter((d_out,), rng, init="zeros")


_OFFSETS_3 = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])


def dilated_conv3d(g: DenseGrid, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> DenseGrid:
    """Zero-padded 3x3x3 convolution with offsets scaled by ``dilation``.

    ``weight`` is (27, D_in, D_out) ordered x-major over offsets in {-1, 0, 1}.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    X, Y, Z, D = g.features.shape
    if weight.shape[:2] != (27, D):
        raise ShapeError(f"weight {weight.shape} does not fit input width {D}")
    d = int(dilation)
    Do = weight.shape[2]
    xp = np.zeros((X + 2 * d, Y + 2 * d, Z + 2 * d, D))
    xp[d : d + X, d : d + Y, d : d + Z] = g.features.data
    W = weight.data
    out = np.zeros((X * Y * Z, Do))
    slices = []
    for k, (a, b, c) in enumerate(_OFFSETS_3):
        sl = (slice(d + a * d, d + a * d + X), slice(d + b * d, d + b * d + Y), slice(d + c * d, d + c * d + Z))
        slices.append(sl)
        out += xp[sl].reshape(-1, D) @ W[k]
    if bias is not None:
        out += bias.data

    def backward(gout):
        gflat = gout.reshape(-1, Do)
        gxp = np.zeros_like(xp)
        gW = np.empty_like(W)
        for k, sl in enumerate(slices):
            gW[k] = xp[sl].reshape(-1, D).T @ gflat
            gxp[sl] += (gflat @ W[k].T).reshape(X, Y, Z, D)
        gx = gxp[d : d + X, d : d + Y, d : d + Z]
        if bias is None:
            return gx, gW
        return gx, gW, gflat.sum(axis=0)

    parents = (g.features, weight) if bias is None else (g.features, weight, bias)
    feats = Tensor.from_op(out.reshape(X, Y, Z, Do), parents, backward)
    return DenseGrid(feats, g.voxel_size, g.origin)


class UpConvWeights(Module):
    """2x2x2 transposed-convolution weights: (8, D_in, D_out) plus bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = parameter((8, d_in, d_out), rng, fan_in=d_in)
        self.bias = parameter((d_out,), rng, init="zeros")


def up_conv3d(g: DenseGrid, weight: Tensor, bias: Tensor | None = None) -> DenseGrid:
    """Stride-2 transposed convolution: each cell scatters into its 2x2x2 child block.

    ``weight[a*4 + b*2 + c]`` maps a parent cell to child (2i+a, 2j+b, 2k+c).
    Extents double, voxel size halves, origin is unchanged.
    """
    X, Y, Z, D = g.features.shape
    if weight.shape[:2] != (8, D):
        raise ShapeError(f"weight {weight.shape} does not fit input width {D}")
    Do = weight.shape[2]
    W = weight.data
    Wcat = W.transpose(1, 0, 2).reshape(D, 8 * Do)
    x = g.features.data.reshape(-1, D)
    y = x @ Wcat
    if bias is not None:
        y = y + np.tile(bias.data, 8)
    out = y.reshape(X, Y, Z, 2, 2, 2, Do).transpose(0, 3, 1, 4, 2, 5, 6).reshape(2 * X, 2 * Y, 2 * Z, Do)

    def backward(gout):
        gy = gout.reshape(X, 2, Y, 2, Z, 2, Do).transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, 8 * Do)
        gx = (gy @ Wcat.T).reshape(X, Y, Z, D)
        gW = (x.T @ gy).reshape(D, 8, Do).transpose(1, 0, 2)
        if bias is None:
            return gx, gW
        return gx, gW, gy.reshape(-1, 8, Do).sum(axis=(0, 1))

    parents = (g.features, weight) if bias is None else (g.features, weight, bias)
    feats = Tensor.from_op(out, parents, backward)
    return DenseGrid(feats, g.voxel_size / 2.0, g.origin)


def grid_relu(g: DenseGrid) -> DenseGrid:
    from .tensor import relu

    return DenseGrid(relu(g.features), g.voxel_size, g.origin)
