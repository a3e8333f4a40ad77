"""Coordinate-hashed 4D sparse tensors and generalized sparse convolution.

Coordinates are integer (x, y, z, t) on the finest lattice relative to an
``origin``; a tensor at spatial stride ``s`` only holds coordinates that are
multiples of ``s``. Rows are kept sorted by packed key, so the coordinate
index is a sorted key array searched with ``np.searchsorted``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence as Seq

import numpy as np
import scipy.sparse as sp

from .tensor import Module, ShapeError, Tensor, parameter, segment_sum

_SPATIAL_BITS = 16
_TIME_BITS = 12
_SPATIAL_OFF = 1 << (_SPATIAL_BITS - 1)
_TIME_OFF = 1 << (_TIME_BITS - 1)


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack (x, y, z, t) rows into int64 keys whose order is lexicographic."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (np.abs(c[:, :3]).max() >= _SPATIAL_OFF or np.abs(c[:, 3]).max() >= _TIME_OFF):
        raise OverflowError("coordinate outside the packable range")
    k = c[:, 0] + _SPATIAL_OFF
    k = (k << _SPATIAL_BITS) | (c[:, 1] + _SPATIAL_OFF)
    k = (k << _SPATIAL_BITS) | (c[:, 2] + _SPATIAL_OFF)
    return (k << _TIME_BITS) | (c[:, 3] + _TIME_OFF)


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    t = (k & ((1 << _TIME_BITS) - 1)) - _TIME_OFF
    k = k >> _TIME_BITS
    mask = (1 << _SPATIAL_BITS) - 1
    z = (k & mask) - _SPATIAL_OFF
    k = k >> _SPATIAL_BITS
    y = (k & mask) - _SPATIAL_OFF
    x = (k >> _SPATIAL_BITS) - _SPATIAL_OFF
    return np.stack([x, y, z, t], axis=1)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate intrinsics: {self}")

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized camera-frame directions through each pixel center, (H*W, 3).

        Camera frame: x right, y down, z forward.
        """
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d.reshape(-1, 3)

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]


@dataclass
class PointCloudFrame:
    coords: np.ndarray  # (N, 3) meters
    features: np.ndarray  # (N, C)
    timestamp: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        self.features = feats
        if self.features.shape[0] != self.coords.shape[0]:
            raise ShapeError("feature rows must align with coordinate rows")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite point coordinates")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class Sequence:
    frames: list[PointCloudFrame]
    poses: list[np.ndarray] = field(default_factory=list)  # camera-to-world 4x4
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timestamps must strictly increase: {ts}")
        if self.poses and len(self.poses) != len(self.frames):
            raise ValueError("one pose per frame required")
        self.poses = [np.asarray(p, dtype=np.float64) for p in self.poses]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SparseTensor4D:
    coords: np.ndarray  # (M, 4) int64, sorted by packed key
    features: Tensor  # (M, D)
    voxel_size: float
    stride: int = 1
    temporal_stride: int = 1
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 4)
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ShapeError(f"{self.coords.shape[0]} coords vs features {self.features.shape}")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.keys = pack_keys(self.coords)
        if self.keys.size > 1 and np.any(np.diff(self.keys) <= 0):
            raise ValueError("coordinates must be unique and sorted; use SparseTensor4D.build")
        if np.any(self.coords[:, :3] % self.stride) or np.any(self.coords[:, 3] % self.temporal_stride):
            raise ValueError("coordinates must be multiples of the tensor stride")

    @classmethod
    def build(cls, coords, features, **kw) -> "SparseTensor4D":
        """Construct from unsorted, unique coordinates."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        order = np.argsort(pack_keys(coords), kind="stable")
        feats = features if isinstance(features, Tensor) else Tensor(features)
        from .tensor import take_rows

        return cls(coords[order], take_rows(feats, order), **kw)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def unit(self) -> float:
        """Edge length of one finest-lattice step."""
        return self.voxel_size / self.stride

    def index_of(self, coords) -> np.ndarray:
        """Row of each query coordinate, or -1 where absent."""
        q = pack_keys(np.asarray(coords, dtype=np.int64).reshape(-1, 4))
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (self.keys[pos] == q) if len(self.keys) else np.zeros(len(q), dtype=bool)
        return np.where(hit, pos, -1)

    def centroids(self) -> np.ndarray:
        """World-space voxel centers, (M, 3)."""
        return self.origin + (self.coords[:, :3] / self.stride + 0.5) * self.voxel_size

    def with_features(self, features: Tensor) -> "SparseTensor4D":
        return SparseTensor4D(self.coords, features, self.voxel_size, self.stride, self.temporal_stride, self.origin)


def voxelize(seq: Sequence, voxel_size: float, origin=None) -> SparseTensor4D:
    """Mean-pool point features into ``voxel_size`` voxels with one time slice per frame.

    ``origin`` defaults to the first frame's camera position when poses are
    present, otherwise the world origin. Time is the frame timestamp minus the
    first timestamp.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if not seq.frames:
        raise ValueError("empty sequence")
    if origin is None:
        origin = seq.poses[0][:3, 3] if seq.poses else np.zeros(3)
    origin = np.asarray(origin, dtype=np.float64)
    t0 = seq.frames[0].timestamp
    idx, feats = [], []
    for frame in seq.frames:
        if len(frame) == 0:
            continue
        ijk = np.floor((frame.coords - origin) / voxel_size).astype(np.int64)
        t = np.full((len(frame), 1), frame.timestamp - t0, dtype=np.int64)
        idx.append(np.hstack([ijk, t]))
        feats.append(frame.features)
    if not idx:
        raise ValueError("sequence holds no points")
    widths = {f.shape[1] for f in feats}
    if len(widths) != 1:
        raise ShapeError(f"frames disagree on feature width: {sorted(widths)}")
    coords = np.vstack(idx)
    feats = np.vstack(feats)
    keys, inverse, counts = np.unique(pack_keys(coords), return_inverse=True, return_counts=True)
    summed = np.zeros((len(keys), feats.shape[1]))
    np.add.at(summed, inverse.reshape(-1), feats)
    return SparseTensor4D(unpack_keys(keys), Tensor(summed / counts[:, None]), voxel_size, 1, 1, origin)


def devoxelize(st: SparseTensor4D, t0: int = 0) -> Sequence:
    """One point per voxel at its centroid, grouped into frames by time slice."""
    frames = []
    cents = st.centroids()
    for t in np.unique(st.coords[:, 3]):
        sel = st.coords[:, 3] == t
        frames.append(PointCloudFrame(cents[sel], st.features.data[sel], int(t) + t0))
    return Sequence(frames)


def kernel_offsets(extents: Seq[int]) -> np.ndarray:
    """All kernel offsets, (K, 4), x-major. Odd extents center on 0; even ones start at 0."""
    axes = []
    for k in extents:
        if k < 1:
            raise ValueError(f"kernel extent must be >= 1, got {k}")
        axes.append(np.arange(-(k // 2), k // 2 + 1) if k % 2 else np.arange(k))
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grid], axis=1).astype(np.int64)


@dataclass
class KernelMap:
    """Columnar list of (input row, output row, offset index) triples.

    Triples are grouped by offset; ``bounds[k]:bounds[k+1]`` selects offset
    ``k``. Within one offset every input and every output appears at most once.
    """

    in_rows: np.ndarray
    out_rows: np.ndarray
    offset_idx: np.ndarray
    bounds: np.ndarray
    out_coords: np.ndarray
    out_stride: int
    out_temporal_stride: int

    @property
    def scatter(self) -> sp.csr_matrix:
        if getattr(self, "_scatter", None) is None:
            self._scatter = _scatter_matrix(self.out_rows, len(self.out_coords))
        return self._scatter

    def gather_t(self, n_in: int) -> sp.csr_matrix:
        """Transpose of the input gather: sums triple rows back onto input rows."""
        cached = getattr(self, "_gather_t", None)
        if cached is None or cached.shape[0] != n_in:
            self._gather_t = _scatter_matrix(self.in_rows, n_in)
        return self._gather_t

    def triples(self) -> list[tuple[int, tuple[int, int, int, int], int]]:
        return [
            (int(i), tuple(int(v) for v in self.out_coords[o]), int(k))
            for i, o, k in zip(self.in_rows, self.out_rows, self.offset_idx)
        ]


def _split_stride(stride) -> tuple[int, int]:
    if np.isscalar(stride):
        return int(stride), 1
    s = [int(v) for v in stride]
    if len(s) == 3:
        s.append(1)
    if len(s) != 4:
        raise ValueError("stride is a scalar or a (sx, sy, sz[, st]) tuple")
    if min(s) < 1:
        raise ValueError("stride must be >= 1 on every axis")
    if not s[0] == s[1] == s[2]:
        raise ValueError("anisotropic spatial strides are not supported")
    return s[0], s[3]


def build_kernel_map(st: SparseTensor4D, extents: Seq[int], stride=1) -> KernelMap:
    """Enumerate every input that feeds every strided output through every offset.

    Outputs exist at each lattice site of the output stride that has at least
    one input inside its kernel footprint.
    """
    ss, ts = _split_stride(stride)
    in_s = np.array([st.stride] * 3 + [st.temporal_stride], dtype=np.int64)
    out_s = in_s * np.array([ss, ss, ss, ts], dtype=np.int64)
    offs = kernel_offsets(extents)
    K = len(offs)
    M = len(st)
    empty = np.zeros(0, dtype=np.int64)
    if M == 0:
        return KernelMap(empty, empty, empty, np.zeros(K + 1, dtype=np.int64), np.zeros((0, 4), np.int64), int(out_s[0]), int(out_s[3]))
    # output q receives input q + o * in_s, so input c reaches q = c - o * in_s
    cand = st.coords[None, :, :] - offs[:, None, :] * in_s[None, None, :]
    valid = np.all(cand % out_s == 0, axis=2)
    k_idx, i_idx = np.nonzero(valid)
    cand_keys = pack_keys(cand[k_idx, i_idx])
    out_keys = np.unique(cand_keys)
    out_rows = np.searchsorted(out_keys, cand_keys)
    bounds = np.searchsorted(k_idx, np.arange(K + 1))
    return KernelMap(i_idx.astype(np.int64), out_rows.astype(np.int64), k_idx.astype(np.int64), bounds, unpack_keys(out_keys), int(out_s[0]), int(out_s[3]))


class KernelWeights4D(Module):
    def __init__(self, extents: Seq[int], d_in: int, d_out: int, rng: np.random.Generator):
        self.extents = tuple(int(k) for k in extents)
        if len(self.extents) != 4:
            raise ValueError("kernel extents are (kx, ky, kz, kt)")
        n = len(kernel_offsets(self.extents))
        self.weight = parameter((n, d_in, d_out), rng, fan_in=n * d_in)
        self.bias = parameter((d_out,), rng, init="zeros")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[2]


def _scatter_matrix(rows: np.ndarray, n_rows: int) -> sp.csr_matrix:
    """(n_rows, T) 0/1 matrix that sums triple rows into their target rows."""
    T = len(rows)
    return sp.csr_matrix((np.ones(T), (rows, np.arange(T))), shape=(n_rows, T))


def sparse_conv(st: SparseTensor4D, k: KernelWeights4D, stride=1, kmap: KernelMap | None = None) -> SparseTensor4D:
    """Gather-matmul-scatter convolution over a kernel map.

    Inputs are gathered once in triple order; since triples are grouped by
    offset, each offset is a contiguous block multiplied by its own weight
    matrix, and one sparse matrix product scatters the blocks to outputs.
    """
    if st.n_features != k.d_in:
        raise ShapeError(f"input width {st.n_features} != kernel input width {k.d_in}")
    if kmap is None:
        kmap = build_kernel_map(st, k.extents, stride)
    ss, _ = _split_stride(stride)
    x = st.features.data
    W = k.weight.data
    n_out = len(kmap.out_coords)
    b = kmap.bounds
    xg = np.take(x, kmap.in_rows, axis=0)
    y = np.empty((len(kmap.in_rows), k.d_out))
    for j in range(len(b) - 1):
        if b[j] < b[j + 1]:
            np.matmul(xg[b[j] : b[j + 1]], W[j], out=y[b[j] : b[j + 1]])
    scatter = kmap.scatter
    out = scatter @ y + k.bias.data if n_out else np.zeros((0, k.d_out))

    def backward(g):
        gy = np.take(g, kmap.out_rows, axis=0)
        gxg = np.empty_like(xg)
        gW = np.zeros_like(W)
        for j in range(len(b) - 1):
            lo, hi = b[j], b[j + 1]
            if lo < hi:
                np.matmul(gy[lo:hi], W[j].T, out=gxg[lo:hi])
                gW[j] = xg[lo:hi].T @ gy[lo:hi]
        gx = kmap.gather_t(len(x)) @ gxg if len(xg) else np.zeros_like(x)
        return gx, gW, g.sum(axis=0)

    feats = Tensor.from_op(np.asarray(out), (st.features, k.weight, k.bias), backward)
    return SparseTensor4D(kmap.out_coords, feats, st.voxel_size * ss, kmap.out_stride, kmap.out_temporal_stride, st.origin)


def temporal_collapse(st: SparseTensor4D) -> SparseTensor4D:
    """Mean-pool voxels that share (x, y, z) across time into t = 0."""
    if len(st) == 0:
        raise ValueError("temporal_collapse needs a nonempty tensor")
    spatial = st.coords.copy()
    spatial[:, 3] = 0
    keys, inverse, counts = np.unique(pack_keys(spatial), return_inverse=True, return_counts=True)
    summed = segment_sum(st.features, inverse.reshape(-1), len(keys))
    feats = summed * Tensor((1.0 / counts)[:, None])
    return SparseTensor4D(unpack_keys(keys), feats, st.voxel_size, st.stride, 1, st.origin)


def dump_sparse(st: SparseTensor4D) -> str:
    """Text dump: ``x y z t f0 f1 ...`` per voxel in lexicographic order."""
    buf = io.StringIO()
    buf.write(f"# voxel_size={float(st.voxel_size)!r} stride={st.stride} temporal_stride={st.temporal_stride} "
              f"origin={float(st.origin[0])!r},{float(st.origin[1])!r},{float(st.origin[2])!r} channels={st.n_features}\n")
    feats = st.features.data
    for c, f in zip(st.coords, feats):
        buf.write(" ".join(str(int(v)) for v in c))
        if f.size:
            buf.write(" " + " ".join(repr(float(v)) for v in f))
        buf.write("\n")
    return buf.getvalue()


def load_sparse(text: str) -> SparseTensor4D:
    meta = {"voxel_size": "1.0", "stride": "1", "temporal_stride": "1", "origin": "0,0,0", "channels": ""}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    key, val = tok.split("=", 1)
                    meta[key] = val
            continue
        rows.append(line.split())
    coords = np.array([[int(v) for v in r[:4]] for r in rows], dtype=np.int64).reshape(-1, 4)
    width = int(meta["channels"]) if meta["channels"] else (len(rows[0]) - 4 if rows else 0)
    feats = np.array([[float(v) for v in r[4:]] for r in rows], dtype=np.float64).reshape(-1, width)
    return SparseTensor4D.build(
        coords,
        feats,
        voxel_size=float(meta["voxel_size"]),
        stride=int(meta["stride"]),
        temporal_stride=int(meta["temporal_stride"]),
        origin=np.array([float(v) for v in meta["origin"].split(",")]),
    )
