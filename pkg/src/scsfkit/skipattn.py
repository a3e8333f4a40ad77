"""Cross-attention skip connections between decoder and encoder grids.

Queries come from up-convolution voxels, keys and values from the
dilated-convolution voxels at the same scale. Both sides append a shared
Fourier positional embedding of the voxel centroid before projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .densegrid import DenseGrid
from .tensor import MLP, Module, ShapeError, Tensor, concat, linear, matmul, mul, parameter, reshape, softmax, take_rows, transpose


@dataclass
class AttentionConfig:
    heads: int = 4
    d_k: int = 16
    d_v: int = 16
    n_freqs: int = 6
    pe_hidden: int = 32
    pe_width: int = 16
    max_keys: int | None = 512
    window: int | None = None  # Chebyshev radius of a per-query key window; None attends globally

    def __post_init__(self):
        if self.heads < 1 or self.d_k < 1 or self.d_v < 1:
            raise ValueError("heads, d_k and d_v must be >= 1")
        if self.window is not None and self.window < 0:
            raise ValueError("window radius must be >= 0")
        if self.n_freqs < 1:
            raise ValueError("need at least one Fourier frequency")


def fourier_basis(points: np.ndarray, center, half_extent, n_freqs: int) -> tuple[np.ndarray, int]:
    """``[sin(2^f pi u), cos(2^f pi u)]`` per axis on coordinates normalized to [-1, 1].

    Returns the (N, 6 * n_freqs) basis and the number of points whose
    normalized coordinates had to be clamped.
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = (p - np.asarray(center)) / np.asarray(half_extent)
    outside = np.any(np.abs(u) > 1.0 + 1e-12, axis=1)
    u = np.clip(u, -1.0, 1.0)
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    ang = u[:, :, None] * freqs[None, None, :]  # (N, 3, F)
    basis = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(p), -1)
    return basis, int(outside.sum())


class PositionalEmbedding(Module):
    """Fourier basis of a centroid followed by a small MLP."""

    def __init__(self, n_freqs: int, hidden: int, width: int, rng: np.random.Generator):
        self.n_freqs = n_freqs
        self.mlp = MLP([6 * n_freqs, hidden, width], rng)

    @property
    def width(self) -> int:
        return self.mlp.widths[-1]

    def __call__(self, points: np.ndarray, center, half_extent) -> Tensor:
        basis, n_out = fourier_basis(points, center, half_extent, self.n_freqs)
        if n_out:
            warnings.warn(f"{n_out} centroids fell outside the grid; normalization clamped", stacklevel=2)
        return self.mlp(Tensor(basis))


def fourier_pos_embed(centroid, n_freqs: int, mlp: MLP, center=(0.0, 0.0, 0.0), half_extent=(1.0, 1.0, 1.0)) -> Tensor:
    basis, _ = fourier_basis(np.asarray(centroid).reshape(1, 3), center, half_extent, n_freqs)
    return reshape(mlp(Tensor(basis)), (mlp.widths[-1],))


def grid_frame(g: DenseGrid) -> tuple[np.ndarray, np.ndarray]:
    """Center and half-extent of a grid's world box."""
    half = np.array(g.extents, dtype=np.float64) * g.voxel_size / 2.0
    return g.origin + half, half


def select_keys(kv: np.ndarray, cap: int | None) -> np.ndarray:
    """Rows kept as keys: all, or the ``cap`` largest by feature norm (ties by index)."""
    n = kv.shape[0]
    if cap is None or n <= cap:
        return np.arange(n)
    norms = np.linalg.norm(kv, axis=1)
    order = np.lexsort((np.arange(n), -norms))
    return np.sort(order[:cap])


class CrossAttentionSkip(Module):
    def __init__(self, d_query: int, d_kv: int, d_out: int, cfg: AttentionConfig, pos: PositionalEmbedding, rng: np.random.Generator):
        self.cfg = cfg
        self.pos = pos
        dq = d_query + pos.width
        dk = d_kv + pos.width
        self.wq = [parameter((dq, cfg.d_k), rng, fan_in=dq, init="xavier") for _ in range(cfg.heads)]
        self.wk = [parameter((dk, cfg.d_k), rng, fan_in=dk, init="xavier") for _ in range(cfg.heads)]
        self.wv = [parameter((dk, cfg.d_v), rng, fan_in=dk, init="xavier") for _ in range(cfg.heads)]
        self.wo = parameter((cfg.heads * cfg.d_v, d_out), rng, fan_in=cfg.heads * cfg.d_v, init="xavier")
        self.bo = parameter((d_out,), rng, init="zeros")

    def __call__(self, queries: DenseGrid, kv: DenseGrid) -> DenseGrid:
        return cross_attention_skip(queries, kv, self)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-wise ``softmax(q k^T / sqrt(d_k))``."""
    scale = 1.0 / np.sqrt(q.shape[1])
    return softmax(mul(matmul(q, transpose(k)), scale), axis=1)


def window_neighbors(extents, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of every cell within Chebyshev ``radius`` of each cell.

    Returns ``(nbr, valid)``, both (N, (2r+1)^3); slots falling outside the
    grid point at the cell itself and are marked invalid.
    """
    ext = np.asarray(extents, dtype=np.int64)
    ijk = np.stack(np.unravel_index(np.arange(int(np.prod(ext))), tuple(ext)), axis=1)
    r = np.arange(-radius, radius + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    cand = ijk[:, None, :] + offs[None, :, :]
    valid = np.all((cand >= 0) & (cand < ext), axis=2)
    flat = (cand[..., 0] * ext[1] + cand[..., 1]) * ext[2] + cand[..., 2]
    own = np.arange(len(ijk))[:, None]
    return np.where(valid, flat, own), valid


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, nbr: np.ndarray, valid: np.ndarray) -> Tensor:
    """``softmax(q_i k_j / sqrt(d_k)) v_j`` with j ranging over row i of ``nbr``."""
    n, slots = nbr.shape
    scale = 1.0 / np.sqrt(q.shape[1])
    qd, kd, vd = q.data, k.data, v.data
    kg = kd[nbr]
    vg = vd[nbr]
    logits = np.einsum("nd,nkd->nk", qd, kg) * scale
    logits[~valid] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkd->nd", a, vg)
    rows = np.repeat(np.arange(n), slots)
    cols = nbr.reshape(-1)

    def backward(g):
        ga = np.einsum("nd,nkd->nk", g, vg)
        gs = a * (ga - (a * ga).sum(axis=1, keepdims=True)) * scale
        gq = np.einsum("nk,nkd->nd", gs, kg)
        gk = sp.csr_matrix((gs.reshape(-1), (rows, cols)), shape=(n, k.shape[0])).T @ qd
        gv = sp.csr_matrix((a.reshape(-1), (rows, cols)), shape=(n, v.shape[0])).T @ g
        return gq, gk, gv

    return Tensor.from_op(out, (q, k, v), backward)


def cross_attention_skip(queries: DenseGrid, kv: DenseGrid, block: CrossAttentionSkip) -> DenseGrid:
    """Skipped feature per query voxel from multi-head attention over kv voxels.

    With ``cfg.window`` set, each query attends to the kv voxels in its
    neighbourhood instead of the (possibly capped) global key set.
    """
    if queries.extents != kv.extents or not np.isclose(queries.voxel_size, kv.voxel_size):
        raise ShapeError(f"query grid {queries.extents} and kv grid {kv.extents} differ in geometry")
    center, half = grid_frame(queries)
    pe_all = block.pos(queries.centroids(), center, half)
    q_in = concat([queries.flat(), pe_all], axis=1)
    if block.cfg.window is not None:
        nbr, valid = window_neighbors(queries.extents, block.cfg.window)
        kv_in = concat([kv.flat(), pe_all], axis=1)
        heads = [windowed_attention(matmul(q_in, wq), matmul(kv_in, wk), matmul(kv_in, wv), nbr, valid)
                 for wq, wk, wv in zip(block.wq, block.wk, block.wv)]
        out = linear(concat(heads, axis=1), block.wo, block.bo)
        X, Y, Z = queries.extents
        return DenseGrid(reshape(out, (X, Y, Z, out.shape[1])), queries.voxel_size, queries.origin)
    keep = select_keys(kv.flat().data, block.cfg.max_keys)
    kv_flat = kv.flat()
    if len(keep) < kv.n_cells:
        kv_rows = take_rows(kv_flat, keep)
        pe_kv = take_rows(pe_all, keep)
    else:
        kv_rows, pe_kv = kv_flat, pe_all
    kv_in = concat([kv_rows, pe_kv], axis=1)
    heads = []
    for wq, wk, wv in zip(block.wq, block.wk, block.wv):
        a = attention_weights(matmul(q_in, wq), matmul(kv_in, wk))
        heads.append(matmul(a, matmul(kv_in, wv)))
    out = linear(concat(heads, axis=1), block.wo, block.bo)
    X, Y, Z = queries.extents
    return DenseGrid(reshape(out, (X, Y, Z, out.shape[1])), queries.voxel_size, queries.origin)


class SkipFusion(Module):
    """Concatenate decoder and skipped features, project back to decoder width."""

    def __init__(self, d_dec: int, d_skip: int, rng: np.random.Generator, identity: bool = False):
        self.weight = parameter((d_dec + d_skip, d_dec), rng, fan_in=d_dec + d_skip, init="xavier")
        if identity:
            self.weight.data[:] = 0.0
            self.weight.data[:d_dec] = np.eye(d_dec)
        self.bias = parameter((d_dec,), rng, init="zeros")


def fuse_skip(decoder: DenseGrid, skipped: DenseGrid, fusion: SkipFusion) -> DenseGrid:
    if decoder.extents != skipped.extents:
        raise ShapeError(f"decoder {decoder.extents} and skipped {skipped.extents} extents differ")
    x = concat([decoder.flat(), skipped.flat()], axis=1)
    out = linear(x, fusion.weight, fusion.bias)
    X, Y, Z = decoder.extents
    return DenseGrid(reshape(out, (X, Y, Z, decoder.width)), decoder.voxel_size, decoder.origin)
