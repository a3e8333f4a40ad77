from __future__ import annotations

import warnings

import numpy as np
import pytest

from scsfkit.densegrid import (
    ClassInfo,
    ConvWeights3D,
    DenseGrid,
    SemanticVoxelGrid,
    UpConvWeights,
    dilated_conv3d,
    dumps_grid,
    fill_dense,
    loads_grid,
    up_conv3d,
)
from scsfkit.sparse4d import SparseTensor4D
from scsfkit.tensor import Tensor, grad_check, mul, tsum


def naive_dilated(x, W, b, d):
    X, Y, Z, D = x.shape
    out = np.zeros((X, Y, Z, W.shape[2])) + b
    offs = [(a, bb, c) for a in (-1, 0, 1) for bb in (-1, 0, 1) for c in (-1, 0, 1)]
    for i in range(X):
        for j in range(Y):
            for k in range(Z):
                for n, (a, bb, c) in enumerate(offs):
                    p, q, r = i + a * d, j + bb * d, k + c * d
                    if 0 <= p < X and 0 <= q < Y and 0 <= r < Z:
                        out[i, j, k] += x[p, q, r] @ W[n]
    return out


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_dilated_conv_matches_loops(rng, dilation):
    x = rng.normal(size=(4, 5, 3, 2))
    cw = ConvWeights3D(2, 3, rng)
    cw.bias.data[:] = rng.normal(size=3)
    g = dilated_conv3d(DenseGrid(Tensor(x), 0.1), cw.weight, cw.bias, dilation)
    assert np.allclose(g.features.data, naive_dilated(x, cw.weight.data, cw.bias.data, dilation), atol=1e-12)


def test_identity_kernel_is_identity(rng):
    x = rng.normal(size=(3, 3, 3, 4))
    cw = ConvWeights3D(4, 4, rng, identity=True)
    g = dilated_conv3d(DenseGrid(Tensor(x), 0.1), cw.weight, cw.bias, 2)
    assert np.allclose(g.features.data, x)


def test_up_conv_matches_loops(rng):
    x = rng.normal(size=(2, 3, 2, 3))
    uw = UpConvWeights(3, 2, rng)
    uw.bias.data[:] = rng.normal(size=2)
    g = up_conv3d(DenseGrid(Tensor(x), 0.2, np.array([1.0, 0.0, 0.0])), uw.weight, uw.bias)
    assert g.extents == (4, 6, 4) and g.voxel_size == pytest.approx(0.1)
    assert np.array_equal(g.origin, [1.0, 0.0, 0.0])
    ref = np.zeros((4, 6, 4, 2))
    for i in range(2):
        for j in range(3):
            for k in range(2):
                for a in (0, 1):
                    for b in (0, 1):
                        for c in (0, 1):
                            ref[2 * i + a, 2 * j + b, 2 * k + c] = x[i, j, k] @ uw.weight.data[a * 4 + b * 2 + c] + uw.bias.data
    assert np.allclose(g.features.data, ref, atol=1e-12)


def test_up_conv_preserves_world_box(rng):
    g = DenseGrid(Tensor(rng.normal(size=(6, 4, 6, 2))), 0.4)
    up = up_conv3d(g, UpConvWeights(2, 2, rng).weight)
    assert np.allclose(np.array(up.extents) * up.voxel_size, np.array(g.extents) * g.voxel_size)


def test_conv_gradients(rng):
    x = rng.normal(size=(3, 3, 2, 2))
    cw = ConvWeights3D(2, 2, rng)
    w = rng.normal(size=(3, 3, 2, 2))
    assert grad_check(lambda t: tsum(mul(dilated_conv3d(DenseGrid(t, 0.1), cw.weight, cw.bias, 2).features, Tensor(w))), x) < 1e-6
    assert grad_check(lambda t: tsum(mul(dilated_conv3d(DenseGrid(Tensor(x), 0.1), t, cw.bias).features, Tensor(w))), cw.weight.data) < 1e-6
    uw = UpConvWeights(2, 3, rng)
    wu = rng.normal(size=(6, 6, 4, 3))
    assert grad_check(lambda t: tsum(mul(up_conv3d(DenseGrid(t, 0.1), uw.weight, uw.bias).features, Tensor(wu))), x) < 1e-6
    assert grad_check(lambda t: tsum(mul(up_conv3d(DenseGrid(Tensor(x), 0.1), t, uw.bias).features, Tensor(wu))), uw.weight.data) < 1e-6


def test_fill_dense_scatters_and_counts_drops(rng):
    c = np.array([[0, 0, 0, 0], [1, 2, 1, 0], [5, 0, 0, 0], [-1, 0, 0, 0]])
    f = rng.normal(size=(4, 2))
    st_ = SparseTensor4D.build(c, f, voxel_size=0.1)
    with pytest.warns(UserWarning, match="dropped 2"):
        g = fill_dense(st_, (3, 3, 3))
    assert g.dropped == 2
    order = {tuple(r): i for i, r in enumerate(st_.coords)}
    assert np.allclose(g.features.data[1, 2, 1], st_.features.data[order[(1, 2, 1, 0)]])
    assert np.count_nonzero(np.abs(g.features.data).sum(-1)) == 2


def test_fill_dense_requires_single_slice():
    st_ = SparseTensor4D.build(np.array([[0, 0, 0, 0], [0, 0, 0, 1]]), np.ones((2, 1)), voxel_size=0.1)
    with pytest.raises(ValueError):
        fill_dense(st_, (2, 2, 2))


def test_fill_dense_gradient(rng):
    c = np.array([[0, 0, 0, 0], [1, 1, 0, 0], [4, 0, 0, 0]])
    st_ = SparseTensor4D.build(c, rng.normal(size=(3, 2)), voxel_size=0.1)
    w = rng.normal(size=(2, 2, 2, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert grad_check(lambda t: tsum(mul(fill_dense(st_.with_features(t), (2, 2, 2)).features, Tensor(w))), st_.features.data) < 1e-8


def test_grid_text_round_trip(rng):
    labels = rng.integers(0, 4, size=(5, 4, 3)).astype(np.int16)
    classes = [ClassInfo("empty"), ClassInfo("a"), ClassInfo("b", True), ClassInfo("c")]
    g = SemanticVoxelGrid(labels, 0.05, np.array([0.1, -0.2, 0.3]), classes)
    assert loads_grid(dumps_grid(g)).structurally_equal(g)


def test_empty_grid_round_trip():
    g = SemanticVoxelGrid(np.zeros((2, 2, 2), np.int16), 0.1, np.zeros(3), [ClassInfo("empty"), ClassInfo("x")])
    assert loads_grid(dumps_grid(g)).structurally_equal(g)
