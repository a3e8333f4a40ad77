from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dense_conv4d
from scsfkit.sparse4d import (
    KernelWeights4D,
    PointCloudFrame,
    Sequence,
    SparseTensor4D,
    build_kernel_map,
    devoxelize,
    dump_sparse,
    kernel_offsets,
    load_sparse,
    pack_keys,
    sparse_conv,
    temporal_collapse,
    unpack_keys,
    voxelize,
)
from scsfkit.tensor import Tensor, grad_check, mul, tsum

coords4 = arrays(np.int64, st.tuples(st.integers(1, 30), st.just(4)), elements=st.integers(-2000, 2000))


@given(coords4)
def test_pack_unpack_round_trip(c):
    assert np.array_equal(unpack_keys(pack_keys(c)), c)


@given(coords4)
def test_pack_order_is_lexicographic(c):
    order = np.argsort(pack_keys(c), kind="stable")
    lex = np.lexsort((c[:, 3], c[:, 2], c[:, 1], c[:, 0]))
    assert np.array_equal(c[order], c[lex])


def random_sparse(rng, n=40, box=(6, 6, 6, 3), d=3, stride=1):
    pts = np.stack([rng.integers(0, b, n) for b in box], axis=1)
    pts[:, :3] *= stride
    pts = np.unique(pts, axis=0)
    return SparseTensor4D.build(pts, rng.normal(size=(len(pts), d)), voxel_size=0.1 * stride, stride=stride)


def conv_vs_oracle(st_, k, stride):
    out = sparse_conv(st_, k, stride)
    ref = dense_conv4d(st_.coords, st_.features.data, k.weight.data, k.bias.data, k.extents,
                       in_stride=(st_.stride, 1), out_stride=(st_.stride * stride, 1))
    got = {tuple(int(v) for v in c): f for c, f in zip(out.coords, out.features.data)}
    assert set(got) == set(ref)
    return max(np.abs(got[c] - ref[c]).max() for c in ref)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("extents", [(3, 3, 3, 3), (2, 2, 2, 1), (3, 1, 2, 2)])
def test_sparse_conv_matches_dense_oracle(rng, stride, extents):
    st_ = random_sparse(rng)
    k = KernelWeights4D(extents, 3, 2, rng)
    k.bias.data[:] = rng.normal(size=2)
    assert conv_vs_oracle(st_, k, stride) < 1e-10


def test_kernel_map_equals_stencil_enumeration(rng):
    st_ = random_sparse(rng, n=15)
    km = build_kernel_map(st_, (3, 3, 3, 1), 1)
    offs = kernel_offsets((3, 3, 3, 1))
    expected = set()
    outs = {tuple(c) for c in km.out_coords}
    for i, c in enumerate(st_.coords):
        for k, o in enumerate(offs):
            q = tuple(int(v) for v in c - o)
            expected.add((i, q, k))
            assert q in outs
    assert set(km.triples()) == expected


def test_kernel_map_rows_unique_per_offset(rng):
    km = build_kernel_map(random_sparse(rng), (3, 3, 3, 3), 2)
    for j in range(len(km.bounds) - 1):
        sl = slice(km.bounds[j], km.bounds[j + 1])
        assert len(np.unique(km.in_rows[sl])) == km.bounds[j + 1] - km.bounds[j]
        assert len(np.unique(km.out_rows[sl])) == km.bounds[j + 1] - km.bounds[j]


def test_stride_bookkeeping(rng):
    st_ = random_sparse(rng)
    k = KernelWeights4D((2, 2, 2, 1), 3, 4, rng)
    out = sparse_conv(st_, k, 2)
    assert out.stride == 2 and out.voxel_size == pytest.approx(0.2)
    assert np.all(out.coords[:, :3] % 2 == 0)
    out2 = sparse_conv(out, KernelWeights4D((3, 3, 3, 1), 4, 4, rng), 2)
    assert out2.stride == 4 and np.all(out2.coords[:, :3] % 4 == 0)


def test_sparse_conv_gradients(rng):
    st_ = random_sparse(rng, n=20)
    k = KernelWeights4D((3, 3, 3, 3), 3, 2, rng)
    w = rng.normal(size=(len(build_kernel_map(st_, k.extents, 2).out_coords), 2))

    def f_x(x):
        return tsum(mul(sparse_conv(st_.with_features(x), k, 2).features, Tensor(w)))

    assert grad_check(f_x, st_.features.data) < 1e-6

    def f_w(wt):
        kk = KernelWeights4D(k.extents, 3, 2, rng)
        kk.weight = wt
        return tsum(mul(sparse_conv(st_, kk, 2).features, Tensor(w)))

    assert grad_check(f_w, k.weight.data) < 1e-6


def test_voxelize_mean_pools_and_offsets_time():
    f0 = PointCloudFrame(np.array([[0.01, 0.01, 0.01], [0.02, 0.03, 0.04], [0.15, 0.0, 0.0]]), np.array([[1.0], [3.0], [5.0]]), 7)
    f1 = PointCloudFrame(np.array([[0.01, 0.01, 0.01]]), np.array([[9.0]]), 8)
    st_ = voxelize(Sequence([f0, f1]), 0.1, origin=np.zeros(3))
    got = {tuple(c): f[0] for c, f in zip(st_.coords, st_.features.data)}
    assert got == {(0, 0, 0, 0): 2.0, (1, 0, 0, 0): 5.0, (0, 0, 0, 1): 9.0}


def test_voxelize_rejects_empty():
    with pytest.raises(ValueError):
        voxelize(Sequence([PointCloudFrame(np.zeros((0, 3)), np.zeros((0, 2)), 0)]), 0.1)


def test_devoxelize_inverts_centroids(rng):
    st_ = random_sparse(rng)
    seq = devoxelize(st_)
    back = voxelize(seq, st_.voxel_size, origin=st_.origin)
    assert np.array_equal(back.coords, st_.coords)
    assert np.allclose(back.features.data, st_.features.data)


def test_temporal_collapse_means_over_time():
    c = np.array([[0, 0, 0, 0], [0, 0, 0, 2], [1, 0, 0, 1]])
    st_ = SparseTensor4D.build(c, np.array([[1.0], [3.0], [4.0]]), voxel_size=0.1)
    out = temporal_collapse(st_)
    assert out.coords.tolist() == [[0, 0, 0, 0], [1, 0, 0, 0]]
    assert out.features.data.ravel().tolist() == [2.0, 4.0]


def test_index_of(rng):
    st_ = random_sparse(rng)
    assert np.array_equal(st_.index_of(st_.coords), np.arange(len(st_)))
    assert st_.index_of(np.array([[99, 99, 99, 99]]))[0] == -1


def test_dump_load_round_trip(rng):
    st_ = random_sparse(rng, stride=2)
    back = load_sparse(dump_sparse(st_))
    assert np.array_equal(back.coords, st_.coords)
    assert np.array_equal(back.features.data, st_.features.data)
    assert back.voxel_size == st_.voxel_size and back.stride == st_.stride
    assert np.array_equal(back.origin, st_.origin)


def test_conv_output_invariant_to_input_order(rng):
    st_ = random_sparse(rng)
    perm = rng.permutation(len(st_))
    shuffled = SparseTensor4D.build(st_.coords[perm], st_.features.data[perm], voxel_size=0.1)
    k = KernelWeights4D((3, 3, 3, 3), 3, 2, rng)
    a, b = sparse_conv(st_, k, 1), sparse_conv(shuffled, k, 1)
    assert np.array_equal(a.coords, b.coords)
    assert np.allclose(a.features.data, b.features.data, atol=1e-13)
