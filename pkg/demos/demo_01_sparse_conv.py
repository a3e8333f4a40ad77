"""
Sparse 4D convolution on a moving point
=======================================

A single point drifting along x for three frames is voxelized into a
(x, y, z, t) sparse tensor. A stride-2 down conv halves the spatial
lattice, a temporal kernel mixes the three timesteps, and collapsing time
leaves one 3D grid ready for the dense decoder.
"""

import numpy as np

from scsfkit.sparse4d import (
    KernelWeights4D,
    PointCloudFrame,
    Sequence,
    sparse_conv,
    temporal_collapse,
    voxelize,
)

rng = np.random.default_rng(0)

###############################################################################
# Three frames of a small blob moving 0.1 m per step.
frames = []
for t in range(3):
    pts = np.array([0.30 + 0.1 * t, 0.22, 0.31]) + 0.02 * rng.normal(size=(20, 3))
    frames.append(PointCloudFrame(pts, np.ones((20, 1)), t))
x = voxelize(Sequence(frames), 0.05)
print("input voxels (x y z t):")
print(x.coords)

###############################################################################
# Stride 2 in space only: output coordinates stay in input-voxel units and
# land on even lattice points.
down = KernelWeights4D((2, 2, 2, 1), 1, 4, rng)
y = sparse_conv(x, down, stride=2)
print("after the down conv:", len(y), "sites, stride", y.stride, "voxel size", y.voxel_size)
print(y.coords)

###############################################################################
# A 1x1x1x3 kernel looks across time at a fixed cell.
temporal = KernelWeights4D((1, 1, 1, 3), 4, 4, rng)
z = sparse_conv(y, temporal, stride=1)
flat = temporal_collapse(z)
print("time-collapsed cells:", len(flat))
print(np.round(flat.features.data, 3))
