"""
Visibility grid of one synthetic frame
=======================================

Every depth point casts a segment back to the camera. Voxels the segment
crosses are visible-empty, the voxel holding the point is a surface and
the rest of the room stays unknown. The ASCII slice below is the y = 2
layer seen from above (x down, z across).
"""

import numpy as np

from scsfkit.scenegen import SceneConfig, generate_sequence
from scsfkit.visibility import OCCLUDED, SURFACE, VISIBLE_EMPTY

cfg = SceneConfig(frames=4)
gs = generate_sequence(cfg, seed=11, name="demo")
vis = gs.visibility[0]
counts = {name: int(np.count_nonzero(vis.labels == k)) for name, k in
          [("unknown", OCCLUDED), ("visible-empty", VISIBLE_EMPTY), ("surface", SURFACE)]}
print("points in frame 0:", len(gs.sequence.frames[0]))
print("voxel counts:", counts)
print("relabelled corner clips:", gs.reconciled)

###############################################################################
# '.' visible-empty, '#' surface, ' ' unknown; 'o' marks GT-occupied cells
# the camera never reached.
glyph = {OCCLUDED: " ", VISIBLE_EMPTY: ".", SURFACE: "#"}
layer = vis.labels[:, 2, :]
occ = gs.gt[0].labels[:, 2, :] != 0
for i in range(layer.shape[0]):
    print("".join("o" if (layer[i, k] == OCCLUDED and occ[i, k]) else glyph[int(layer[i, k])] for k in range(layer.shape[1])))
