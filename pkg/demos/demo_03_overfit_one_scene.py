"""
Overfitting one synthetic scene
===============================

A small forecasting network trained on the two windows of a single
sequence should drive the implicit-field loss far below chance. Chance
level for a uniform guess over the class table is ln(c); the sanity bar
is one tenth of that. The rendered forecast is then compared with the
target frame and with the persistence baseline.
"""

import numpy as np

from scsfkit.config import load_config
from scsfkit.metrics import iou, miou
from scsfkit.network import SCSFModel, TrainConfig, persistence, render, semantic_windows, train
from scsfkit.scenegen import generate_sequence

cfg = load_config(None, ["net.widths=8, 16, 24", "scene.frames=5", "scene.speed_range=0.25, 0.4"])
gs = generate_sequence(cfg.scene, seed=2024, name="overfit")
windows = semantic_windows(gs)
model = SCSFModel(cfg.network_config("semantic"))
bar = 0.1 * np.log(len(cfg.scene.class_table))
print(f"{len(windows)} windows, {sum(p.size for p in model.parameters())} parameters, bar {bar:.3f}")

###############################################################################
# Train with a warmup and cosine decay; print every 25th loss.
log = train(model, windows, TrainConfig(steps=150, lr=3e-3, warmup=20))
for r in log.records[::25] + log.records[-1:]:
    print(f"step {r['step']:4d}  loss {r['loss']:.4f}  lr {r['lr']:.2e}")
first = next((r["step"] for r in log.records if r["loss"] < bar), None)
print("first step below the bar:", first)

###############################################################################
# The memorised forecast against the target and against persistence.
for w in windows:
    pred = render(model, w.inputs)
    print(f"{w.name}: model IoU {iou(pred, w.target):.3f} mIoU {miou(pred, w.target)[0]:.3f} | "
          f"persistence IoU {iou(persistence(w), w.target):.3f}")
