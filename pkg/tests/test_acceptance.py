"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they happen; the
terminal summary repeats them at the end of any run. Criteria 6 and 7 share one
desk-scale run configured by ``configs/desk.cfg``.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import criterion
from oracles import chamfer_bruteforce, confusion_bruteforce, dense_conv4d, iou_from_counts, visibility_oracle
from scsfkit.cli import aggregate, evaluate_dataset, read_grid_file
from scsfkit.config import load_config
from scsfkit.densegrid import (
    ClassInfo,
    ConvWeights3D,
    DenseGrid,
    SemanticVoxelGrid,
    UpConvWeights,
    dilated_conv3d,
    dumps_grid,
    loads_grid,
    up_conv3d,
)
from scsfkit.implicitfield import (
    ImplicitField,
    TrainingSample,
    query_semantic,
    sample_training_points,
    scsf_loss,
    trilinear_interpolate,
    trilinear_weights,
)
from scsfkit.metrics import chamfer, confusion_counts, iou, miou, movable_static_iou
from scsfkit.network import (
    NetworkConfig,
    SCSFModel,
    TrainConfig,
    forward,
    load_training_state,
    save_training_state,
    semantic_windows,
    train,
    visibility_windows,
)
from scsfkit.optim import AdamW
from scsfkit.scenegen import Dataset, SceneConfig, generate_dataset, generate_sequence, sequences_equal, write_dataset
from scsfkit.skipattn import AttentionConfig, CrossAttentionSkip, PositionalEmbedding, SkipFusion, cross_attention_skip, fuse_skip
from scsfkit.sparse4d import KernelWeights4D, PointCloudFrame, Sequence, SparseTensor4D, dump_sparse, load_sparse, sparse_conv
from scsfkit.tensor import MLP, Tensor, grad_check, mul, no_grad, tsum
from scsfkit.visibility import GridSpec, compute_visibility_grid

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
CLASSES = [ClassInfo("empty"), ClassInfo("block"), ClassInfo("ball", True)]
EPS = 1e-5


# --- criterion 1: gradient integrity -------------------------------------------------------


def param_grad_error(loss_fn, module, rng, per_tensor: int | None = None) -> float:
    """grad_check's error measure applied to a module's parameters in place.

    With ``per_tensor`` set, only that many random entries of each parameter
    are finite-differenced.
    """
    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name, p in module.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if per_tensor is not None and flat.size > per_tensor:
            idx = rng.choice(flat.size, per_tensor, replace=False)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + EPS
                fp = loss_fn().item()
                flat[i] = orig - EPS
                fm = loss_fn().item()
                flat[i] = orig
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - (fp - fm) / (2 * EPS)) / max(1.0, abs(a)))
    return worst


def randomize_zero_params(module, rng) -> None:
    """Zero-initialized biases would hide gradient paths; give them random values."""
    for _, p in module.named_parameters():
        if not np.any(p.data):
            p.data[...] = rng.normal(scale=0.3, size=p.shape)


def tiny_model(rng) -> tuple[SCSFModel, Sequence, SemanticVoxelGrid]:
    att = [AttentionConfig(heads=2, d_k=3, d_v=2, n_freqs=2, pe_hidden=4, pe_width=3, window=1) for _ in range(2)]
    cfg = NetworkConfig(classes=CLASSES, in_channels=2, widths=(2, 3, 4), attention=att, head_hidden=(4,),
                        world_extents=(0.4, 0.4, 0.4), seed=11)
    assert cfg.base_extents == (4, 4, 4)
    model = SCSFModel(cfg)
    randomize_zero_params(model, rng)
    frames = []
    for t in range(3):
        pts = rng.uniform(0.0, 0.4, size=(25, 3))
        frames.append(PointCloudFrame(pts, rng.normal(size=(25, 2)), t))
    labels = rng.integers(0, 3, size=cfg.output_extents).astype(np.int16)
    gt = SemanticVoxelGrid(labels, cfg.output_voxel_size, np.zeros(3), CLASSES)
    return model, Sequence(frames), gt


def op_gradient_errors(rng) -> dict[str, float]:
    errs: dict[str, float] = {}

    def weighted(t: Tensor, w: np.ndarray) -> Tensor:
        return tsum(mul(t, Tensor(w)))

    pts = np.unique(np.stack([rng.integers(0, 4, 12) for _ in range(4)], axis=1), axis=0)
    st_ = SparseTensor4D.build(pts, rng.normal(size=(len(pts), 2)), voxel_size=0.1)
    k = KernelWeights4D((3, 3, 3, 2), 2, 3, rng)
    k.bias.data[:] = rng.normal(size=3)
    for stride in (1, 2):
        w = rng.normal(size=(len(sparse_conv(st_, k, stride)), 3))
        errs[f"sparse_conv s{stride} input"] = grad_check(lambda t: weighted(sparse_conv(st_.with_features(t), k, stride).features, w), st_.features.data, EPS)
        errs[f"sparse_conv s{stride} params"] = param_grad_error(lambda: weighted(sparse_conv(st_, k, stride).features, w), k, rng)

    x = rng.normal(size=(3, 4, 3, 2))
    cw = ConvWeights3D(2, 3, rng)
    cw.bias.data[:] = rng.normal(size=3)
    for d in (1, 2):
        w = rng.normal(size=(3, 4, 3, 3))
        errs[f"dilated_conv3d d{d} input"] = grad_check(lambda t: weighted(dilated_conv3d(DenseGrid(t, 0.1), cw.weight, cw.bias, d).features, w), x, EPS)
        errs[f"dilated_conv3d d{d} weight"] = grad_check(lambda t: weighted(dilated_conv3d(DenseGrid(Tensor(x), 0.1), t, cw.bias, d).features, w), cw.weight.data, EPS)
        errs[f"dilated_conv3d d{d} bias"] = grad_check(lambda t: weighted(dilated_conv3d(DenseGrid(Tensor(x), 0.1), cw.weight, t, d).features, w), cw.bias.data, EPS)

    uw = UpConvWeights(2, 3, rng)
    wu = rng.normal(size=(6, 8, 6, 3))
    errs["up_conv3d input"] = grad_check(lambda t: weighted(up_conv3d(DenseGrid(t, 0.1), uw.weight, uw.bias).features, wu), x, EPS)
    errs["up_conv3d weight"] = grad_check(lambda t: weighted(up_conv3d(DenseGrid(Tensor(x), 0.1), t, uw.bias).features, wu), uw.weight.data, EPS)
    errs["up_conv3d bias"] = grad_check(lambda t: weighted(up_conv3d(DenseGrid(Tensor(x), 0.1), uw.weight, t).features, wu), rng.normal(size=3), EPS)

    qx, kx = rng.normal(size=(2, 3, 2, 3)), rng.normal(size=(2, 3, 2, 3))
    for label, kw in (("global", dict(max_keys=7)), ("windowed", dict(window=1))):
        cfg = AttentionConfig(heads=2, d_k=3, d_v=2, n_freqs=2, pe_hidden=4, pe_width=3, **kw)
        block = CrossAttentionSkip(3, 3, 4, cfg, PositionalEmbedding(cfg.n_freqs, cfg.pe_hidden, cfg.pe_width, rng), rng)
        randomize_zero_params(block, rng)
        w = rng.normal(size=(2, 3, 2, 4))
        errs[f"cross_attention_skip {label} queries"] = grad_check(lambda t: weighted(cross_attention_skip(DenseGrid(t, 0.1), DenseGrid(Tensor(kx), 0.1), block).features, w), qx, EPS)
        errs[f"cross_attention_skip {label} kv"] = grad_check(lambda t: weighted(cross_attention_skip(DenseGrid(Tensor(qx), 0.1), DenseGrid(t, 0.1), block).features, w), kx, EPS)
        errs[f"cross_attention_skip {label} params"] = param_grad_error(
            lambda: weighted(cross_attention_skip(DenseGrid(Tensor(qx), 0.1), DenseGrid(Tensor(kx), 0.1), block).features, w), block, rng)

    fusion = SkipFusion(3, 2, rng)
    randomize_zero_params(fusion, rng)
    dec, skip = rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 2, 2, 2))
    w = rng.normal(size=(2, 2, 2, 3))
    errs["fuse_skip decoder"] = grad_check(lambda t: weighted(fuse_skip(DenseGrid(t, 0.1), DenseGrid(Tensor(skip), 0.1), fusion).features, w), dec, EPS)
    errs["fuse_skip skip"] = grad_check(lambda t: weighted(fuse_skip(DenseGrid(Tensor(dec), 0.1), DenseGrid(t, 0.1), fusion).features, w), skip, EPS)
    errs["fuse_skip params"] = param_grad_error(lambda: weighted(fuse_skip(DenseGrid(Tensor(dec), 0.1), DenseGrid(Tensor(skip), 0.1), fusion).features, w), fusion, rng)

    g = rng.normal(size=(3, 2, 4, 2))
    p = rng.uniform(-0.05, 0.35, size=(40, 3))
    w = rng.normal(size=(40, 2))
    errs["trilinear_interpolate"] = grad_check(lambda t: weighted(trilinear_interpolate(DenseGrid(t, 0.1), p), w), g, EPS)

    head = MLP((2, 5, 3), rng)
    randomize_zero_params(head, rng)
    labels = rng.integers(0, 3, size=40)
    sample = TrainingSample(p, labels)
    errs["MLP head input"] = grad_check(lambda t: scsf_loss(ImplicitField(DenseGrid(t, 0.1), head, CLASSES), sample), g, EPS)
    errs["MLP head params"] = param_grad_error(lambda: scsf_loss(ImplicitField(DenseGrid(Tensor(g), 0.1), head, CLASSES), sample), head, rng)

    model, seq, gt = tiny_model(rng)
    samples = sample_training_points(gt, gt.labels.size, rng)
    errs["forward + L_high, 4^3 base grid"] = param_grad_error(lambda: scsf_loss(forward(model, seq), samples), model, rng, per_tensor=6)
    return errs


def test_criterion_1_gradient_integrity():
    with criterion(1, "gradient integrity") as c:
        errs = op_gradient_errors(np.random.default_rng(101))
        worst = max(errs, key=errs.get)
        c["ok"] = errs[worst] < 1e-4
        c["detail"] = f"{len(errs)} checks, worst {worst} = {errs[worst]:.2e} (gate < 1e-4)"
    assert c["ok"], errs
    assert c["elapsed"] < 120


# --- criterion 2: sparse conv vs dense 4D oracle ------------------------------------------


def test_criterion_2_sparse_conv_oracle():
    rng = np.random.default_rng(202)
    extents_pool = [(3, 3, 3, 3), (2, 2, 2, 1), (3, 3, 3, 1), (1, 1, 1, 3), (3, 1, 2, 2), (2, 2, 2, 2)]
    with criterion(2, "sparse-conv oracle") as c:
        worst = 0.0
        mismatched = 0
        for case in range(100):
            stride = 1 if case % 2 == 0 else 2
            n = int(rng.integers(1, 60))
            pts = np.unique(np.stack([rng.integers(0, b, n) for b in (6, 6, 6, 3)], axis=1), axis=0)
            d_in, d_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            st_ = SparseTensor4D.build(pts, rng.normal(size=(len(pts), d_in)), voxel_size=0.1)
            k = KernelWeights4D(extents_pool[int(rng.integers(len(extents_pool)))], d_in, d_out, rng)
            k.bias.data[:] = rng.normal(size=d_out)
            out = sparse_conv(st_, k, stride)
            ref = dense_conv4d(st_.coords, st_.features.data, k.weight.data, k.bias.data, k.extents,
                               in_stride=(1, 1), out_stride=(stride, 1))
            got = {tuple(int(v) for v in cc): f for cc, f in zip(out.coords, out.features.data)}
            if set(got) != set(ref):
                mismatched += 1
                continue
            worst = max(worst, max((np.abs(got[q] - ref[q]).max() for q in ref), default=0.0))
        c["ok"] = mismatched == 0 and worst < 1e-10
        c["detail"] = f"100 cases (50 per stride), site-set mismatches {mismatched}, max |diff| {worst:.1e} (gate 1e-10)"
    assert c["ok"]
    assert c["elapsed"] < 60


# --- criterion 3: visibility vs exhaustive ray-march oracle -------------------------------


def random_scene_16(rng):
    """A camera and depth-like points on a few random planes inside or near a 16^3 grid."""
    spec = GridSpec((16, 16, 16), 0.1, rng.uniform(-0.3, 0.3, size=3))
    span = 1.6
    cam = spec.origin + rng.uniform(-0.2 * span, 1.2 * span, size=3)
    pts = []
    for _ in range(int(rng.integers(1, 4))):
        center = spec.origin + rng.uniform(-0.1, span + 0.1, size=3)
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        u = np.cross(normal, rng.normal(size=3))
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        ab = rng.uniform(-0.4, 0.4, size=(int(rng.integers(10, 30)), 2))
        pts.append(center + ab[:, :1] * u + ab[:, 1:] * v)
    return spec, cam, np.vstack(pts)


def test_criterion_3_visibility_oracle():
    rng = np.random.default_rng(303)
    with criterion(3, "visibility oracle") as c:
        bad = 0
        for _ in range(50):
            spec, cam, pts = random_scene_16(rng)
            pose = np.eye(4)
            pose[:3, 3] = cam
            got = compute_visibility_grid(PointCloudFrame(pts, np.ones((len(pts), 1)), 0), pose, None, spec)
            ref = visibility_oracle(cam, pts, spec.extents, spec.voxel_size, spec.origin)
            bad += int(not np.array_equal(got.labels, ref))
        c["ok"] = bad == 0
        c["detail"] = f"50 scenes at 16^3, {bad} label mismatches"
    assert c["ok"]
    assert c["elapsed"] < 60


# --- criterion 4: metric oracles ----------------------------------------------------------


METRIC_CLASSES = [ClassInfo("empty"), ClassInfo("wall"), ClassInfo("table"), ClassInfo("toy", True), ClassInfo("robot", True)]


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(404)
    n = len(METRIC_CLASSES)
    movable = [i for i, ci in enumerate(METRIC_CLASSES) if ci.movable]
    static = [i for i, ci in enumerate(METRIC_CLASSES) if i and not ci.movable]
    with criterion(4, "metric oracles") as c:
        wrong = 0
        for _ in range(100):
            shape = tuple(int(v) for v in rng.integers(1, 9, size=3))
            pl = (rng.integers(0, n, size=shape) * (rng.random(shape) < 0.6)).astype(np.int16)
            gl = (rng.integers(0, n, size=shape) * (rng.random(shape) < 0.6)).astype(np.int16)
            p = SemanticVoxelGrid(pl, 0.1, np.zeros(3), METRIC_CLASSES)
            g = SemanticVoxelGrid(gl, 0.1, np.zeros(3), METRIC_CLASSES)
            tp, fp, fn = confusion_bruteforce(pl, gl, n)
            counts = confusion_counts(p, g, n)
            inter = int(np.sum((pl.ravel() != 0) & (gl.ravel() != 0)))
            union = int(np.sum((pl.ravel() != 0) | (gl.ravel() != 0)))
            per = iou_from_counts(tp, fp, fn, range(1, n))
            ref_miou = float(np.mean(list(per.values()))) if per else None
            mov = [per[i] for i in movable if i in per]
            sta = [per[i] for i in static if i in per]
            got_m, got_s = movable_static_iou(p, g)
            ok = all(np.array_equal(a, b) for a, b in zip(counts, (tp, fp, fn)))
            ok &= iou(p, g) == (1.0 if union == 0 else inter / union)
            got_miou = miou(p, g)[0]
            ok &= (got_miou is None and ref_miou is None) or got_miou == ref_miou
            ok &= got_m == (float(np.mean(mov)) if mov else None)
            ok &= got_s == (float(np.mean(sta)) if sta else None)
            wrong += int(not ok)
        worst = 0.0
        for _ in range(100):
            a = rng.normal(size=(int(rng.integers(1, 200)), 3))
            b = rng.normal(size=(int(rng.integers(1, 200)), 3)) + rng.normal(size=3)
            worst = max(worst, abs(chamfer(a, b) - chamfer_bruteforce(a, b)))
        c["ok"] = wrong == 0 and worst < 1e-12
        c["detail"] = f"100 label cases with {wrong} count/IoU mismatches; 100 chamfer cases, max |diff| {worst:.1e} (gate 1e-12)"
    assert c["ok"]
    assert c["elapsed"] < 60


# --- criterion 5: trilinear exactness ----------------------------------------------------


def test_criterion_5_trilinear_exactness():
    rng = np.random.default_rng(505)
    with criterion(5, "trilinear exactness") as c:
        ext, vs, origin = (7, 5, 6), 0.15, np.array([0.2, -0.3, 0.05])
        A, b = rng.normal(size=(3, 4)), rng.normal(size=4)
        cents = origin + (np.stack(np.meshgrid(*[np.arange(e) for e in ext], indexing="ij"), -1).reshape(-1, 3) + 0.5) * vs
        grid = DenseGrid(Tensor((cents @ A + b).reshape(*ext, 4)), vs, origin)
        lo, hi = origin + 0.5 * vs, origin + (np.array(ext) - 0.5) * vs
        q = rng.uniform(lo, hi, size=(1000, 3))
        affine_err = float(np.abs(trilinear_interpolate(grid, q).data - (q @ A + b)).max())
        anywhere = rng.uniform(origin - 0.3, origin + np.array(ext) * vs + 0.3, size=(1000, 3))
        _, w = trilinear_weights(ext, vs, origin, anywhere)
        unity_err = float(np.abs(w.sum(axis=1) - 1.0).max())
        c["ok"] = affine_err < 1e-10 and unity_err < 1e-12
        c["detail"] = f"affine max err {affine_err:.1e} (gate 1e-10), partition-of-unity max err {unity_err:.1e} (gate 1e-12)"
    assert c["ok"]


# --- criteria 6 and 7: the desk-scale run --------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    t0 = time.perf_counter()
    cfg = load_config(CONFIG)
    root = tmp_path_factory.mktemp("desk") / "dataset"
    seqs = generate_dataset(cfg.scene, cfg.data.sequences)
    write_dataset(seqs, root, cfg.scene)
    del seqs
    data = Dataset(root)
    train_names = data.split("train")
    t_gen = time.perf_counter() - t0

    model = SCSFModel(cfg.network_config("semantic"))
    train(model, [w for n in train_names for w in semantic_windows(data.load(n))], cfg.train)
    t_sem = time.perf_counter() - t0 - t_gen

    vis_model = SCSFModel(cfg.network_config("binary-visibility"))
    train(vis_model, [w for n in train_names for w in visibility_windows(data.load(n))], cfg.vis_train)
    t_vis = time.perf_counter() - t0 - t_gen - t_sem

    scenes = evaluate_dataset(data, model, vis_model, "test")
    total = time.perf_counter() - t0
    return {
        "data": data,
        "scenes": scenes,
        "summary": aggregate(scenes),
        "timing": {"gen": t_gen, "semantic": t_sem, "visibility": t_vis, "eval": total - t_gen - t_sem - t_vis, "total": total},
    }


def test_criterion_6_mask_monotonicity(desk_run):
    with criterion(6, "oracle-mask monotonicity") as c:
        scenes = desk_run["scenes"]
        bad = [s["scene"] for s in scenes if s["oracle"]["iou"] < s["unmasked"]["iou"]]
        gain = np.mean([s["oracle"]["iou"] - s["unmasked"]["iou"] for s in scenes])
        c["ok"] = not bad
        c["detail"] = f"{len(scenes)} test windows, {len(bad)} violations, mean IoU gain from the oracle mask {100 * gain:.2f} points"
    assert c["ok"], bad


def test_criterion_7_desk_scale_learning_signal(desk_run):
    with criterion(7, "desk-scale learning signal") as c:
        s, tm = desk_run["summary"], desk_run["timing"]
        lift = s["unmasked"]["iou"] - s["persistence"]["iou"]
        mask_drop = s["unmasked"]["miou"] - s["model"]["miou"]
        ok_iou = lift >= 0.05
        ok_mask = mask_drop <= 0.005
        ok_time = tm["total"] < 3600
        c["ok"] = ok_iou and ok_mask and ok_time
        c["detail"] = (
            f"model IoU {100 * s['unmasked']['iou']:.2f} vs persistence {100 * s['persistence']['iou']:.2f} "
            f"(lift {100 * lift:+.2f}, gate >= +5.00); "
            f"mIoU unmasked {100 * s['unmasked']['miou']:.2f}, model-masked {100 * s['model']['miou']:.2f} "
            f"(drop {100 * mask_drop:.2f}, gate <= 0.50); "
            f"run {tm['total'] / 60:.1f} min (gen {tm['gen']:.0f} s, semantic {tm['semantic']:.0f} s, "
            f"visibility {tm['visibility']:.0f} s, eval {tm['eval']:.0f} s; gate < 60 min)"
        )
    assert c["ok"], c["detail"]


# --- criterion 8: overfit one scene -------------------------------------------------------


OVERFIT_STEPS = 2000
OVERFIT_RUN = 300  # the gate must be met inside this prefix of the 2000-step schedule


def overfit_curve(cfg, windows) -> list[float]:
    model = SCSFModel(cfg.network_config("semantic"))
    tcfg = TrainConfig(steps=OVERFIT_STEPS, lr=3e-3, warmup=20, seed=5)
    log = train(model, windows, tcfg, stop_step=OVERFIT_RUN)
    return [r["loss"] for r in log.records]


def test_criterion_8_overfit_one_scene():
    cfg = load_config(CONFIG)
    threshold = 0.1 * np.log(len(cfg.scene.class_table))
    with criterion(8, "overfit one scene") as c:
        gs = generate_sequence(cfg.scene, 2024, "overfit")
        windows = semantic_windows(gs)
        a = overfit_curve(cfg, windows)
        b = overfit_curve(cfg, windows)
        below = [i for i, v in enumerate(a) if v < threshold]
        identical = np.array_equal(np.array(a), np.array(b))
        first = below[0] + 1 if below else None
        tail = float(np.max(a[-50:]))
        c["ok"] = first is not None and first <= OVERFIT_STEPS and tail < threshold and identical
        c["detail"] = (
            f"L_high {a[0]:.3f} -> {a[-1]:.4f}, first below 0.1*ln(c) = {threshold:.4f} at step {first} (gate <= {OVERFIT_STEPS}), "
            f"max over the last 50 steps {tail:.4f}; "
            f"two runs bit-identical over {len(a)} steps: {identical}"
        )
    assert c["ok"]


# --- criterion 9: round trips --------------------------------------------------------------


def test_criterion_9_round_trips(tmp_path):
    cfg = load_config(CONFIG)
    with criterion(9, "round trips") as c:
        small = SceneConfig.from_dict({**cfg.scene.to_dict(), "frames": 4, "point_budget": 600, "image_size": (40, 30)})
        seqs = generate_dataset(small, 3)
        write_dataset(seqs, tmp_path / "ds", small)
        back = Dataset(tmp_path / "ds")
        ok_data = all(sequences_equal(a, back.load(a.name)) for a in seqs) and back.config.to_dict() == small.to_dict()

        model = SCSFModel(cfg.network_config("semantic"))
        opt = AdamW(list(model.named_parameters()), lr=1e-3)
        window = semantic_windows(seqs[0])[0]
        train(model, [window], TrainConfig(steps=2, warmup=0), optimizer=opt)
        save_training_state(tmp_path / "m.ckpt", model, opt, 2)
        model2, opt2, step = load_training_state(tmp_path / "m.ckpt")
        sa, sb = model.state_dict(), model2.state_dict()
        oa, ob = opt.state_dict(), opt2.state_dict()
        ok_ckpt = (
            step == 2
            and model.config.to_dict() == model2.config.to_dict()
            and sa.keys() == sb.keys()
            and all(np.array_equal(sa[k], sb[k]) for k in sa)
            and oa.keys() == ob.keys()
            and all(np.array_equal(oa[k], ob[k]) for k in oa)
        )
        with no_grad():
            pts = seqs[0].gt[0].voxel_size * np.random.default_rng(9).uniform(0, 40, size=(200, 3))
            la = query_semantic(forward(model, window.inputs), pts).data
            lb = query_semantic(forward(model2, window.inputs), pts).data
        ok_ckpt &= np.array_equal(la, lb)

        grid = seqs[0].gt[1]
        (tmp_path / "g.grid").write_text(dumps_grid(grid))
        ok_grid = loads_grid(dumps_grid(grid)).structurally_equal(grid) and read_grid_file(tmp_path / "g.grid").structurally_equal(grid)
        rng = np.random.default_rng(90)
        coords = np.stack([rng.integers(-5, 9, 50) for _ in range(4)], axis=1)
        coords[:, :3] *= 2
        coords = np.unique(coords, axis=0)
        st_ = SparseTensor4D.build(coords, rng.normal(size=(len(coords), 3)), voxel_size=0.2, stride=2)
        st2 = load_sparse(dump_sparse(st_))
        ok_sparse = (
            np.array_equal(st_.coords, st2.coords)
            and np.array_equal(st_.features.data, st2.features.data)
            and st_.voxel_size == st2.voxel_size
            and st_.stride == st2.stride
            and np.array_equal(st_.origin, st2.origin)
        )
        c["ok"] = bool(ok_data and ok_ckpt and ok_grid and ok_sparse)
        c["detail"] = f"dataset {ok_data}, checkpoint {ok_ckpt}, semantic grid text {ok_grid}, sparse tensor text {ok_sparse}"
    assert c["ok"]
