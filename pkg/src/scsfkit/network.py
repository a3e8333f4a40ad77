"""The forecasting network: a sparse 4D encoder over a scale ladder, a dense
decoder with cross-attention skips, and an implicit-field head.

The same assembly serves the semantic model and the binary visibility model;
only the head width and the input channels differ.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .densegrid import (
    ClassInfo,
    ConvWeights3D,
    DenseGrid,
    SemanticVoxelGrid,
    UpConvWeights,
    dilated_conv3d,
    fill_dense,
    grid_relu,
    up_conv3d,
)
from .implicitfield import ImplicitField, render_high_res, sample_training_points, scsf_loss
from .optim import AdamW
from .skipattn import AttentionConfig, CrossAttentionSkip, PositionalEmbedding, SkipFusion, fuse_skip
from .sparse4d import (
    KernelMap,
    KernelWeights4D,
    Sequence,
    SparseTensor4D,
    build_kernel_map,
    sparse_conv,
    temporal_collapse,
    voxelize,
)
from .tensor import MLP, Module, NonFiniteError, ShapeError, relu

BINARY_CLASSES = [ClassInfo("not_visible_empty"), ClassInfo("visible_empty")]

MODES = ("semantic", "binary-visibility")


@dataclass
class NetworkConfig:
    classes: list[ClassInfo]
    in_channels: int
    mode: str = "semantic"
    input_voxel_size: float = 0.05
    ladder: tuple[float, ...] = (0.10, 0.20, 0.40)
    widths: tuple[int, ...] = (16, 32, 48)
    dilations: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 3
    attention: list[AttentionConfig] | None = None  # one per non-coarsest scale
    head_hidden: tuple[int, ...] = (64, 64)
    world_extents: tuple[float, float, float] = (2.4, 1.6, 2.4)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    output_voxel_size: float = 0.05
    input_frames: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "binary-visibility" and len(self.classes) != 2:
            raise ValueError("binary-visibility mode needs exactly two classes")
        lad = (self.input_voxel_size,) + tuple(self.ladder)
        if any(b <= a for a, b in zip(lad, lad[1:])):
            raise ValueError(f"scale ladder must strictly increase: {lad}")
        if any(not np.isclose(b, 2 * a) for a, b in zip(lad, lad[1:])):
            raise ValueError("each ladder step must double the voxel size")
        if len(self.widths) != len(self.ladder) or len(self.dilations) != len(self.ladder):
            raise ValueError("one width and one dilation per ladder scale")
        if self.attention is None:
            self.attention = [AttentionConfig(heads=2, max_keys=256, window=1) for _ in self.ladder[:-1]]
        if len(self.attention) != len(self.ladder) - 1:
            raise ValueError("one attention config per non-coarsest scale")
        for vs in self.ladder + (self.output_voxel_size,):
            self.extents_at(vs)
        if self.output_voxel_size > self.ladder[0] + 1e-12:
            raise ValueError("output resolution must be at or below the base grid size")

    def extents_at(self, voxel_size: float) -> tuple[int, int, int]:
        ext = np.asarray(self.world_extents) / voxel_size
        if not np.allclose(ext, np.round(ext), atol=1e-6):
            raise ValueError(f"world extents {self.world_extents} are not a multiple of {voxel_size}")
        return tuple(int(v) for v in np.round(ext))

    @property
    def base_extents(self) -> tuple[int, int, int]:
        return self.extents_at(self.ladder[0])

    @property
    def output_extents(self) -> tuple[int, int, int]:
        return self.extents_at(self.output_voxel_size)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [[c.name, c.movable] for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["classes"] = [ClassInfo(n, bool(m)) for n, m in d["classes"]]
        d["attention"] = [AttentionConfig(**a) for a in d["attention"]]
        for key in ("ladder", "widths", "dilations", "head_hidden", "world_extents", "origin"):
            d[key] = tuple(d[key])
        return cls(**d)


class ScaleBlock(Module):
    """Encoder stage: stride-2 down conv, a spatial conv, a temporal conv and a dilated dense conv.

    The space-time mixing is factorized into a 3x3x3x1 and a 1x1x1xkt kernel;
    a full 3x3x3xkt kernel costs kt times more triples per site.
    """

    def __init__(self, d_in: int, d_out: int, kt: int, rng: np.random.Generator):
        self.down = KernelWeights4D((2, 2, 2, 1), d_in, d_out, rng)
        self.spatial = KernelWeights4D((3, 3, 3, 1), d_out, d_out, rng)
        self.temporal = KernelWeights4D((1, 1, 1, kt), d_out, d_out, rng)
        self.dense = ConvWeights3D(d_out, d_out, rng)

    @property
    def stages(self) -> list[tuple[KernelWeights4D, int]]:
        return [(self.down, 2), (self.spatial, 1), (self.temporal, 1)]


class DecoderStage(Module):
    def __init__(self, d_in: int, d_out: int, d_skip: int, att: AttentionConfig, rng: np.random.Generator):
        self.up = UpConvWeights(d_in, d_out, rng)
        pos = PositionalEmbedding(att.n_freqs, att.pe_hidden, att.pe_width, rng)
        self.skip = CrossAttentionSkip(d_out, d_skip, d_out, att, pos, rng)
        self.fusion = SkipFusion(d_out, d_out, rng)
        self.refine = ConvWeights3D(d_out, d_out, rng)


class SCSFModel(Module):
    def __init__(self, config: NetworkConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        w = config.widths
        self.encoder = []
        d = config.in_channels
        for wi in w:
            self.encoder.append(ScaleBlock(d, wi, config.temporal_kernel, rng))
            d = wi
        self.decoder = []
        for i in range(len(w) - 2, -1, -1):
            self.decoder.append(DecoderStage(w[i + 1], w[i], w[i], config.attention[i], rng))
        self.head = MLP([w[0], *config.head_hidden, config.n_classes], rng)

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = {f"param.{k}": v for k, v in self.state_dict().items()}
        arrays["config.json"] = np.frombuffer(json.dumps(self.config.to_dict()).encode(), dtype=np.uint8).astype(np.float64)
        arrays.update(extra or {})
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> tuple["SCSFModel", dict[str, np.ndarray]]:
        arrays = load_checkpoint(path)
        cfg = NetworkConfig.from_dict(json.loads(bytes(arrays.pop("config.json").astype(np.uint8)).decode()))
        model = cls(cfg)
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        model.load_state_dict(params)
        rest = {k: v for k, v in arrays.items() if not k.startswith("param.")}
        return model, rest


@dataclass
class PreparedInput:
    """Voxelized input with kernel maps, reusable across forward passes."""

    voxels: SparseTensor4D
    maps: list[list[KernelMap]]


def prepare_input(model: SCSFModel, seq: Sequence) -> PreparedInput:
    cfg = model.config
    if len(seq) != cfg.input_frames:
        raise ValueError(f"expected {cfg.input_frames} input frames, got {len(seq)}")
    if any(len(f) == 0 for f in seq.frames):
        raise ValueError("input frames must be nonempty")
    if seq.frames[0].features.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {seq.frames[0].features.shape[1]} channels, model expects {cfg.in_channels}")
    st = voxelize(seq, cfg.input_voxel_size, origin=np.asarray(cfg.origin, dtype=np.float64))
    maps = []
    cur = st
    for block in model.encoder:
        block_maps = []
        for kern, stride in block.stages:
            km = build_kernel_map(cur, kern.extents, stride=stride)
            block_maps.append(km)
            cur = SparseTensor4D(km.out_coords, np.zeros((len(km.out_coords), 0)), cur.voxel_size * stride,
                                 km.out_stride, km.out_temporal_stride, cur.origin)
        maps.append(block_maps)
    return PreparedInput(st, maps)


def encode(model: SCSFModel, prep: PreparedInput) -> list[DenseGrid]:
    """Dilated-convolution grids, finest scale first."""
    cfg = model.config
    x = prep.voxels
    out = []
    origin = np.asarray(cfg.origin, dtype=np.float64)
    for block, kmaps, dil in zip(model.encoder, prep.maps, cfg.dilations):
        for (kern, stride), km in zip(block.stages, kmaps):
            x = sparse_conv(x, kern, stride=stride, kmap=km)
            x = x.with_features(relu(x.features))
        with warnings.catch_warnings():
            # sites grown past the room box by the kernel footprint are expected
            warnings.simplefilter("ignore")
            g = fill_dense(temporal_collapse(x), cfg.extents_at(x.voxel_size), origin=origin)
        out.append(grid_relu(dilated_conv3d(g, block.dense.weight, block.dense.bias, dilation=dil)))
    return out


def decode(model: SCSFModel, skips: list[DenseGrid]) -> DenseGrid:
    h = skips[-1]
    for stage, i in zip(model.decoder, range(len(skips) - 2, -1, -1)):
        h = grid_relu(up_conv3d(h, stage.up.weight, stage.up.bias))
        s = stage.skip(h, skips[i])
        h = fuse_skip(h, s, stage.fusion)
        h = grid_relu(dilated_conv3d(h, stage.refine.weight, stage.refine.bias))
    return h


def forward(model: SCSFModel, seq: Sequence | PreparedInput) -> ImplicitField:
    """Past frames to an implicit field over the base grid E."""
    prep = seq if isinstance(seq, PreparedInput) else prepare_input(model, seq)
    E = decode(model, encode(model, prep))
    if E.extents != model.config.base_extents:
        raise ShapeError(f"decoder produced {E.extents}, expected {model.config.base_extents}")
    return ImplicitField(E, model.head, model.config.classes)


# --- training --------------------------------------------------------------------------


@dataclass
class Window:
    """One training example: past frames and the target frame's label grid."""

    inputs: Sequence
    target: SemanticVoxelGrid
    name: str = ""
    last_input_gt: SemanticVoxelGrid | None = None


def semantic_windows(gs, n_in: int = 3) -> list[Window]:
    out = []
    for s in range(len(gs.sequence.frames) - n_in):
        t = s + n_in
        out.append(Window(gs.inputs(n_in, s), gs.gt[t], f"{gs.name}@{s}", gs.gt[t - 1]))
    return out


def visibility_windows(gs, n_in: int = 3) -> list[Window]:
    from .visibility import visibility_sequence, visibility_to_binary

    out = []
    for s in range(len(gs.visibility) - n_in):
        past = gs.visibility[s : s + n_in]
        out.append(Window(visibility_sequence(past, list(range(s, s + n_in))), visibility_to_binary(gs.visibility[s + n_in]), f"{gs.name}@{s}"))
    return out


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 3e-3
    lr_min_ratio: float = 0.05
    warmup: int = 50
    weight_decay: float = 1e-4
    points_per_step: int = 4096
    class_weights: tuple[float, ...] | None = None
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    grad_clip: float | None = 5.0
    cache_inputs: bool = True  # keep every window's voxels and kernel maps between steps

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``lr_min_ratio * lr``."""
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.steps - self.warmup, 1)
        frac = min((step - self.warmup) / span, 1.0)
        return self.lr * (self.lr_min_ratio + (1 - self.lr_min_ratio) * 0.5 * (1 + np.cos(np.pi * frac)))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def _window_at(step: int, n: int, seed: int, cache: dict[int, np.ndarray]) -> int:
    """Window index for a step: epoch ``step // n`` visits a seeded permutation.

    Depends only on (seed, step), so a resumed run replays the same schedule.
    """
    epoch = step // n
    if epoch not in cache:
        cache.clear()
        cache[epoch] = np.random.default_rng([seed, epoch, 1]).permutation(n)
    return int(cache[epoch][step % n])


def _clip_grads(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def train(
    model: SCSFModel,
    windows: list[Window],
    cfg: TrainConfig,
    log_path=None,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    on_step=None,
    stop_step: int | None = None,
) -> TrainLog:
    """AdamW over point samples drawn fresh from the target grid at every step.

    Windows are visited in a seeded shuffled order per epoch. Each record has
    step, loss, lr and wall_time. A non-finite loss raises with the step and
    window name. ``stop_step`` ends the run early without changing the
    learning-rate schedule, so a later call with ``start_step`` continues it.
    """
    if not windows:
        raise ValueError("no training windows")
    named = list(model.named_parameters())
    opt = optimizer or AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt.weight_decay = cfg.weight_decay
    preps = [prepare_input(model, w.inputs) for w in windows] if cfg.cache_inputs else None
    n = len(windows)
    log = TrainLog()
    fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    orders: dict[int, np.ndarray] = {}
    try:
        end = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
        for step in range(start_step, end):
            wi = _window_at(step, n, cfg.seed, orders)
            rng = np.random.default_rng([cfg.seed, step])
            samples = sample_training_points(windows[wi].target, cfg.points_per_step, rng)
            lr = cfg.lr_at(step)
            opt.lr = lr
            opt.zero_grad()
            prep = preps[wi] if preps is not None else prepare_input(model, windows[wi].inputs)
            loss = scsf_loss(forward(model, prep), samples, cfg.class_weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at step {step} on window {windows[wi].name}")
            if lr > 0.0:
                loss.backward()
                if cfg.grad_clip:
                    _clip_grads([p for _, p in opt.named], cfg.grad_clip)
                opt.step()
            rec = {"step": step, "loss": value, "lr": lr, "wall_time": round(time.perf_counter() - t0, 4)}
            log.records.append(rec)
            if fh and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if cfg.checkpoint_every and cfg.checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
                save_training_state(Path(cfg.checkpoint_dir) / "last.ckpt", model, opt, step + 1)
            if on_step:
                on_step(step, value)
    finally:
        if fh:
            fh.close()
    return log


def save_training_state(path, model: SCSFModel, opt: AdamW, step: int) -> None:
    extra = {f"opt.{k}": v for k, v in opt.state_dict().items()}
    extra["train.step"] = np.array([float(step)])
    model.save(path, extra)


def load_training_state(path) -> tuple[SCSFModel, AdamW, int]:
    model, rest = SCSFModel.load(path)
    opt = AdamW(list(model.named_parameters()))
    opt.load_state_dict({k[4:]: v for k, v in rest.items() if k.startswith("opt.")})
    return model, opt, int(rest["train.step"][0])


# --- inference -------------------------------------------------------------------------


def render(model: SCSFModel, seq, mask=None) -> SemanticVoxelGrid:
    cfg = model.config
    field_ = forward(model, seq)
    return render_high_res(field_, cfg.output_extents, cfg.output_voxel_size, np.asarray(cfg.origin, dtype=np.float64), mask=mask)


def forecast(model: SCSFModel, vis_model: SCSFModel | None, seq: Sequence, past_visibility=None) -> SemanticVoxelGrid:
    """Main field rendered at output resolution, masked by the forecast visibility grid."""
    from .visibility import GridSpec, forecast_visibility

    cfg = model.config
    if vis_model is None:
        return render(model, seq)
    vc = vis_model.config
    if vc.output_extents != cfg.output_extents or not np.isclose(vc.output_voxel_size, cfg.output_voxel_size) or not np.allclose(vc.origin, cfg.origin):
        raise ShapeError("semantic and visibility models disagree on output geometry")
    if past_visibility is None:
        raise ValueError("the visibility model needs the past visibility grids")
    spec = GridSpec(cfg.output_extents, cfg.output_voxel_size, np.asarray(cfg.origin, dtype=np.float64))
    mask = forecast_visibility(vis_model, past_visibility, spec)
    return render(model, seq, mask=mask)


def persistence(window: Window) -> SemanticVoxelGrid:
    """Baseline forecast: the last input frame's ground truth."""
    if window.last_input_gt is None:
        raise ValueError("window carries no last-input ground truth")
    return window.last_input_gt.copy()


def default_semantic_config(scene_cfg, **kw) -> NetworkConfig:
    return NetworkConfig(
        classes=scene_cfg.class_table,
        in_channels=scene_cfg.n_features,
        world_extents=tuple(scene_cfg.world_extents),
        output_voxel_size=scene_cfg.voxel_size,
        input_voxel_size=scene_cfg.voxel_size,
        **kw,
    )


def default_visibility_config(scene_cfg, **kw) -> NetworkConfig:
    kw.setdefault("widths", (8, 16, 32))
    return NetworkConfig(
        classes=list(BINARY_CLASSES),
        in_channels=1,
        mode="binary-visibility",
        world_extents=tuple(scene_cfg.world_extents),
        output_voxel_size=scene_cfg.voxel_size,
        input_voxel_size=scene_cfg.voxel_size,
        **kw,
    )
