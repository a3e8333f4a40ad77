"""Run configuration: a flat ``key=value`` text file with dotted keys.

Example::

    # desk-scale run
    data.sequences = 80
    scene.frames = 4
    scene.speed_range = 0.15, 0.3
    scene.counts.robot = 3, 4
    net.widths = 16, 32, 48
    train.steps = 2000

Values are parsed against the type of the default they replace; tuples are
comma-separated. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .network import NetworkConfig, TrainConfig, default_semantic_config, default_visibility_config
from .scenegen import SceneConfig
from .skipattn import AttentionConfig


class ConfigError(ValueError):
    pass


@dataclass
class NetSettings:
    widths: tuple[int, ...] = (16, 32, 48)
    dilations: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 3
    heads: int = 2
    d_k: int = 16
    d_v: int = 16
    n_freqs: int = 6
    max_keys: int | None = 256
    window: int | None = 1
    head_hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


@dataclass
class VisSettings(NetSettings):
    widths: tuple[int, ...] = (8, 16, 32)


@dataclass
class DataSettings:
    sequences: int = 80
    root: str = ""


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataSettings = field(default_factory=DataSettings)
    net: NetSettings = field(default_factory=NetSettings)
    vis_net: VisSettings = field(default_factory=VisSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    vis_train: TrainConfig = field(default_factory=lambda: TrainConfig(class_weights=(2.0, 1.0), cache_inputs=False))

    def network_config(self, mode: str = "semantic") -> NetworkConfig:
        s = self.net if mode == "semantic" else self.vis_net
        att = [AttentionConfig(heads=s.heads, d_k=s.d_k, d_v=s.d_v, n_freqs=s.n_freqs, max_keys=s.max_keys, window=s.window) for _ in s.widths[:-1]]
        kw = dict(widths=tuple(s.widths), dilations=tuple(s.dilations), temporal_kernel=s.temporal_kernel, attention=att,
                  head_hidden=tuple(s.head_hidden), seed=s.seed)
        ladder = tuple(self.scene.voxel_size * 2 ** (i + 1) for i in range(len(s.widths)))
        kw["ladder"] = ladder
        if mode == "semantic":
            return default_semantic_config(self.scene, **kw)
        return default_visibility_config(self.scene, **kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_INT_OR_NONE = {"max_keys", "window"}
_SECTIONS = {"scene": "scene", "data": "data", "net": "net", "vis_net": "vis_net", "train": "train", "vis_train": "vis_train"}


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text: str, like):
    text = text.strip()
    if like is None:
        if text.lower() == "none":
            return None
        parts = [p.strip() for p in text.split(",")]
        return tuple(float(p) for p in parts) if len(parts) > 1 else float(parts[0])
    if isinstance(like, (tuple, list)):
        if text.lower() == "none":
            return None
        parts = [p.strip() for p in text.split(",") if p.strip()]
        proto = like[0] if like else 0.0
        if isinstance(proto, (tuple, list)):
            flat = [float(p) for p in parts]
            n = len(proto)
            if len(flat) % n:
                raise ConfigError(f"expected a multiple of {n} values, got {len(flat)}")
            return tuple(tuple(flat[i : i + n]) for i in range(0, len(flat), n))
        return tuple(_parse_scalar(p, proto) for p in parts)
    if text.lower() == "none":
        return None
    return _parse_scalar(text, like)


def apply_override(cfg: RunConfig, key: str, value: str) -> None:
    parts = key.strip().split(".")
    if parts[0] not in _SECTIONS or len(parts) < 2:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(cfg, parts[0])
    name = parts[1]
    if not hasattr(section, name):
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(section, name)
    if isinstance(current, dict):
        if len(parts) != 3:
            raise ConfigError(f"{key!r} needs a sub-key, e.g. {parts[0]}.{name}.<entry>")
        sub = parts[2]
        proto = current.get(sub) or next(iter(current.values()), None)
        new = dict(current)
        new[sub] = _parse_value(value, proto)
        setattr(section, name, new)
    else:
        if len(parts) != 2:
            raise ConfigError(f"unknown config key {key!r}")
        if name == "class_weights" and current is None:
            current = (1.0,)
        if name in _INT_OR_NONE and current is None:
            current = 0
        setattr(section, name, _parse_value(value, current))
    if parts[0] == "scene":
        cfg.scene = SceneConfig.from_dict(dataclasses.asdict(cfg.scene))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        try:
            apply_override(cfg, key, value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        cfg = parse_config_text(p.read_text(), cfg)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        apply_override(cfg, key, value)
    return cfg
