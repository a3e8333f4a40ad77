"""Deterministic synthetic room scenes with moving objects and a depth camera.

Scenes are axis-aligned boxes and spheres in a world frame whose origin is
the room corner (x, z horizontal, y up). Movable objects translate by a
constant velocity each timestep. Depth points come from analytic ray casts,
ground truth from centroid-in-primitive tests, and oracle visibility from the
visibility module.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .checkpoint import atomic_write_bytes
from .densegrid import ClassInfo, SemanticVoxelGrid, dumps_grid, grid_centroids, loads_grid
from .sparse4d import CameraIntrinsics, PointCloudFrame, Sequence
from .visibility import SURFACE, VISIBLE_EMPTY, GridSpec, VisibilityGrid, compute_visibility_grid


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed within the retry budget."""


@dataclass
class SceneConfig:
    world_extents: tuple[float, float, float] = (2.4, 1.6, 2.4)
    voxel_size: float = 0.05
    classes: list[tuple[str, bool]] = field(
        default_factory=lambda: [
            ("empty", False),
            ("floor", False),
            ("wall", False),
            ("table", False),
            ("sofa", False),
            ("toy", True),
            ("robot", True),
        ]
    )
    counts: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {"table": (1, 2), "sofa": (0, 1), "toy": (2, 3), "robot": (2, 3)}
    )
    sizes: dict[str, tuple[tuple[float, float, float], tuple[float, float, float]]] = field(
        default_factory=lambda: {
            "table": ((0.40, 0.30, 0.35), (0.70, 0.50, 0.60)),
            "sofa": ((0.50, 0.30, 0.35), (0.80, 0.45, 0.50)),
            "toy": ((0.08, 0.08, 0.08), (0.14, 0.14, 0.14)),  # sphere radius in x
            "robot": ((0.20, 0.25, 0.20), (0.32, 0.40, 0.32)),
        }
    )
    speed_range: tuple[float, float] = (0.08, 0.20)  # m / timestep, horizontal
    walls: tuple[str, ...] = ("x+", "z+")
    wall_thickness: float = 0.06
    floor_thickness: float = 0.06
    camera_start: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.20, 0.90, 0.20), (0.45, 1.20, 0.45))
    camera_pitch_deg: tuple[float, float] = (20.0, 35.0)
    camera_step: float = 0.03  # max translation per frame (m)
    camera_yaw_rate_deg: float = 3.0  # max |yaw change| per frame
    camera_clearance: float = 0.35
    image_size: tuple[int, int] = (80, 60)
    fov_x_deg: float = 90.0
    frames: int = 10
    point_budget: int = 4096
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if min(self.world_extents) <= 0:
            raise ValueError("world extents must be positive")
        if self.frames < 4:
            raise ValueError("need at least 4 frames (3 inputs + 1 target)")
        names = [c[0] for c in self.classes]
        if not names or names[0] != "empty":
            raise ValueError("class 0 must be 'empty'")

    @property
    def grid_extents(self) -> tuple[int, int, int]:
        return tuple(int(round(e / self.voxel_size)) for e in self.world_extents)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_extents, self.voxel_size, np.zeros(3))

    @property
    def class_table(self) -> list[ClassInfo]:
        return [ClassInfo(n, bool(m)) for n, m in self.classes]

    def class_id(self, name: str) -> int:
        return [c[0] for c in self.classes].index(name)

    @property
    def n_features(self) -> int:
        return len(self.classes) - 1

    @property
    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.image_size
        fx = (w / 2.0) / np.tan(np.radians(self.fov_x_deg) / 2.0)
        return CameraIntrinsics(fx, fx, w / 2.0, h / 2.0, w, h)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("world_extents", "speed_range", "walls", "image_size", "camera_pitch_deg"):
            if key in d:
                d[key] = tuple(d[key])
        if "camera_start" in d:
            d["camera_start"] = tuple(tuple(v) for v in d["camera_start"])
        if "classes" in d:
            d["classes"] = [tuple(c) for c in d["classes"]]
        if "counts" in d:
            d["counts"] = {k: tuple(v) for k, v in d["counts"].items()}
        if "sizes" in d:
            d["sizes"] = {k: (tuple(v[0]), tuple(v[1])) for k, v in d["sizes"].items()}
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- primitives --------------------------------------------------------------------


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    label: int

    def translated(self, v) -> "Box":
        return Box(self.lo + v, self.hi + v, self.label)

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter of entry, inf on miss. ``o`` is one origin."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tf >= tn) & (tf > 0) & (tn > 0)
        return np.where(hit, tn, np.inf)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi

    def distance(self, p: np.ndarray) -> float:
        """Euclidean distance from a point to the solid box."""
        q = np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0)
        return float(np.linalg.norm(q))

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        """Distance from points (N, 3) to the box boundary."""
        outside = np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0)
        d_out = np.linalg.norm(outside, axis=1)
        d_in = np.min(np.minimum(p - self.lo, self.hi - p), axis=1)
        return np.where(d_out > 0, d_out, np.abs(d_in))


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    label: int

    def translated(self, v) -> "Sphere":
        return Sphere(self.center + v, self.radius, self.label)

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.sum((p - self.center) ** 2, axis=1) <= self.radius**2

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - self.center
        a = np.sum(d * d, axis=1)
        b = 2.0 * (d @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = (-b - sq) / (2 * a)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius

    def distance(self, p: np.ndarray) -> float:
        return max(float(np.linalg.norm(p - self.center)) - self.radius, 0.0)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)


@dataclass
class MovingObject:
    shape: Box | Sphere
    velocity: np.ndarray

    def at(self, t: int):
        return self.shape.translated(self.velocity * t)


@dataclass
class SceneInstance:
    static: list
    movable: list[MovingObject]
    poses: list[np.ndarray]

    def primitives(self, t: int) -> list:
        return list(self.static) + [m.at(t) for m in self.movable]


# --- camera ---------------------------------------------------------------------------


def look_pose(position, yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world transform; camera axes x right, y down, z forward."""
    f = np.array([np.cos(pitch) * np.sin(yaw), -np.sin(pitch), np.cos(pitch) * np.cos(yaw)])
    up = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = r, d, f, position
    return pose


def render_depth(prims: list, pose: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Analytic first-hit points and hit labels for every pixel that sees a primitive."""
    dirs = intr.pixel_rays() @ pose[:3, :3].T
    o = pose[:3, 3]
    best = np.full(len(dirs), np.inf)
    lab = np.zeros(len(dirs), dtype=np.int64)
    for prim in prims:
        t = prim.intersect(o, dirs)
        closer = t < best
        best[closer] = t[closer]
        lab[closer] = prim.label
    hit = np.isfinite(best)
    return o + dirs[hit] * best[hit, None], lab[hit]


def voxelize_gt(prims: list, cfg: SceneConfig) -> SemanticVoxelGrid:
    """Label each voxel by the last primitive containing its centroid."""
    ext = cfg.grid_extents
    vs = cfg.voxel_size
    labels = np.zeros(ext, dtype=np.int16)
    for prim in prims:
        lo, hi = prim.aabb()
        i0 = np.clip(np.floor(lo / vs - 0.5).astype(int), 0, np.array(ext))
        i1 = np.clip(np.ceil(hi / vs - 0.5).astype(int) + 1, 0, np.array(ext))
        if np.any(i1 <= i0):
            continue
        sub_ext = tuple(i1 - i0)
        cents = grid_centroids(sub_ext, vs, i0 * vs)
        inside = prim.contains(cents).reshape(sub_ext)
        view = labels[i0[0] : i1[0], i0[1] : i1[1], i0[2] : i1[2]]
        view[inside] = prim.label
    return SemanticVoxelGrid(labels, vs, np.zeros(3), cfg.class_table)


# --- farthest point sampling --------------------------------------------------------------


@numba.njit(cache=True)
def _fps(points, k, first):
    n = points.shape[0]
    out = np.empty(k, np.int64)
    dist = np.full(n, np.inf)
    cur = first
    for j in range(k):
        out[j] = cur
        best = -1.0
        nxt = 0
        for i in range(n):
            dx = points[i, 0] - points[cur, 0]
            dy = points[i, 1] - points[cur, 1]
            dz = points[i, 2] - points[cur, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < dist[i]:
                dist[i] = dd
            if dist[i] > best:
                best = dist[i]
                nxt = i
        cur = nxt
    return out


def fps_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point order starting from the point nearest the centroid."""
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"fps needs 1 <= k <= N, got k={k}, N={n}")
    first = int(np.argmin(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    return _fps(pts, int(k), first)


def fps(points: np.ndarray, k: int) -> np.ndarray:
    return np.asarray(points)[fps_indices(points, k)]


def downsample_frame(frame: PointCloudFrame, budget: int) -> PointCloudFrame:
    if len(frame) <= budget:
        return frame
    idx = fps_indices(frame.coords, budget)
    return PointCloudFrame(frame.coords[idx], frame.features[idx], frame.timestamp)


# --- scene synthesis ----------------------------------------------------------------------


def _room(cfg: SceneConfig) -> list[Box]:
    W, H, D = cfg.world_extents
    ft, wt = cfg.floor_thickness, cfg.wall_thickness
    floor_id, wall_id = cfg.class_id("floor"), cfg.class_id("wall")
    prims = [Box(np.array([0.0, 0.0, 0.0]), np.array([W, ft, D]), floor_id)]
    for w in cfg.walls:
        lo, hi = np.array([0.0, 0.0, 0.0]), np.array([W, H, D])
        if w == "x+":
            lo[0] = W - wt
        elif w == "x-":
            hi[0] = wt
        elif w == "z+":
            lo[2] = D - wt
        elif w == "z-":
            hi[2] = wt
        else:
            raise ValueError(f"unknown wall {w!r}")
        prims.append(Box(lo, hi, wall_id))
    return prims


def _overlap(a, b, margin: float) -> bool:
    alo, ahi = a.aabb()
    blo, bhi = b.aabb()
    return bool(np.all(alo - margin < bhi) and np.all(blo - margin < ahi))


def _camera_path(cfg: SceneConfig, rng: np.random.Generator) -> list[np.ndarray]:
    W, H, D = cfg.world_extents
    lo, hi = np.array(cfg.camera_start[0]), np.array(cfg.camera_start[1])
    pos = rng.uniform(lo, hi)
    center = np.array([W / 2, 0.0, D / 2])
    yaw = np.arctan2(center[0] - pos[0], center[2] - pos[2]) + rng.uniform(-0.15, 0.15)
    pitch = np.radians(rng.uniform(*cfg.camera_pitch_deg))
    heading = rng.uniform(0, 2 * np.pi)
    step = rng.uniform(0.0, cfg.camera_step)
    vel = step * np.array([np.cos(heading), 0.0, np.sin(heading)])
    yaw_rate = np.radians(rng.uniform(-cfg.camera_yaw_rate_deg, cfg.camera_yaw_rate_deg))
    poses = []
    margin = cfg.wall_thickness + 0.05
    for t in range(cfg.frames):
        p = pos + vel * t
        p[0] = np.clip(p[0], margin, W - margin)
        p[2] = np.clip(p[2], margin, D - margin)
        poses.append(look_pose(p, yaw + yaw_rate * t, pitch))
    return poses


def _sample_shape(kind: str, label: int, cfg: SceneConfig, rng: np.random.Generator, free_lo, free_hi):
    smin, smax = (np.array(v) for v in cfg.sizes[kind])
    size = rng.uniform(smin, smax)
    ft = cfg.floor_thickness
    if kind == "toy":
        r = size[0]
        c = np.array([rng.uniform(free_lo[0] + r, free_hi[0] - r), ft + r + 1e-3, rng.uniform(free_lo[2] + r, free_hi[2] - r)])
        return Sphere(c, float(r), label)
    lo = np.array([rng.uniform(free_lo[0], free_hi[0] - size[0]), ft, rng.uniform(free_lo[2], free_hi[2] - size[2])])
    return Box(lo, lo + size, label)


def make_scene(cfg: SceneConfig, seed: int, restarts: int = 20) -> SceneInstance:
    """Place furniture and moving objects clear of walls, each other and the camera path.

    A layout that gets stuck is discarded and redrawn from a derived seed, up
    to ``restarts`` times.
    """
    last = None
    for attempt in range(restarts):
        try:
            return _make_scene_once(cfg, np.random.default_rng([seed, attempt]) if attempt else np.random.default_rng(seed), seed)
        except PlacementError as exc:
            last = exc
    raise PlacementError(f"no valid layout after {restarts} restarts: {last}")


def _make_scene_once(cfg: SceneConfig, rng: np.random.Generator, seed: int) -> SceneInstance:
    static = _room(cfg)
    poses = _camera_path(cfg, rng)
    cams = np.array([p[:3, 3] for p in poses])
    W, H, D = cfg.world_extents
    wt = cfg.wall_thickness
    free_lo = np.array([0.0 if "x-" not in cfg.walls else wt, 0.0, 0.0 if "z-" not in cfg.walls else wt]) + 0.02
    free_hi = np.array([W - (wt if "x+" in cfg.walls else 0.0), H, D - (wt if "z+" in cfg.walls else 0.0)]) - 0.02
    placed: list = []
    movable: list[MovingObject] = []
    T = cfg.frames

    def clear_of_camera(shape, vel):
        return all(shape.translated(vel * t).distance(cams[t]) > cfg.camera_clearance for t in range(T))

    def in_bounds(shape, vel):
        for t in (0, T - 1):
            lo, hi = shape.translated(vel * t).aabb()
            if np.any(lo[[0, 2]] < free_lo[[0, 2]]) or np.any(hi[[0, 2]] > free_hi[[0, 2]]):
                return False
        return True

    def collides(shape, vel):
        for other, ovel in placed:
            for t in range(T):
                if _overlap(shape.translated(vel * t), other.translated(ovel * t), 0.02):
                    return True
        return False

    order = [k for k in ("table", "sofa", "robot", "toy") if k in cfg.counts]
    order += [k for k in cfg.counts if k not in order]
    for kind in order:
        lo_n, hi_n = cfg.counts[kind]
        label = cfg.class_id(kind)
        moving = cfg.classes[label][1]
        n = int(rng.integers(lo_n, hi_n + 1))
        for _ in range(n):
            for _attempt in range(cfg.max_retries):
                shape = _sample_shape(kind, label, cfg, rng, free_lo, free_hi)
                vel = np.zeros(3)
                if moving:
                    ang = rng.uniform(0, 2 * np.pi)
                    vel = rng.uniform(*cfg.speed_range) * np.array([np.cos(ang), 0.0, np.sin(ang)])
                if in_bounds(shape, vel) and clear_of_camera(shape, vel) and not collides(shape, vel):
                    placed.append((shape, vel))
                    if moving:
                        movable.append(MovingObject(shape, vel))
                    else:
                        static.append(shape)
                    break
            else:
                raise PlacementError(f"could not place a {kind} after {cfg.max_retries} tries (seed {seed})")
    return SceneInstance(static, movable, poses)


@dataclass
class GeneratedSequence:
    name: str
    seed: int
    sequence: Sequence
    gt: list[SemanticVoxelGrid]
    visibility: list[VisibilityGrid]
    scene: SceneInstance | None = None
    reconciled: int = 0

    def inputs(self, n_in: int = 3, start: int = 0) -> Sequence:
        frames = self.sequence.frames[start : start + n_in]
        poses = self.sequence.poses[start : start + n_in]
        return Sequence(frames, poses, self.sequence.intrinsics)

    def target_index(self, n_in: int = 3, start: int = 0) -> int:
        return start + n_in


def oracle_visibility(points: np.ndarray, pose, gt: SemanticVoxelGrid, intr: CameraIntrinsics) -> tuple[VisibilityGrid, int]:
    """Ray-cast visibility with GT-occupied voxels barred from visible-empty.

    Segments can clip the corner of a voxel whose centroid lies inside a
    primitive; those voxels are relabeled surface. Returns the grid and the
    relabel count.
    """
    vis = compute_visibility_grid(PointCloudFrame(points, np.zeros((len(points), 1)), 0), pose, intr, GridSpec.of(gt))
    clash = (vis.labels == VISIBLE_EMPTY) & (gt.labels != 0)
    labels = vis.labels.copy()
    labels[clash] = SURFACE
    return VisibilityGrid(labels, vis.voxel_size, vis.origin, vis.n_skipped), int(clash.sum())


def generate_sequence(cfg: SceneConfig, seed: int, name: str | None = None) -> GeneratedSequence:
    """Synthesize one sequence: FPS-downsampled depth frames, GT grids and oracle visibility."""
    scene = make_scene(cfg, seed)
    intr = cfg.intrinsics
    nf = cfg.n_features
    frames, gts, vis = [], [], []
    reconciled = 0
    for t in range(cfg.frames):
        prims = scene.primitives(t)
        pts, labs = render_depth(prims, scene.poses[t], intr)
        feats = np.zeros((len(pts), nf))
        feats[np.arange(len(pts)), labs - 1] = 1.0
        gt = voxelize_gt(prims, cfg)
        v, n_clash = oracle_visibility(pts, scene.poses[t], gt, intr)
        reconciled += n_clash
        frames.append(downsample_frame(PointCloudFrame(pts, feats, t), cfg.point_budget))
        gts.append(gt)
        vis.append(v)
    seq = Sequence(frames, scene.poses, intr)
    return GeneratedSequence(name or f"seq_{seed}", seed, seq, gts, vis, scene, reconciled)


def sequence_seeds(cfg: SceneConfig, n: int) -> list[int]:
    children = np.random.SeedSequence(cfg.seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def generate_dataset(cfg: SceneConfig, n: int) -> list[GeneratedSequence]:
    return [generate_sequence(cfg, s, f"seq_{i:04d}") for i, s in enumerate(sequence_seeds(cfg, n))]


# --- persistence -----------------------------------------------------------------------------

PTS_MAGIC = b"SCSFPTS1"
DATASET_FORMAT = 1


def encode_frame(frame: PointCloudFrame) -> bytes:
    n, c = frame.features.shape
    head = PTS_MAGIC + struct.pack("<qQI", int(frame.timestamp), n, c)
    rows = np.hstack([frame.coords, frame.features]).astype("<f8")
    return head + rows.tobytes()


def decode_frame(blob: bytes) -> PointCloudFrame:
    if blob[:8] != PTS_MAGIC:
        raise ValueError("bad point-cloud magic")
    t, n, c = struct.unpack_from("<qQI", blob, 8)
    off = 8 + struct.calcsize("<qQI")
    rows = np.frombuffer(blob, dtype="<f8", count=n * (3 + c), offset=off).reshape(n, 3 + c)
    return PointCloudFrame(rows[:, :3].astype(np.float64), rows[:, 3:].astype(np.float64), int(t))


def split_indices(n: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded 80/20 shuffle split: floor(0.8 n) train, remainder test."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(0.8 * n))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_dataset(sequences: list[GeneratedSequence], directory, cfg: SceneConfig) -> dict:
    """Write sequences plus a manifest; returns the manifest dict."""
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset directory {root} is not writable")
    entries = []
    for gs in sequences:
        sdir = root / gs.name
        sdir.mkdir(exist_ok=True)
        for i, frame in enumerate(gs.sequence.frames):
            atomic_write_bytes(sdir / f"frame_{i:02d}.pts", encode_frame(frame))
        for i, g in enumerate(gs.gt):
            _write_text(sdir / f"gt_{i:02d}.grid", dumps_grid(g))
        for i, v in enumerate(gs.visibility):
            _write_text(sdir / f"vis_{i:02d}.grid", dumps_grid(v.to_semantic()))
        cam = {
            "intrinsics": gs.sequence.intrinsics.as_list(),
            "poses": [p.tolist() for p in gs.sequence.poses],
            "timestamps": [f.timestamp for f in gs.sequence.frames],
        }
        _write_text(sdir / "camera.json", json.dumps(cam))
        entries.append({"name": gs.name, "seed": gs.seed, "frames": len(gs.sequence.frames)})
    train, test = split_indices(len(entries), cfg.seed)
    manifest = {
        "format": "scsfkit-dataset",
        "version": DATASET_FORMAT,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "sequences": entries,
        "split": {"train": [entries[i]["name"] for i in train], "test": [entries[i]["name"] for i in test]},
        "layout": {
            "<seq>/frame_TT.pts": "SCSFPTS1, int64 timestamp, uint64 count, uint32 channels, count x (xyz + channels) float64 LE",
            "<seq>/gt_TT.grid": "SCSFGRID text: header, class table, non-empty voxels as 'x y z label'",
            "<seq>/vis_TT.grid": "SCSFGRID text with the 3-class visibility table",
            "<seq>/camera.json": "intrinsics [fx, fy, cx, cy, w, h], camera-to-world 4x4 poses, timestamps",
        },
    }
    _write_text(root / "manifest.json", json.dumps(manifest, indent=1))
    return manifest


class Dataset:
    """Lazy reader over a directory written by ``write_dataset``."""

    def __init__(self, directory):
        self.root = Path(directory)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("format") != "scsfkit-dataset" or self.manifest.get("version") != DATASET_FORMAT:
            raise ValueError(f"{path} is not a version-{DATASET_FORMAT} scsfkit dataset")
        self.config = SceneConfig.from_dict(self.manifest["config"])
        self._cache: dict[str, GeneratedSequence] = {}

    @property
    def names(self) -> list[str]:
        return [e["name"] for e in self.manifest["sequences"]]

    def split(self, which: str) -> list[str]:
        return list(self.manifest["split"][which])

    def load(self, name: str) -> GeneratedSequence:
        if name in self._cache:
            return self._cache[name]
        entry = next(e for e in self.manifest["sequences"] if e["name"] == name)
        sdir = self.root / name
        cam = json.loads((sdir / "camera.json").read_text())
        n = entry["frames"]
        frames = [decode_frame((sdir / f"frame_{i:02d}.pts").read_bytes()) for i in range(n)]
        gts = [loads_grid((sdir / f"gt_{i:02d}.grid").read_text()) for i in range(n)]
        vis = [VisibilityGrid.from_semantic(loads_grid((sdir / f"vis_{i:02d}.grid").read_text())) for i in range(n)]
        intr = CameraIntrinsics(*cam["intrinsics"][:4], int(cam["intrinsics"][4]), int(cam["intrinsics"][5]))
        seq = Sequence(frames, [np.array(p) for p in cam["poses"]], intr)
        gs = GeneratedSequence(name, entry["seed"], seq, gts, vis)
        self._cache[name] = gs
        return gs

    def __iter__(self):
        return (self.load(n) for n in self.names)

    def __len__(self) -> int:
        return len(self.names)


def read_dataset(directory) -> Dataset:
    return Dataset(directory)


def sequences_equal(a: GeneratedSequence, b: GeneratedSequence) -> bool:
    """Structural equality of frames, poses, intrinsics, GT and visibility."""
    if a.name != b.name or len(a.sequence.frames) != len(b.sequence.frames):
        return False
    for fa, fb in zip(a.sequence.frames, b.sequence.frames):
        if fa.timestamp != fb.timestamp or not np.array_equal(fa.coords, fb.coords) or not np.array_equal(fa.features, fb.features):
            return False
    if not all(np.array_equal(p, q) for p, q in zip(a.sequence.poses, b.sequence.poses)):
        return False
    if a.sequence.intrinsics != b.sequence.intrinsics:
        return False
    if not all(x.structurally_equal(y) for x, y in zip(a.gt, b.gt)):
        return False
    return all(x.structurally_equal(y) for x, y in zip(a.visibility, b.visibility))
