"""Deterministic synthetic drives with ground-truth semantics.

A generated world holds a few scenes. Each scene is a ring of moving labeled
spheres observed by a LiDAR at the origin and a ring of outward-facing
cameras. Per LiDAR tick every camera captures one mask image whose timestamp
offset models rig synchronization quality: keyframe bursts are curated tight,
sweep bursts vary, so the sync filter has something real to cut.

Per-point input channels are x, y, z plus a two-channel class signature
(a noisy point on the unit circle at the class angle), so semantics are
recoverable from the payload but not written on its face. Ground-truth
per-point class labels are stored separately under ``gt/`` and are only read
by probing, never by training.

Masks are rendered by exact ray-sphere tests with a z-buffer; the sphere
radius is padded by the worst-case half-pixel rounding displacement so a
point that projects validly always lands on its own object's label (when
unoccluded). Everything is keyed off the config seed: byte-identical files
for identical configs.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import (
    Calibration,
    CameraCalibration,
    PointCloud,
    SceneIndex,
    SemanticMaskSet,
    SensorFrame,
    load_calibration,
    load_scene_index,
    read_mask,
    save_calibration,
    save_scene_index,
    write_mask,
    write_point_cloud,
)

WORLD_FORMAT = "cmlab-world"

# rng stream ids, one per purpose
_S_OBJECTS = 1
_S_OFFSETS = 2
_S_POINTS = 3


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Knobs of the synthetic world; defaults give the desk-scale reference."""

    n_classes: int = 8
    n_objects: int = 24          # per scene; three instances per class by default
    n_cameras: int = 6
    n_keyframes: int = 20        # per scene
    n_scenes: int = 1
    keyframe_period_us: int = 500_000
    lidar_rate_hz: float = 20.0
    camera_rate_hz: float = 20.0
    # sync offsets: keyframe bursts are curated tight; sweep bursts draw |dt|
    # from [lo, lo + q*(hi-lo)] with a fresh per-burst quality q ~ U[0,1]
    kf_offset_lo_us: int = 1_000
    kf_offset_hi_us: int = 5_000
    sweep_offset_lo_us: int = 1_000
    sweep_offset_hi_us: int = 12_000
    points_per_object: int = 30
    noise_scale: float = 0.25    # class-signature channel noise
    image_h: int = 48
    image_w: int = 48
    focal_px: float = 35.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise ValueError("need at least one object class")
        if self.n_objects < 1 or self.points_per_object < 1:
            raise ValueError("need at least one object and one point per object")
        if self.n_cameras < 1 or self.n_keyframes < 1 or self.n_scenes < 1:
            raise ValueError("camera, keyframe and scene counts must be positive")
        if self.lidar_rate_hz <= 0 or self.camera_rate_hz <= 0:
            raise ValueError("sensor rates must be positive")
        ratio = self.lidar_rate_hz / self.camera_rate_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("camera rate must divide the LiDAR rate (triggered rig)")
        if self.ticks_per_interval < 2:
            raise ValueError(
                "keyframe period and LiDAR rate must leave at least one sweep "
                "between consecutive keyframes"
            )
        if self.ticks_per_interval % self.camera_every != 0:
            raise ValueError("camera cadence must land on every keyframe tick")
        if self.n_classes > 255:
            raise ValueError("class count must fit the uint16 label budget with headroom")

    @property
    def lidar_period_us(self) -> int:
        return int(round(1e6 / self.lidar_rate_hz))

    @property
    def ticks_per_interval(self) -> int:
        return int(round(self.keyframe_period_us / (1e6 / self.lidar_rate_hz)))

    @property
    def camera_every(self) -> int:
        return int(round(self.lidar_rate_hz / self.camera_rate_hz))


@dataclass(frozen=True)
class World:
    """Handle over a generated world directory."""

    root: Path
    config: SyntheticWorldConfig
    scene_names: tuple[str, ...]

    def scene_dir(self, name: str) -> Path:
        return self.root / name

    def load_scene(self, name: str) -> tuple[SceneIndex, Calibration]:
        scene_dir = self.scene_dir(name)
        return load_scene_index(scene_dir / "index.json"), load_calibration(scene_dir / "calib.json")

    def gt_labels(self, scene_name: str, lidar_frame: SensorFrame) -> np.ndarray:
        """Per-point class labels for one LiDAR frame (probing only)."""
        path = self.scene_dir(scene_name) / "gt" / f"{lidar_frame.frame_id}.cmpm"
        return read_mask(path).labels.reshape(-1).astype(np.int64)


def ring_calibration(n_cameras: int, image_h: int, image_w: int, focal_px: float) -> Calibration:
    """Outward-facing camera ring around the LiDAR origin."""
    calib: Calibration = {}
    for i in range(n_cameras):
        phi = 2.0 * math.pi * i / n_cameras
        c, s = math.cos(phi), math.sin(phi)
        rotation = np.array(
            [
                [s, -c, 0.0],   # camera x: image right
                [0.0, 0.0, -1.0],  # camera y: image down
                [c, s, 0.0],   # camera z: optical axis
            ]
        )
        center = np.array([0.5 * c, 0.5 * s, 0.0])
        calib[f"cam{i}"] = CameraCalibration(
            fx=focal_px,
            fy=focal_px,
            cx=image_w / 2.0,
            cy=image_h / 2.0,
            rotation=rotation,
            translation=-rotation @ center,
        )
    return calib


@dataclass(frozen=True)
class _SceneObject:
    class_id: int      # 1..n_classes; mask label equals class id, 0 is background
    orbit_radius: float
    theta0: float
    omega: float       # rad/s
    height: float
    radius: float

    def center(self, t_s: float) -> np.ndarray:
        theta = self.theta0 + self.omega * t_s
        return np.array(
            [self.orbit_radius * math.cos(theta), self.orbit_radius * math.sin(theta), self.height]
        )


def _make_objects(cfg: SyntheticWorldConfig, scene_idx: int) -> list[_SceneObject]:
    rng = np.random.default_rng([cfg.seed, scene_idx, _S_OBJECTS])
    # round-robin class assignment so every class appears when n_objects >= n_classes
    class_ids = [(i % cfg.n_classes) + 1 for i in range(cfg.n_objects)]
    rng.shuffle(class_ids)
    objects = []
    for class_id in class_ids:
        objects.append(
            _SceneObject(
                class_id=int(class_id),
                orbit_radius=float(rng.uniform(6.0, 14.0)),
                theta0=float(rng.uniform(0.0, 2.0 * math.pi)),
                omega=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.05, 0.30)),
                height=float(rng.uniform(-0.5, 1.5)),
                radius=float(rng.uniform(0.9, 1.6)),
            )
        )
    return objects


def _pixel_rays(calib: CameraCalibration, h: int, w: int) -> np.ndarray:
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d = np.stack([(us - calib.cx) / calib.fx, (vs - calib.cy) / calib.fy, np.ones_like(us)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)  # h x w x 3, camera frame


def render_mask(
    objects: list[_SceneObject], t_s: float, calib: CameraCalibration, h: int, w: int, rays=None
) -> SemanticMaskSet:
    """Exact ray-sphere rasterization with nearest-hit wins.

    Sphere radii are padded by the worst-case lateral displacement of a
    half-pixel rounding step so that every validly projecting surface point
    lands on its object's silhouette.
    """
    if rays is None:
        rays = _pixel_rays(calib, h, w)
    flat_rays = rays.reshape(-1, 3)
    labels = np.zeros(h * w, dtype=np.uint16)
    depth = np.full(h * w, np.inf)
    f_min = min(calib.fx, calib.fy)
    for obj in objects:
        cc = calib.rotation @ obj.center(t_s) + calib.translation
        pad = (np.linalg.norm(cc) + obj.radius) * (0.7072 / f_min) * 1.1
        r_eff = obj.radius + pad
        along = flat_rays @ cc
        closest_sq = float(cc @ cc) - along**2
        hit = (along > 0) & (closest_sq <= r_eff**2)
        nearer = hit & (along < depth)
        labels[nearer] = obj.class_id
        depth[nearer] = along[nearer]
    return SemanticMaskSet(labels=labels.reshape(h, w))


def sample_points(
    cfg: SyntheticWorldConfig, objects: list[_SceneObject], t_s: float, rng: np.random.Generator
) -> tuple[PointCloud, np.ndarray]:
    """Surface samples of every object plus the noisy class-signature channels.

    Returns the cloud (n x 5: x, y, z, sig_a, sig_b) and per-point class ids.
    """
    rows = []
    gt = []
    for obj in objects:
        dirs = rng.standard_normal((cfg.points_per_object, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        xyz = obj.center(t_s) + obj.radius * dirs
        angle = 2.0 * math.pi * obj.class_id / cfg.n_classes
        sig = np.array([math.cos(angle), math.sin(angle)])
        sig_noisy = sig + cfg.noise_scale * rng.standard_normal((cfg.points_per_object, 2))
        rows.append(np.concatenate([xyz, sig_noisy], axis=1))
        gt.extend([obj.class_id] * cfg.points_per_object)
    return PointCloud(data=np.concatenate(rows, axis=0)), np.asarray(gt, dtype=np.uint16)


def _signed_offsets(rng: np.random.Generator, lo: int, hi: int, n: int) -> np.ndarray:
    mags = rng.integers(lo, hi + 1, size=n)
    signs = rng.choice([-1, 1], size=n)
    return mags * signs


def generate_world(cfg: SyntheticWorldConfig, out_dir) -> World:
    """Write a full world (indices, clouds, masks, calibration, ground truth)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    scene_names = []
    for scene_idx in range(cfg.n_scenes):
        scene_names.append(_generate_scene(cfg, scene_idx, root))
    doc = {
        "format": WORLD_FORMAT,
        "version": 1,
        "config": dataclasses.asdict(cfg),
        "scenes": scene_names,
    }
    (root / "world.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return World(root=root, config=cfg, scene_names=tuple(scene_names))


def load_world(root) -> World:
    root = Path(root)
    doc = json.loads((root / "world.json").read_text(encoding="utf-8"))
    if doc.get("format") != WORLD_FORMAT:
        raise ValueError(f"{root}: not a {WORLD_FORMAT} directory")
    return World(
        root=root,
        config=SyntheticWorldConfig(**doc["config"]),
        scene_names=tuple(doc["scenes"]),
    )


def _generate_scene(cfg: SyntheticWorldConfig, scene_idx: int, root: Path) -> str:
    name = f"scene_{scene_idx:03d}"
    scene_dir = root / name
    for sub in ["lidar", "gt"] + [f"masks/cam{i}" for i in range(cfg.n_cameras)]:
        (scene_dir / sub).mkdir(parents=True, exist_ok=True)

    calib = ring_calibration(cfg.n_cameras, cfg.image_h, cfg.image_w, cfg.focal_px)
    save_calibration(calib, scene_dir / "calib.json")
    rays = {cid: _pixel_rays(calib[cid], cfg.image_h, cfg.image_w) for cid in calib}
    objects = _make_objects(cfg, scene_idx)
    offsets_rng = np.random.default_rng([cfg.seed, scene_idx, _S_OFFSETS])

    t0 = 1_000_000_000
    per_interval = cfg.ticks_per_interval
    n_ticks = (cfg.n_keyframes - 1) * per_interval + 1
    cam_ids = sorted(calib)

    lidar_frames: list[SensorFrame] = []
    camera_frames: dict[str, list[SensorFrame]] = {cid: [] for cid in cam_ids}

    for tick in range(n_ticks):
        is_kf = tick % per_interval == 0
        t_lidar = t0 + tick * cfg.lidar_period_us
        t_s = (t_lidar - t0) / 1e6
        lidar_id = f"L{tick:04d}"
        lidar_frames.append(
            SensorFrame(
                frame_id=lidar_id,
                t_us=t_lidar,
                is_keyframe=is_kf,
                payload_path=f"lidar/{lidar_id}.cmpc",
            )
        )

        points_rng = np.random.default_rng([cfg.seed, scene_idx, _S_POINTS, tick])
        cloud, gt = sample_points(cfg, objects, t_s, points_rng)
        write_point_cloud(cloud, scene_dir / "lidar" / f"{lidar_id}.cmpc")
        write_mask(SemanticMaskSet(labels=gt.reshape(1, -1)), scene_dir / "gt" / f"{lidar_id}.cmpm")

        if tick % cfg.camera_every != 0:
            continue
        if is_kf:
            offs = _signed_offsets(offsets_rng, cfg.kf_offset_lo_us, cfg.kf_offset_hi_us, cfg.n_cameras)
        else:
            quality = float(offsets_rng.uniform(0.0, 1.0))
            hi = cfg.sweep_offset_lo_us + int(
                round(quality * (cfg.sweep_offset_hi_us - cfg.sweep_offset_lo_us))
            )
            offs = _signed_offsets(
                offsets_rng, cfg.sweep_offset_lo_us, max(hi, cfg.sweep_offset_lo_us + 1), cfg.n_cameras
            )
        for ci, cid in enumerate(cam_ids):
            t_img = int(t_lidar + offs[ci])
            img_id = f"{cid}_{tick:04d}"
            path = f"masks/{cid}/{img_id}.cmpm"
            mask = render_mask(
                objects, (t_img - t0) / 1e6, calib[cid], cfg.image_h, cfg.image_w, rays[cid]
            )
            write_mask(mask, scene_dir / path)
            camera_frames[cid].append(
                SensorFrame(frame_id=img_id, t_us=t_img, is_keyframe=is_kf, payload_path=path)
            )

    index = SceneIndex(
        scene_id=name,
        lidar=tuple(lidar_frames),
        cameras={cid: tuple(camera_frames[cid]) for cid in cam_ids},
    )
    index.validate()
    save_scene_index(index, scene_dir / "index.json")
    return name


def generate_planted_scene(
    out_dir, seed: int, n_intervals: int = 3, n_cameras: int = 1, mask_h: int = 8, mask_w: int = 8
) -> tuple[Path, tuple[str, ...]]:
    """Tiny scene with a known correct sweep selection per interval.

    Each interval carries four sweeps in shuffled time order:

    * the plant: well synced, mask labels disjoint from everything else,
    * a normal sweep: well synced, mask close to the keyframes,
    * a boundary sweep: mean gap exactly at the sync threshold (must drop),
    * a decoy: even more distinct mask than the plant, but badly synced.

    Keyframe bursts all sit at a constant 4 ms gap, so the threshold is
    exactly 4 ms with zero spread. A correct pipeline retains the plant and
    the normal sweep and must pick the plant. Returns the scene directory and
    the planted LiDAR frame ids in interval order.
    """
    rng = np.random.default_rng([seed, 17])
    scene_dir = Path(out_dir)
    cam_ids = [f"cam{i}" for i in range(n_cameras)]
    for sub in ["lidar"] + [f"masks/{cid}" for cid in cam_ids]:
        (scene_dir / sub).mkdir(parents=True, exist_ok=True)
    save_calibration(ring_calibration(n_cameras, mask_h, mask_w, 8.0), scene_dir / "calib.json")

    def base_mask() -> np.ndarray:
        return rng.integers(1, 4, size=(mask_h, mask_w)).astype(np.uint16)

    def perturb(grid: np.ndarray) -> np.ndarray:
        out = grid.copy()
        cells = rng.integers(0, out.size, size=max(1, out.size // 16))
        out.reshape(-1)[cells] = rng.integers(1, 4, size=cells.size).astype(np.uint16)
        return out

    def disjoint_mask(first_label: int) -> np.ndarray:
        return rng.integers(first_label, first_label + 2, size=(mask_h, mask_w)).astype(np.uint16)

    base = base_mask()
    t0 = 1_000_000_000
    period = 500_000
    kf_gap = 4_000
    roles = [("plant", 2_000), ("normal", 2_000), ("boundary", 4_000), ("decoy", 6_000)]

    lidar_frames: list[SensorFrame] = []
    camera_frames: dict[str, list[SensorFrame]] = {cid: [] for cid in cam_ids}
    planted_ids: list[str] = []
    cloud = PointCloud(data=np.array([[0.0, 0.0, 10.0, 0.0, 0.0]]))

    def emit(frame_idx: int, t_lidar: int, is_kf: bool, gap_us: int, grids: dict[str, np.ndarray]) -> str:
        lidar_id = f"L{frame_idx:04d}"
        lidar_frames.append(
            SensorFrame(lidar_id, t_lidar, is_kf, f"lidar/{lidar_id}.cmpc")
        )
        write_point_cloud(cloud, scene_dir / "lidar" / f"{lidar_id}.cmpc")
        for ci, cid in enumerate(cam_ids):
            sign = 1 if (frame_idx + ci) % 2 == 0 else -1
            img_id = f"{cid}_{frame_idx:04d}"
            path = f"masks/{cid}/{img_id}.cmpm"
            write_mask(SemanticMaskSet(labels=grids[cid]), scene_dir / path)
            camera_frames[cid].append(
                SensorFrame(img_id, t_lidar + sign * gap_us, is_kf, path)
            )
        return lidar_id

    frame_idx = 0
    for k in range(n_intervals + 1):
        t_kf = t0 + k * period
        emit(frame_idx, t_kf, True, kf_gap, {cid: perturb(base) for cid in cam_ids})
        frame_idx += 1
        if k == n_intervals:
            break
        order = rng.permutation(len(roles))
        spacing = period // (len(roles) + 1)
        for slot, role_idx in enumerate(order):
            role, gap = roles[role_idx]
            if role == "plant":
                grids = {cid: disjoint_mask(11) for cid in cam_ids}
            elif role == "decoy":
                grids = {cid: disjoint_mask(21) for cid in cam_ids}
            else:
                grids = {cid: perturb(base) for cid in cam_ids}
            lidar_id = emit(frame_idx, t_kf + (slot + 1) * spacing, False, gap, grids)
            if role == "plant":
                planted_ids.append(lidar_id)
            frame_idx += 1

    index = SceneIndex(
        scene_id=scene_dir.name,
        lidar=tuple(lidar_frames),
        cameras={cid: tuple(camera_frames[cid]) for cid in cam_ids},
    )
    index.validate()
    save_scene_index(index, scene_dir / "index.json")
    return scene_dir, tuple(planted_ids)
