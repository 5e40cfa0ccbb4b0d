"""Desk-scale pretraining: batches, the SGD loop, and checkpoints.

One training sample is a LiDAR frame bound to one mask image per camera
(dataset keyframes, plus sweep pairs chosen by the selection pipeline when
enabled). Per batch the point branch is encoded with the trainable MLP and
head, the image branch with the frozen per-label feature map and its
trainable head; both are pooled by mask label into grouped embeddings, the
selected objective is evaluated over batch-wide pools, and its analytic
gradients are pushed back through pooling, both heads, and the point
encoder by hand. Gradient accumulation follows a fixed sample/camera/label
order, so identical seeds give byte-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import PointGroup, points_to_groups, project_points
from .encoders import FrozenImageEncoder, ParamDict, ProjectionHeads, ToyPointEncoder
from .losses import combined_objective, nce_loss
from .optim import cosine_lr, sgd_step
from .scene import (
    MaskStore,
    PayloadError,
    PointCloud,
    SemanticMaskSet,
    SensorFrame,
    read_point_cloud,
)
from .vse import keyframe_pair, pair_lidar_to_images, run_vse
from .worldgen import World, load_world

CHECKPOINT_MAGIC = b"CMPT"
CHECKPOINT_VERSION = 1

METHODS = {"nce": "nce", "conflict": "conflict_aware", "conflict_aware": "conflict_aware"}


class TrainingDivergedError(RuntimeError):
    """The objective became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model hyperparameters.

    lr0 defaults to the large-batch value of 1.6; the desk-scale reference
    configuration overrides it (see reference_train_config).
    """

    epochs: int = 50
    batch_size: int = 4
    lr0: float = 1.6
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.07
    w_cross: float = 1.0
    w_intra: float = 1.0
    seed: int = 0
    embed_dim: int = 16      # D, shared projection space
    point_channels: int = 32  # C_p, point-encoder output
    image_channels: int = 24  # C_i, frozen image features
    hidden: tuple[int, ...] = (32,)
    stride: int = 1
    image_noise: float = 0.1
    image_view_noise: float = 2.0
    reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        for name in ("lr0", "momentum", "weight_decay", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau == 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def reference_train_config(seed: int = 0) -> TrainConfig:
    """The frozen desk-scale recipe used by the paired proxy runs.

    The large-batch lr0 of 1.6 assumes batch 32 on multiple devices and
    collapses the embeddings at this scale; 0.01 is the measured stable rate.
    """
    return TrainConfig(epochs=30, batch_size=4, lr0=0.01, seed=seed)


@dataclass
class TrainSample:
    scene_name: str
    lidar: SensorFrame
    images: dict[str, SensorFrame]
    is_sweep: bool
    cloud: PointCloud
    masks: dict[str, SemanticMaskSet]
    point_groups: list[PointGroup]
    pixel_groups: dict[str, list[tuple[int, np.ndarray]]]
    image_feats: dict[str, np.ndarray]


@dataclass(frozen=True)
class Checkpoint:
    config: dict
    params: ParamDict

    def config_blob(self) -> bytes:
        return json.dumps(self.config, sort_keys=True).encode("utf-8")

    def config_hash(self) -> str:
        return hashlib.sha256(self.config_blob()).hexdigest()


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Checkpoint
    loss_curve: tuple[tuple[int, float, float], ...]  # (epoch, mean loss, lr)
    sample_frames: tuple[tuple[str, str, bool], ...]  # (scene, lidar frame id, is_sweep)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    blob = checkpoint.config_blob()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    names = sorted(checkpoint.params)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(checkpoint.params[name], dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    view = memoryview(blob)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise PayloadError(f"{path}: truncated checkpoint")
        head, view = view[:n], view[n:]
        return head

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise PayloadError(f"{path}: magic mismatch, not a checkpoint file")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise PayloadError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    (n_blocks,) = struct.unpack("<I", take(4))
    params: ParamDict = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        params[name] = data
    return Checkpoint(config=config, params=params)


def write_loss_curve(path, curve) -> None:
    lines = ["epoch,loss,lr"]
    for epoch, loss, lr in curve:
        lines.append(f"{epoch},{loss!r},{lr!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_encoder(config: dict) -> ToyPointEncoder:
    """Reconstruct the point encoder described by a checkpoint config."""
    train = config["train"]
    widths = (config["point_input_dim"], *train["hidden"], train["point_channels"])
    return ToyPointEncoder(widths, seed=train["seed"])


def build_heads(config: dict) -> ProjectionHeads:
    train = config["train"]
    return ProjectionHeads(
        point_in=train["point_channels"],
        image_in=train["image_channels"],
        out_dim=train["embed_dim"],
        seed=train["seed"],
        stride=train["stride"],
    )


def build_frozen_encoder(config: dict) -> FrozenImageEncoder:
    train = config["train"]
    return FrozenImageEncoder(
        dim=train["image_channels"],
        seed=config["world_seed"],
        noise_scale=train["image_noise"],
        view_scale=train["image_view_noise"],
        stride=train["stride"],
    )


def _prepare_sample(
    world: World,
    scene_name: str,
    pair,
    is_sweep: bool,
    calib,
    store: MaskStore,
    frozen: FrozenImageEncoder,
) -> TrainSample:
    scene_dir = world.scene_dir(scene_name)
    cloud = read_point_cloud(scene_dir / pair.lidar.payload_path)
    masks = {cid: store.get(img.payload_path) for cid, img in pair.images.items()}
    some_mask = next(iter(masks.values()))
    proj = project_points(cloud, calib, (some_mask.h, some_mask.w))
    groups = points_to_groups(proj, masks)
    pixel_groups: dict[str, list[tuple[int, np.ndarray]]] = {}
    image_feats: dict[str, np.ndarray] = {}
    for cid in sorted(masks):
        flat = masks[cid].labels.reshape(-1)
        pixel_groups[cid] = [
            (int(label), np.flatnonzero(flat == label)) for label in np.unique(flat)
        ]
        image_feats[cid] = frozen.encode(masks[cid], f"{scene_name}/{pair.images[cid].frame_id}")
    return TrainSample(
        scene_name=scene_name,
        lidar=pair.lidar,
        images=dict(pair.images),
        is_sweep=is_sweep,
        cloud=cloud,
        masks=masks,
        point_groups=list(groups),
        pixel_groups=pixel_groups,
        image_feats=image_feats,
    )


def assemble_samples(world: World, frozen: FrozenImageEncoder, use_vse: bool) -> list[TrainSample]:
    """Keyframe samples, plus one selected sweep per qualifying interval."""
    samples: list[TrainSample] = []
    for scene_name in world.scene_names:
        index, calib = world.load_scene(scene_name)
        store = MaskStore(world.scene_dir(scene_name))
        for k in range(len(index.lidar_keyframes())):
            samples.append(
                _prepare_sample(world, scene_name, keyframe_pair(index, k), False, calib, store, frozen)
            )
        if use_vse:
            report = run_vse(index, store)
            selected = set(report.selected_frame_ids())
            for frame in index.lidar:
                if frame.frame_id in selected:
                    pair = pair_lidar_to_images(frame, index.cameras)
                    samples.append(
                        _prepare_sample(world, scene_name, pair, True, calib, store, frozen)
                    )
    return samples


def _pool_forward(rows: np.ndarray, idx: np.ndarray):
    mean = rows[idx].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise TrainingDivergedError("degenerate group: pooled feature has zero norm")
    return mean / norm, norm


def _pool_backward(pooled: np.ndarray, norm: float, grad: np.ndarray) -> np.ndarray:
    """Gradient through mean-then-normalize, per member row (before /n)."""
    return (grad - pooled * float(pooled @ grad)) / norm


def batch_objective(
    samples: list[TrainSample],
    penc: ToyPointEncoder,
    heads: ProjectionHeads,
    cfg: TrainConfig,
    method: str,
) -> tuple[float, ParamDict]:
    """Objective value and parameter gradients for one batch of samples."""
    q_rows, q_labels, q_refs = [], [], []  # refs: (sample idx, cid, pixel idx, norm)
    k_rows, k_labels, k_refs = [], [], []
    q_lookup: dict[tuple[int, str, int], int] = {}
    point_caches = []
    image_caches = {}

    for si, sample in enumerate(samples):
        feats, cache_f = penc.forward(sample.cloud.data)
        point_rows, cache_y = heads.point.forward(feats)
        point_caches.append((cache_f, cache_y, point_rows.shape))
        for cid in sorted(sample.image_feats):
            emb, cache_i = heads.forward_image_grid(sample.image_feats[cid])
            h, w, d = emb.shape
            image_caches[(si, cid)] = (cache_i, (h, w, d))
            flat = emb.reshape(h * w, d)
            for label, idx in sample.pixel_groups[cid]:
                pooled, norm = _pool_forward(flat, idx)
                q_lookup[(si, cid, label)] = len(q_rows)
                q_rows.append(pooled)
                q_labels.append(label)
                q_refs.append((si, cid, idx, norm))
        for group in sample.point_groups:
            pooled, norm = _pool_forward(point_rows, group.indices)
            k_rows.append(pooled)
            k_labels.append(group.label)
            k_refs.append((si, group.camera_id, group.indices, norm))

    if not k_rows or not q_rows:
        raise TrainingDivergedError("batch produced no grouped embeddings")
    q_feat = np.array(q_rows)
    k_feat = np.array(k_rows)

    if method == "nce":
        matched = []
        for ki, (si, cid, _idx, _norm) in enumerate(k_refs):
            qi = q_lookup.get((si, cid, k_labels[ki]))
            if qi is not None:
                matched.append((qi, ki))
        if not matched:
            raise TrainingDivergedError("no matched pixel/point groups in batch")
        q_sel = np.array([qi for qi, _ in matched])
        k_sel = np.array([ki for _, ki in matched])
        report = nce_loss(q_feat[q_sel], k_feat[k_sel], cfg.tau)
        grad_q = np.zeros_like(q_feat)
        grad_k = np.zeros_like(k_feat)
        np.add.at(grad_q, q_sel, report.grad_q)
        np.add.at(grad_k, k_sel, report.grad_k)
    else:
        report = combined_objective(
            (q_feat, np.asarray(q_labels)),
            (k_feat, np.asarray(k_labels)),
            weights=(cfg.w_cross, cfg.w_intra),
            tau=cfg.tau,
            reduction=cfg.reduction,
        )
        grad_q = report.grad_q
        grad_k = report.grad_k

    grads: ParamDict = {}

    def accumulate(block: ParamDict) -> None:
        for name, g in block.items():
            if name in grads:
                grads[name] += g
            else:
                grads[name] = g.copy()

    # image branch: pooled pixel groups -> per-pixel rows -> image head
    grid_grads: dict[tuple[int, str], np.ndarray] = {}
    for row, (si, cid, idx, norm) in enumerate(q_refs):
        _, (h, w, d) = image_caches[(si, cid)]
        key = (si, cid)
        if key not in grid_grads:
            grid_grads[key] = np.zeros((h * w, d))
        per_row = _pool_backward(q_feat[row], norm, grad_q[row]) / idx.size
        grid_grads[key][idx] += per_row
    for (si, cid), grad_flat in grid_grads.items():
        cache_i, (h, w, d) = image_caches[(si, cid)]
        head_grads, _ = heads.backward_image_grid(cache_i, grad_flat.reshape(h, w, d))
        accumulate(head_grads)

    # point branch: pooled point groups -> per-point rows -> head -> encoder
    point_row_grads = [np.zeros(shape) for _, _, shape in point_caches]
    for row, (si, _cid, idx, norm) in enumerate(k_refs):
        per_row = _pool_backward(k_feat[row], norm, grad_k[row]) / idx.size
        point_row_grads[si][idx] += per_row
    for si, (cache_f, cache_y, _) in enumerate(point_caches):
        head_grads, grad_feats = heads.point.backward(cache_y, point_row_grads[si])
        accumulate(head_grads)
        enc_grads, _ = penc.backward(cache_f, grad_feats)
        accumulate(enc_grads)

    # parameters untouched by this batch still need zero-filled entries
    for name, param in {**penc.params(), **heads.params()}.items():
        if name not in grads:
            grads[name] = np.zeros_like(param)
    return report.value, grads


def train(world, cfg: TrainConfig, method: str = "conflict_aware", use_vse: bool = False) -> TrainResult:
    """Run the pretraining loop and return the checkpoint plus the loss curve."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {sorted(METHODS)}")
    method = METHODS[method]
    if not isinstance(world, World):
        world = load_world(world)

    frozen = FrozenImageEncoder(
        dim=cfg.image_channels,
        seed=world.config.seed,
        noise_scale=cfg.image_noise,
        view_scale=cfg.image_view_noise,
        stride=cfg.stride,
    )
    samples = assemble_samples(world, frozen, use_vse)
    if not samples:
        raise ValueError("world contains no training samples")

    input_dim = samples[0].cloud.l
    penc = ToyPointEncoder((input_dim, *cfg.hidden, cfg.point_channels), seed=cfg.seed)
    heads = ProjectionHeads(
        point_in=cfg.point_channels,
        image_in=cfg.image_channels,
        out_dim=cfg.embed_dim,
        seed=cfg.seed,
        stride=cfg.stride,
    )
    params: ParamDict = {**penc.params(), **heads.params()}
    velocities: ParamDict = {}

    n = len(samples)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    shuffle_rng = np.random.default_rng([cfg.seed, 19])

    curve: list[tuple[int, float, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        epoch_lr = cosine_lr(step, total_steps, cfg.lr0)
        for b in range(batches_per_epoch):
            batch = [samples[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            penc.load(params)
            heads.load(params)
            try:
                value, grads = batch_objective(batch, penc, heads, cfg, method)
            except ValueError as exc:
                raise TrainingDivergedError(
                    f"non-finite objective at epoch {epoch}, batch {b}: {exc}"
                ) from exc
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite objective at epoch {epoch}, batch {b}")
            lr = cosine_lr(step, total_steps, cfg.lr0)
            params, velocities = sgd_step(
                params, grads, velocities, lr, cfg.momentum, cfg.weight_decay
            )
            epoch_losses.append(value)
            step += 1
        curve.append((epoch, float(np.mean(epoch_losses)), epoch_lr))

    config = {
        "format": "cmlab-checkpoint",
        "method": method,
        "use_vse": use_vse,
        "point_input_dim": input_dim,
        "world_seed": world.config.seed,
        "world": dataclasses.asdict(world.config),
        "train": dataclasses.asdict(cfg),
    }
    checkpoint = Checkpoint(config=config, params=params)
    return TrainResult(
        checkpoint=checkpoint,
        loss_curve=tuple(curve),
        sample_frames=tuple((s.scene_name, s.lidar.frame_id, s.is_sweep) for s in samples),
    )
