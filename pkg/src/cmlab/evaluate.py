"""Evaluation of pretrained checkpoints: probing, similarity maps, consistency.

The linear probe freezes the point encoder, splits keyframes into a train
half (even keyframe indices) and an eval half (odd), standardizes features
with train-split statistics, and fits a softmax classifier by full-batch
gradient descent. Everything here is read-only over checkpoints and
deterministic.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .correspondence import points_to_groups, pool_groups, project_points
from .pretrain import Checkpoint, build_encoder, build_frozen_encoder, build_heads
from .scene import MaskStore, read_point_cloud
from .vse import keyframe_pair, pair_lidar_to_images
from .worldgen import World, load_world

PROBE_EPOCHS = 100
PROBE_LR = 0.1


@dataclass(frozen=True)
class ProbeResult:
    overall_accuracy: float
    per_class_accuracy: dict[int, float]
    confusion: np.ndarray          # rows: true class, cols: predicted
    classes: tuple[int, ...]
    checkpoint_hash: str
    n_train: int
    n_eval: int

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": {str(c): a for c, a in self.per_class_accuracy.items()},
            "confusion": self.confusion.tolist(),
            "classes": list(self.classes),
            "checkpoint_hash": self.checkpoint_hash,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
        }


@dataclass(frozen=True)
class SimilarityMap:
    query_index: int
    frame_id: str
    scene_name: str
    point_sims: np.ndarray               # cosine to every point of the frame
    pixel_sims: dict[str, np.ndarray]    # per camera, h x w grid


@dataclass(frozen=True)
class ConsistencyReport:
    intra: float   # mean cosine over cross-frame same-label group pairs
    inter: float   # mean cosine over cross-frame different-label group pairs
    gap: float
    n_groups: int
    n_frames: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fit_linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
    classes,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
    checkpoint_hash: str = "",
) -> ProbeResult:
    """Softmax linear classifier on frozen features, full-batch GD from zeros."""
    classes = tuple(int(c) for c in classes)
    class_index = {c: i for i, c in enumerate(classes)}
    n_class = len(classes)
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    xn = (train_x - mean) / std
    y_idx = np.array([class_index[int(c)] for c in train_y])
    onehot = np.eye(n_class)[y_idx]

    weight = np.zeros((train_x.shape[1], n_class))
    bias = np.zeros(n_class)
    n = xn.shape[0]
    for _ in range(epochs):
        logits = xn @ weight + bias
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        grad_logits = (probs - onehot) / n
        weight -= lr * (xn.T @ grad_logits)
        bias -= lr * grad_logits.sum(axis=0)

    xe = (eval_x - mean) / std
    pred = np.argmax(xe @ weight + bias, axis=1)
    true = np.array([class_index[int(c)] for c in eval_y])
    confusion = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    support = confusion.sum(axis=1)
    per_class = {
        classes[i]: (float(confusion[i, i] / support[i]) if support[i] else 0.0)
        for i in range(n_class)
    }
    return ProbeResult(
        overall_accuracy=float((pred == true).mean()),
        per_class_accuracy=per_class,
        confusion=confusion,
        classes=classes,
        checkpoint_hash=checkpoint_hash,
        n_train=int(n),
        n_eval=int(xe.shape[0]),
    )


def _keyframe_features(checkpoint: Checkpoint, world: World):
    """Frozen per-point encoder features and ground-truth labels per keyframe."""
    encoder = build_encoder(checkpoint.config)
    encoder.load(checkpoint.params)
    per_frame = []
    for scene_name in world.scene_names:
        index, _calib = world.load_scene(scene_name)
        scene_dir = world.scene_dir(scene_name)
        for k, frame in enumerate(index.lidar_keyframes()):
            cloud = read_point_cloud(scene_dir / frame.payload_path)
            if cloud.l != checkpoint.config["point_input_dim"]:
                raise ValueError(
                    f"checkpoint expects {checkpoint.config['point_input_dim']} point "
                    f"channels but the world provides {cloud.l}"
                )
            feats, _ = encoder.forward(cloud.data)
            labels = world.gt_labels(scene_name, frame)
            per_frame.append((k, feats, labels))
    return per_frame


def linear_probe(
    checkpoint: Checkpoint, world, epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR
) -> ProbeResult:
    """Train only a linear segmentation head on frozen point features."""
    if not isinstance(world, World):
        world = load_world(world)
    per_frame = _keyframe_features(checkpoint, world)
    train_parts = [(f, y) for k, f, y in per_frame if k % 2 == 0]
    eval_parts = [(f, y) for k, f, y in per_frame if k % 2 == 1]
    if not train_parts or not eval_parts:
        raise ValueError("probing needs at least two keyframes per scene")
    train_x = np.concatenate([f for f, _ in train_parts])
    train_y = np.concatenate([y for _, y in train_parts])
    eval_x = np.concatenate([f for f, _ in eval_parts])
    eval_y = np.concatenate([y for _, y in eval_parts])
    classes = np.unique(np.concatenate([train_y, eval_y]))
    return fit_linear_probe(
        train_x,
        train_y,
        eval_x,
        eval_y,
        classes,
        epochs=epochs,
        lr=lr,
        checkpoint_hash=checkpoint.config_hash(),
    )


def _locate_frame(world: World, frame: str):
    """Resolve 'scene/frame_id' or a bare frame id unique across scenes."""
    if "/" in frame:
        scene_name, frame_id = frame.split("/", 1)
        candidates = [(scene_name, frame_id)]
    else:
        candidates = [(s, frame) for s in world.scene_names]
    hits = []
    for scene_name, frame_id in candidates:
        if scene_name not in world.scene_names:
            continue
        index, calib = world.load_scene(scene_name)
        for f in index.lidar:
            if f.frame_id == frame_id:
                hits.append((scene_name, index, calib, f))
    if not hits:
        raise ValueError(f"LiDAR frame {frame!r} not found in the world")
    if len(hits) > 1:
        raise ValueError(f"LiDAR frame {frame!r} is ambiguous; qualify it as scene/frame")
    return hits[0]


def _frame_point_embeddings(checkpoint: Checkpoint, world: World, scene_name, index, calib, frame):
    encoder = build_encoder(checkpoint.config)
    encoder.load(checkpoint.params)
    heads = build_heads(checkpoint.config)
    heads.load(checkpoint.params)
    cloud = read_point_cloud(world.scene_dir(scene_name) / frame.payload_path)
    feats, _ = encoder.forward(cloud.data)
    rows, _ = heads.point.forward(feats)
    return cloud, rows, heads


def similarity_map(checkpoint: Checkpoint, world, frame: str, query_index: int) -> SimilarityMap:
    """Cosine similarity from one query point to the frame's points and to
    every pixel of the paired images."""
    if not isinstance(world, World):
        world = load_world(world)
    scene_name, index, calib, lidar_frame = _locate_frame(world, frame)
    cloud, rows, heads = _frame_point_embeddings(
        checkpoint, world, scene_name, index, calib, lidar_frame
    )
    if not 0 <= query_index < cloud.n:
        raise ValueError(f"query index {query_index} outside [0, {cloud.n})")
    query = rows[query_index]
    frozen = build_frozen_encoder(checkpoint.config)
    store = MaskStore(world.scene_dir(scene_name))
    pair = pair_lidar_to_images(lidar_frame, index.cameras)
    pixel_sims = {}
    for cid in sorted(pair.images):
        mask = store.get(pair.images[cid].payload_path)
        grid = frozen.encode(mask, f"{scene_name}/{pair.images[cid].frame_id}")
        emb, _ = heads.forward_image_grid(grid)
        pixel_sims[cid] = emb @ query
    return SimilarityMap(
        query_index=query_index,
        frame_id=lidar_frame.frame_id,
        scene_name=scene_name,
        point_sims=rows @ query,
        pixel_sims=pixel_sims,
    )


def consistency_from_groups(
    features: np.ndarray, labels: np.ndarray, frame_ids: np.ndarray
) -> ConsistencyReport:
    """Cross-frame cosine statistics over grouped embeddings.

    Intra pairs share a label, inter pairs do not; both only count pairs from
    different frames. Labels are opaque, so the result is invariant under any
    relabeling of ids.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    frames = np.asarray(frame_ids)
    n_frames = int(np.unique(frames).size)
    if n_frames < 2:
        raise ValueError("consistency needs at least two frames with point groups")
    if np.unique(labels).size < 2:
        raise ValueError("consistency needs at least two distinct labels")
    gram = features @ features.T
    diff_frame = frames[:, None] != frames[None, :]
    same_label = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(diff_frame, dtype=bool), k=1)
    intra_mask = diff_frame & same_label & upper
    inter_mask = diff_frame & ~same_label & upper
    if not intra_mask.any() or not inter_mask.any():
        raise ValueError("consistency needs both same-label and different-label cross-frame pairs")
    intra = float(gram[intra_mask].mean())
    inter = float(gram[inter_mask].mean())
    return ConsistencyReport(
        intra=intra,
        inter=inter,
        gap=intra - inter,
        n_groups=int(features.shape[0]),
        n_frames=n_frames,
    )


def consistency_report(checkpoint: Checkpoint, world) -> ConsistencyReport:
    """Cross-frame consistency of a checkpoint's grouped point embeddings."""
    if not isinstance(world, World):
        world = load_world(world)
    encoder = build_encoder(checkpoint.config)
    encoder.load(checkpoint.params)
    heads = build_heads(checkpoint.config)
    heads.load(checkpoint.params)

    rows, labels, frame_ids = [], [], []
    frame_counter = 0
    for scene_name in world.scene_names:
        index, calib = world.load_scene(scene_name)
        store = MaskStore(world.scene_dir(scene_name))
        for k in range(len(index.lidar_keyframes())):
            pair = keyframe_pair(index, k)
            cloud = read_point_cloud(world.scene_dir(scene_name) / pair.lidar.payload_path)
            masks = {cid: store.get(img.payload_path) for cid, img in pair.images.items()}
            some_mask = next(iter(masks.values()))
            proj = project_points(cloud, calib, (some_mask.h, some_mask.w))
            groups = points_to_groups(proj, masks)
            if len(groups) == 0:
                continue
            feats, _ = encoder.forward(cloud.data)
            emb, _ = heads.point.forward(feats)
            pooled = pool_groups(emb, groups)
            rows.append(pooled.features)
            labels.append(pooled.labels)
            frame_ids.append(np.full(pooled.count, frame_counter))
            frame_counter += 1

    if frame_counter < 2:
        raise ValueError("consistency needs at least two frames with point groups")
    return consistency_from_groups(
        np.concatenate(rows), np.concatenate(labels), np.concatenate(frame_ids)
    )
