"""Sweep selection: timestamp pairing, sync-threshold filtering, distinctness.

The pipeline turns a drive's unannotated sweep frames into extra training
pairs in three steps:

1. bind every sweep LiDAR frame to the nearest image per camera,
2. keep only pairs whose mean timestamp gap beats the keyframe-derived
   threshold (strictly below mean + population std of the keyframe gaps),
3. inside each inter-keyframe interval, pick the retained pair whose masks
   are least similar (lowest mean mIoU) to the flanking keyframes.

All tie-breaks go to the earlier timestamp, which makes the whole pipeline
deterministic; scenes can be processed concurrently and only report writing
needs serializing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .correspondence import mask_miou
from .scene import SceneIndex, SensorFrame

__all__ = [
    "SweepPair",
    "SyncStats",
    "CandidateRecord",
    "IntervalReport",
    "SetStats",
    "SelectionReport",
    "pair_lidar_to_images",
    "keyframe_pair",
    "keyframe_sync_stats",
    "pooled_sync_stats",
    "filter_sweeps",
    "select_distinct_sweep",
    "run_vse",
]


@dataclass(frozen=True)
class SweepPair:
    """One LiDAR frame bound to its nearest image per camera."""

    lidar: SensorFrame
    images: dict[str, SensorFrame]
    delta_t: dict[str, int]  # |t_image - t_lidar| per camera, microseconds
    sigma_sw: float          # mean of delta_t over cameras


@dataclass(frozen=True)
class SyncStats:
    """Mean and population standard deviation of per-keyframe camera gaps."""

    sigma: float
    delta: float
    count: int

    @property
    def threshold(self) -> float:
        return self.sigma + self.delta


@dataclass(frozen=True)
class CandidateRecord:
    lidar_frame_id: str
    t_us: int
    sigma_sw: float
    retained: bool
    score: float | None  # mean mIoU to the flanking keyframes; retained only


@dataclass(frozen=True)
class IntervalReport:
    kf_prev_id: str
    kf_next_id: str
    candidates: tuple[CandidateRecord, ...]
    selected_frame_id: str | None


@dataclass(frozen=True)
class SetStats:
    mean_us: float | None
    std_us: float | None
    count: int


@dataclass(frozen=True)
class SelectionReport:
    scene_id: str
    sync: SyncStats
    threshold_us: float
    intervals: tuple[IntervalReport, ...]
    totals: dict[str, SetStats]

    def selected_frame_ids(self) -> tuple[str, ...]:
        return tuple(
            iv.selected_frame_id for iv in self.intervals if iv.selected_frame_id is not None
        )

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "sync": {"sigma_us": self.sync.sigma, "delta_us": self.sync.delta, "count": self.sync.count},
            "threshold_us": self.threshold_us,
            "intervals": [
                {
                    "kf_prev": iv.kf_prev_id,
                    "kf_next": iv.kf_next_id,
                    "selected": iv.selected_frame_id,
                    "candidates": [
                        {
                            "lidar_frame_id": c.lidar_frame_id,
                            "t_us": c.t_us,
                            "sigma_sw_us": c.sigma_sw,
                            "retained": c.retained,
                            "score": c.score,
                        }
                        for c in iv.candidates
                    ],
                }
                for iv in self.intervals
            ],
            "totals": {
                name: {"mean_us": s.mean_us, "std_us": s.std_us, "count": s.count}
                for name, s in self.totals.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def pair_lidar_to_images(lidar: SensorFrame, streams: dict[str, tuple[SensorFrame, ...]]) -> SweepPair:
    """Bind one LiDAR frame to the image with the smallest |dt| per camera;
    ties break toward the earlier image."""
    images: dict[str, SensorFrame] = {}
    delta_t: dict[str, int] = {}
    for cid in sorted(streams):
        frames = streams[cid]
        if not frames:
            raise ValueError(f"camera stream {cid!r} is empty")
        best = None
        best_dt = None
        for frame in frames:  # frames are time-sorted, so '<' keeps the earliest tie
            dt = abs(frame.t_us - lidar.t_us)
            if best_dt is None or dt < best_dt:
                best, best_dt = frame, dt
        images[cid] = best
        delta_t[cid] = best_dt
    sigma_sw = float(np.mean([delta_t[cid] for cid in sorted(delta_t)]))
    return SweepPair(lidar=lidar, images=images, delta_t=delta_t, sigma_sw=sigma_sw)


def keyframe_pair(scene: SceneIndex, k: int) -> SweepPair:
    """The k-th keyframe bundle: LiDAR keyframe plus its keyframe images."""
    lidar = scene.lidar_keyframes()[k]
    images = scene.keyframe_images(k)
    delta_t = {cid: abs(images[cid].t_us - lidar.t_us) for cid in images}
    sigma_sw = float(np.mean([delta_t[cid] for cid in sorted(delta_t)]))
    return SweepPair(lidar=lidar, images=images, delta_t=delta_t, sigma_sw=sigma_sw)


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std


def keyframe_sync_stats(scene: SceneIndex) -> SyncStats:
    """Mean and population std of the per-keyframe mean camera gap."""
    n_kf = len(scene.lidar_keyframes())
    if n_kf == 0:
        raise ValueError(f"scene {scene.scene_id!r} has no LiDAR keyframes")
    per_kf = [keyframe_pair(scene, k).sigma_sw for k in range(n_kf)]
    sigma, delta = _mean_std(per_kf)
    return SyncStats(sigma=sigma, delta=delta, count=n_kf)


def pooled_sync_stats(scenes) -> SyncStats:
    """Keyframe sync statistics aggregated over several scenes (the global
    alternative to per-scene thresholds)."""
    per_kf: list[float] = []
    for scene in scenes:
        for k in range(len(scene.lidar_keyframes())):
            per_kf.append(keyframe_pair(scene, k).sigma_sw)
    if not per_kf:
        raise ValueError("no keyframes across the supplied scenes")
    sigma, delta = _mean_std(per_kf)
    return SyncStats(sigma=sigma, delta=delta, count=len(per_kf))


def filter_sweeps(pairs, stats: SyncStats) -> list[SweepPair]:
    """Keep exactly the pairs with sigma_sw strictly below sigma + delta."""
    return [p for p in pairs if p.sigma_sw < stats.threshold]


def _pair_score(pair: SweepPair, kf_prev: SweepPair, kf_next: SweepPair, masks) -> float:
    """Mean mask mIoU between the pair's images and both flanking keyframes'
    images, over all cameras."""
    scores = []
    for cid in sorted(pair.images):
        sweep_mask = masks.get(pair.images[cid].payload_path)
        for kf in (kf_prev, kf_next):
            scores.append(mask_miou(sweep_mask, masks.get(kf.images[cid].payload_path)))
    return float(np.mean(scores))


def select_distinct_sweep(candidates, kf_prev: SweepPair, kf_next: SweepPair, masks):
    """Pick the candidate least similar to the flanking keyframes (lowest mean
    mIoU); ties go to the earlier LiDAR timestamp. Returns (pair, score) or
    (None, {}) when there is no candidate; the dict maps frame id to score."""
    best = None
    best_score = None
    scores: dict[str, float] = {}
    for pair in candidates:  # time order, so '<' keeps the earliest tie
        score = _pair_score(pair, kf_prev, kf_next, masks)
        scores[pair.lidar.frame_id] = score
        if best_score is None or score < best_score:
            best, best_score = pair, score
    return best, scores


def run_vse(scene: SceneIndex, masks, stats: SyncStats | None = None) -> SelectionReport:
    """Run the full selection pipeline over every inter-keyframe interval.

    ``masks`` must expose ``get(payload_path) -> SemanticMaskSet`` (see
    scene.MaskStore). ``stats`` overrides the per-scene keyframe statistics,
    e.g. with globally pooled ones.
    """
    if stats is None:
        stats = keyframe_sync_stats(scene)
    threshold = stats.threshold

    keyframes = scene.lidar_keyframes()
    sweep_pairs = [
        pair_lidar_to_images(frame, scene.cameras)
        for frame in scene.lidar
        if not frame.is_keyframe
    ]
    retained_all = filter_sweeps(sweep_pairs, stats)

    intervals: list[IntervalReport] = []
    selected_sigmas: list[float] = []
    for k in range(len(keyframes) - 1):
        kf_prev = keyframe_pair(scene, k)
        kf_next = keyframe_pair(scene, k + 1)
        in_interval = [
            p for p in sweep_pairs if kf_prev.lidar.t_us < p.lidar.t_us < kf_next.lidar.t_us
        ]
        retained = filter_sweeps(in_interval, stats)
        chosen, scores = select_distinct_sweep(retained, kf_prev, kf_next, masks)
        records = tuple(
            CandidateRecord(
                lidar_frame_id=p.lidar.frame_id,
                t_us=p.lidar.t_us,
                sigma_sw=p.sigma_sw,
                retained=p.sigma_sw < threshold,
                score=scores.get(p.lidar.frame_id),
            )
            for p in in_interval
        )
        intervals.append(
            IntervalReport(
                kf_prev_id=kf_prev.lidar.frame_id,
                kf_next_id=kf_next.lidar.frame_id,
                candidates=records,
                selected_frame_id=chosen.lidar.frame_id if chosen else None,
            )
        )
        if chosen is not None:
            selected_sigmas.append(chosen.sigma_sw)

    def set_stats(values) -> SetStats:
        if len(values) == 0:
            return SetStats(mean_us=None, std_us=None, count=0)
        mean, std = _mean_std(values)
        return SetStats(mean_us=mean, std_us=std, count=len(values))

    totals = {
        "keyframes": SetStats(mean_us=stats.sigma, std_us=stats.delta, count=stats.count),
        "sweeps": set_stats([p.sigma_sw for p in sweep_pairs]),
        "sweeps_filtered": set_stats([p.sigma_sw for p in retained_all]),
        "selected": set_stats(selected_sigmas),
    }
    return SelectionReport(
        scene_id=scene.scene_id,
        sync=stats,
        threshold_us=threshold,
        intervals=tuple(intervals),
        totals=totals,
    )
