"""2D-3D correspondence: pinhole projection, point grouping, pooling, mask mIoU.

All operations are pure functions over in-memory arrays and are safe to
evaluate concurrently over frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .scene import Calibration, PointCloud, SemanticMaskSet


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """Per-point pixel coordinates and visibility after pinhole projection.

    ``camera_index`` indexes into ``cameras`` (-1 when the point is valid in
    no camera); ``pixel_uv`` holds NaN for such points.
    """

    cameras: tuple[str, ...]
    pixel_uv: np.ndarray      # n x 2 float (u, v)
    camera_index: np.ndarray  # n int
    valid: np.ndarray         # n bool


@dataclass(frozen=True)
class PointGroup:
    indices: np.ndarray  # member point indices, ascending
    label: int
    camera_id: str | None = None


@dataclass(frozen=True)
class PointGroupSet:
    """Disjoint, non-empty groups of point indices keyed by (camera, mask label)."""

    groups: tuple[PointGroup, ...]

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)


@dataclass(frozen=True, eq=False)
class GroupedEmbeddings:
    """Label-tagged pooled features with unit-norm rows."""

    features: np.ndarray  # m x d, each row l2 norm 1 within 1e-9
    labels: np.ndarray    # m label ids

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must have one entry per feature row")
        norms = np.linalg.norm(feats, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9, rtol=0.0):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"feature rows must be unit norm (worst deviation {worst:.3e})")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def project_points(pc: PointCloud, calib: Calibration, image_size: tuple[int, int]) -> ProjectionResult:
    """Project points into every camera; a point valid in several cameras is
    assigned to the lowest camera id."""
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    n = pc.n
    cameras = tuple(sorted(calib))
    uv = np.full((n, 2), np.nan)
    cam_index = np.full(n, -1, dtype=np.int64)
    valid = np.zeros(n, dtype=bool)
    xyz = pc.xyz
    for ci, cid in enumerate(cameras):
        c = calib[cid]
        pts = xyz @ c.rotation.T + c.translation
        z = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = c.fx * pts[:, 0] / z + c.cx
            v = c.fy * pts[:, 1] / z + c.cy
        ok = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        claim = ok & ~valid
        uv[claim, 0] = u[claim]
        uv[claim, 1] = v[claim]
        cam_index[claim] = ci
        valid |= claim
    return ProjectionResult(cameras=cameras, pixel_uv=uv, camera_index=cam_index, valid=valid)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def points_to_groups(proj: ProjectionResult, masks: dict[str, SemanticMaskSet]) -> PointGroupSet:
    """Group valid points by the mask label under their rounded pixel.

    Rounding is half away from zero; a rounded coordinate that falls on the
    outer image edge is clamped back to the last pixel.
    """
    groups: list[PointGroup] = []
    for ci, cid in enumerate(proj.cameras):
        sel = np.flatnonzero((proj.camera_index == ci) & proj.valid)
        if sel.size == 0:
            continue
        if cid not in masks:
            raise ValueError(f"no mask supplied for camera {cid!r}")
        mask = masks[cid]
        uv = proj.pixel_uv[sel]
        if np.nanmax(uv[:, 0]) >= mask.w or np.nanmax(uv[:, 1]) >= mask.h:
            raise ValueError(
                f"camera {cid!r}: projection computed for a larger image than the "
                f"{mask.h}x{mask.w} mask"
            )
        col = np.clip(_round_half_away(uv[:, 0]).astype(np.int64), 0, mask.w - 1)
        row = np.clip(_round_half_away(uv[:, 1]).astype(np.int64), 0, mask.h - 1)
        labels = mask.labels[row, col]
        for label in np.unique(labels):
            members = sel[labels == label]
            groups.append(PointGroup(indices=members, label=int(label), camera_id=cid))
    return PointGroupSet(groups=tuple(groups))


def _pool_rows(features: np.ndarray, index_groups, labels) -> GroupedEmbeddings:
    pooled = []
    for idx in index_groups:
        mean = features[idx].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise ValueError("degenerate group: mean feature is the zero vector")
        pooled.append(mean / norm)
    return GroupedEmbeddings(features=np.array(pooled), labels=np.asarray(labels, dtype=np.int64))


def pool_groups(features: np.ndarray, groups) -> GroupedEmbeddings:
    """Average member feature rows per group, then l2-normalize.

    ``groups`` is either a PointGroupSet (features indexed per point) or a
    SemanticMaskSet (features indexed per pixel, row-major; one group per
    label present in the grid). Member rows are summed in ascending index
    order for run-to-run reproducibility.
    """
    features = np.asarray(features, dtype=np.float64)
    if isinstance(groups, SemanticMaskSet):
        flat = groups.labels.reshape(-1)
        if features.ndim == 3:
            features = features.reshape(-1, features.shape[-1])
        if features.shape[0] != flat.shape[0]:
            raise ValueError(
                f"feature rows ({features.shape[0]}) do not match pixel count ({flat.shape[0]})"
            )
        labels = np.unique(flat)
        index_groups = [np.flatnonzero(flat == label) for label in labels]
        return _pool_rows(features, index_groups, labels)
    if isinstance(groups, PointGroupSet):
        if len(groups) == 0:
            raise ValueError("cannot pool an empty group set")
        for g in groups:
            if g.indices.size and g.indices.max() >= features.shape[0]:
                raise ValueError(
                    f"group index {int(g.indices.max())} out of range for "
                    f"{features.shape[0]} feature rows"
                )
        return _pool_rows(features, [g.indices for g in groups], [g.label for g in groups])
    raise TypeError(f"unsupported group container: {type(groups).__name__}")


def _iou_counts(a: np.ndarray, b: np.ndarray) -> dict[int, tuple[int, int]]:
    counts: dict[int, tuple[int, int]] = {}
    for label in np.union1d(np.unique(a), np.unique(b)):
        in_a = a == label
        in_b = b == label
        inter = int(np.count_nonzero(in_a & in_b))
        union = int(np.count_nonzero(in_a | in_b))
        counts[int(label)] = (inter, union)
    return counts


def mask_miou(a: SemanticMaskSet, b: SemanticMaskSet) -> float:
    """Mean IoU over the labels present in either mask, exact up to the final
    float conversion (per-label ratios accumulate as rationals)."""
    if (a.h, a.w) != (b.h, b.w):
        raise ValueError(f"mask dimensions differ: {a.h}x{a.w} vs {b.h}x{b.w}")
    counts = _iou_counts(a.labels, b.labels)
    total = Fraction(0)
    for inter, union in counts.values():
        total += Fraction(inter, union)
    return float(total / len(counts))
