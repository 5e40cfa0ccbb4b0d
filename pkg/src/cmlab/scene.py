"""Scene data model: drives, frames, point clouds, label masks, calibration.

All timestamps are integer microseconds. Payloads use two tiny little-endian
binary formats (magic ``CMPC`` for point clouds, ``CMPM`` for label masks)
chosen for bit-exact round trips; the scene index and calibration are JSON.
Every type is immutable after construction and the loaders are pure, so
concurrent use over distinct files is safe.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

POINT_CLOUD_MAGIC = b"CMPC"
MASK_MAGIC = b"CMPM"

_HEADER = struct.Struct("<4sII")


class SceneError(Exception):
    """Base class for scene-model failures."""


class SceneParseError(SceneError):
    """A file could not be parsed (bad JSON, missing keys, wrong types)."""


class SceneValidationError(SceneError):
    """A parsed structure violates a scene invariant."""


class PayloadError(SceneError):
    """A binary payload is malformed (magic, truncation, non-finite data)."""


@dataclass(frozen=True)
class SensorFrame:
    """One timestamped sensor capture, LiDAR or camera."""

    frame_id: str
    t_us: int
    is_keyframe: bool
    payload_path: str

    def __post_init__(self) -> None:
        if not isinstance(self.t_us, int) or self.t_us < 0:
            raise SceneValidationError(
                f"frame {self.frame_id!r}: timestamp must be a non-negative "
                f"integer, got {self.t_us!r}"
            )


@dataclass(frozen=True)
class SceneIndex:
    """All frames of one drive, grouped into a LiDAR stream and camera streams."""

    scene_id: str
    lidar: tuple[SensorFrame, ...]
    cameras: dict[str, tuple[SensorFrame, ...]]

    @property
    def n_cam(self) -> int:
        return len(self.cameras)

    @property
    def camera_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.cameras))

    def lidar_keyframes(self) -> tuple[SensorFrame, ...]:
        return tuple(f for f in self.lidar if f.is_keyframe)

    def keyframe_images(self, k: int) -> dict[str, SensorFrame]:
        """Images bound to the k-th LiDAR keyframe (k-th keyframe per stream)."""
        out = {}
        for cid in self.camera_ids:
            kfs = [f for f in self.cameras[cid] if f.is_keyframe]
            out[cid] = kfs[k]
        return out

    def validate(self) -> None:
        if self.n_cam < 1:
            raise SceneValidationError(f"scene {self.scene_id!r}: needs >= 1 camera")
        streams = [("lidar", self.lidar)]
        streams += [(f"camera {cid!r}", frames) for cid, frames in sorted(self.cameras.items())]
        for name, frames in streams:
            seen = set()
            for frame in frames:
                if frame.frame_id in seen:
                    raise SceneValidationError(
                        f"scene {self.scene_id!r}, stream {name}: duplicate "
                        f"frame id {frame.frame_id!r}"
                    )
                seen.add(frame.frame_id)
            for a, b in zip(frames, frames[1:]):
                if a.t_us >= b.t_us:
                    raise SceneValidationError(
                        f"scene {self.scene_id!r}, stream {name}: timestamps not "
                        f"strictly increasing at frame {b.frame_id!r} "
                        f"({a.t_us} >= {b.t_us})"
                    )
        n_kf = len(self.lidar_keyframes())
        for cid in self.camera_ids:
            n_img = sum(1 for f in self.cameras[cid] if f.is_keyframe)
            if n_img != n_kf:
                raise SceneValidationError(
                    f"scene {self.scene_id!r}: {n_kf} LiDAR keyframes but camera "
                    f"{cid!r} has {n_img} keyframe images"
                )


@dataclass(frozen=True, eq=False)
class PointCloud:
    """n x l matrix of 64-bit reals; the first three channels are x, y, z meters."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise SceneValidationError(f"point cloud must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 3:
            raise SceneValidationError(
                f"point cloud needs n >= 1 and l >= 3, got shape {data.shape}"
            )
        if not np.isfinite(data).all():
            raise SceneValidationError("point cloud contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def l(self) -> int:
        return self.data.shape[1]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]


@dataclass(frozen=True, eq=False)
class SemanticMaskSet:
    """Dense h x w grid of opaque uint16 label ids (one label per pixel)."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if labels.ndim != 2 or labels.size == 0:
            raise SceneValidationError(f"mask must be a non-empty 2-D grid, got shape {labels.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def h(self) -> int:
        return self.labels.shape[0]

    @property
    def w(self) -> int:
        return self.labels.shape[1]

    def present_labels(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    """Pinhole intrinsics plus LiDAR-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # 3x3, maps LiDAR coordinates into camera coordinates
    translation: np.ndarray  # 3-vector, same mapping

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise SceneValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        trans = np.ascontiguousarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise SceneValidationError("extrinsics must be a 3x3 rotation and a 3-vector")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0.0):
            raise SceneValidationError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise SceneValidationError("rotation determinant is not +1 within 1e-9")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)


Calibration = dict[str, CameraCalibration]


def _require(entry: dict, key: str, ctx: str):
    if key not in entry:
        raise SceneParseError(f"{ctx}: missing key {key!r}")
    return entry[key]


def _parse_frames(raw, ctx: str) -> tuple[SensorFrame, ...]:
    if not isinstance(raw, list):
        raise SceneParseError(f"{ctx}: expected a list of frames")
    frames = []
    for i, entry in enumerate(raw):
        ectx = f"{ctx}[{i}]"
        if not isinstance(entry, dict):
            raise SceneParseError(f"{ectx}: expected an object")
        t_us = _require(entry, "t_us", ectx)
        if isinstance(t_us, bool) or not isinstance(t_us, int):
            raise SceneParseError(f"{ectx}: t_us must be an integer microsecond count")
        frames.append(
            SensorFrame(
                frame_id=str(_require(entry, "frame_id", ectx)),
                t_us=t_us,
                is_keyframe=bool(_require(entry, "keyframe", ectx)),
                payload_path=str(_require(entry, "path", ectx)),
            )
        )
    return tuple(frames)


def load_scene_index(path) -> SceneIndex:
    """Load and fully validate a scene index JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SceneParseError(f"{path}: top level must be an object")
    scene_id = str(_require(doc, "scene_id", str(path)))
    cameras_raw = _require(doc, "cameras", str(path))
    if not isinstance(cameras_raw, dict):
        raise SceneParseError(f"{path}: 'cameras' must map camera id to a frame list")
    index = SceneIndex(
        scene_id=scene_id,
        lidar=_parse_frames(_require(doc, "lidar", str(path)), f"{path}:lidar"),
        cameras={
            str(cid): _parse_frames(frames, f"{path}:cameras[{cid}]")
            for cid, frames in cameras_raw.items()
        },
    )
    n_cam = _require(doc, "n_cam", str(path))
    if n_cam != index.n_cam:
        raise SceneValidationError(
            f"scene {scene_id!r}: n_cam={n_cam} but {index.n_cam} camera streams present"
        )
    index.validate()
    return index


def save_scene_index(index: SceneIndex, path) -> None:
    def frames_out(frames):
        return [
            {"frame_id": f.frame_id, "t_us": f.t_us, "keyframe": f.is_keyframe, "path": f.payload_path}
            for f in frames
        ]

    doc = {
        "scene_id": index.scene_id,
        "n_cam": index.n_cam,
        "lidar": frames_out(index.lidar),
        "cameras": {cid: frames_out(index.cameras[cid]) for cid in index.camera_ids},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_payload(path, magic: bytes) -> tuple[int, int, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise PayloadError(f"{path}: truncated header ({len(blob)} bytes)")
    got, a, b = _HEADER.unpack_from(blob)
    if got != magic:
        raise PayloadError(f"{path}: magic mismatch, expected {magic!r}, got {got!r}")
    return a, b, blob[_HEADER.size:]


def read_point_cloud(path) -> PointCloud:
    """Read a CMPC file: magic, u32 n, u32 l, then n*l little-endian f64 row-major."""
    n, l, body = _read_payload(path, POINT_CLOUD_MAGIC)
    expected = n * l * 8
    if len(body) != expected:
        raise PayloadError(f"{path}: expected {expected} payload bytes, got {len(body)}")
    data = np.frombuffer(body, dtype="<f8").reshape(n, l)
    if not np.isfinite(data).all():
        raise PayloadError(f"{path}: non-finite values in point payload")
    try:
        return PointCloud(data=data)
    except SceneValidationError as exc:
        raise PayloadError(f"{path}: {exc}") from exc


def write_point_cloud(pc: PointCloud, path) -> None:
    header = _HEADER.pack(POINT_CLOUD_MAGIC, pc.n, pc.l)
    Path(path).write_bytes(header + pc.data.astype("<f8").tobytes())


def read_mask(path) -> SemanticMaskSet:
    """Read a CMPM file: magic, u32 h, u32 w, then h*w little-endian u16 row-major."""
    h, w, body = _read_payload(path, MASK_MAGIC)
    expected = h * w * 2
    if len(body) != expected:
        raise PayloadError(f"{path}: expected {expected} payload bytes, got {len(body)}")
    labels = np.frombuffer(body, dtype="<u2").reshape(h, w)
    try:
        return SemanticMaskSet(labels=labels)
    except SceneValidationError as exc:
        raise PayloadError(f"{path}: {exc}") from exc


def write_mask(mask: SemanticMaskSet, path) -> None:
    header = _HEADER.pack(MASK_MAGIC, mask.h, mask.w)
    Path(path).write_bytes(header + mask.labels.astype("<u2").tobytes())


def load_calibration(path) -> Calibration:
    """Load per-camera calibration JSON: {cid: {fx, fy, cx, cy, R, t}}."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SceneParseError(f"{path}: top level must map camera id to calibration")
    out: Calibration = {}
    for cid, entry in doc.items():
        ctx = f"{path}:{cid}"
        rot = np.asarray(_require(entry, "R", ctx), dtype=np.float64)
        if rot.shape != (9,):
            raise SceneParseError(f"{ctx}: 'R' must hold 9 reals row-major")
        out[str(cid)] = CameraCalibration(
            fx=float(_require(entry, "fx", ctx)),
            fy=float(_require(entry, "fy", ctx)),
            cx=float(_require(entry, "cx", ctx)),
            cy=float(_require(entry, "cy", ctx)),
            rotation=rot.reshape(3, 3),
            translation=np.asarray(_require(entry, "t", ctx), dtype=np.float64),
        )
    return out


def save_calibration(calib: Calibration, path) -> None:
    doc = {
        cid: {
            "fx": c.fx,
            "fy": c.fy,
            "cx": c.cx,
            "cy": c.cy,
            "R": [float(v) for v in c.rotation.reshape(-1)],
            "t": [float(v) for v in c.translation],
        }
        for cid, c in sorted(calib.items())
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class MaskStore:
    """Lazy cache of CMPM masks, resolved against a root directory."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[str, SemanticMaskSet] = {}

    def get(self, payload_path: str) -> SemanticMaskSet:
        mask = self._cache.get(payload_path)
        if mask is None:
            mask = read_mask(self.root / payload_path)
            self._cache[payload_path] = mask
        return mask
