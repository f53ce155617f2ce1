"""KITTI odometry ingestion: Velodyne frames, ground-truth poses, labels and splits.

Expected layout under a dataset root (either form is accepted)::

    <root>/sequences/<seq>/velodyne/NNNNNN.bin     (or <root>/<seq>/velodyne/...)
    <root>/poses/<seq>.txt

Synthetic sequences use the same layout with ``encoded/NNNNNN.scan`` cache
files in place of ``velodyne/``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoding import (
    EncodedScan,
    EncoderConfig,
    RawScan,
    ScanSource,
    encode_scan,
    read_encoded,
    write_encoded,
)
from .geometry import MotionDelta, Pose3D, orthonormalize, relative_motion

log = logging.getLogger(__name__)

DEFAULT_TRAIN = ("00", "02", "03", "04", "06", "08", "09")
DEFAULT_TEST = ("05", "07")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud3D:
    points: np.ndarray  # (N, 4): x, y, z, reflectance

    def __len__(self):
        return self.points.shape[0]


def parse_velodyne_frame(data: bytes) -> PointCloud3D:
    if len(data) % 16:
        raise DatasetError(f"truncated Velodyne frame: {len(data)} bytes is not a multiple of 16")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts[:, :3])):
        raise DatasetError("corrupt Velodyne frame: non-finite coordinates")
    return PointCloud3D(pts)


def serialize_velodyne_frame(cloud: PointCloud3D) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


@dataclass(frozen=True)
class LayerSelector:
    """Elevation band (degrees) kept when slicing a 3D sweep into a planar scan."""

    band: tuple[float, float] = (-0.2, 0.2)


def extract_planar_layer(cloud: PointCloud3D, sel: LayerSelector = LayerSelector(), frame_index: int = 0) -> RawScan:
    if len(cloud) == 0:
        raise DatasetError("cannot extract a layer from an empty cloud")
    x, y, z = cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]
    rng = np.hypot(x, y)
    elev = np.degrees(np.arctan2(z, rng))
    lo, hi = sel.band
    keep = (elev >= lo) & (elev <= hi) & (rng > 0)
    az = np.mod(np.arctan2(y[keep], x[keep]), 2.0 * math.pi)
    return RawScan(frame_index, az, rng[keep], ScanSource.KITTI_LAYER)


def parse_poses(lines: Iterable[str] | str) -> list[Pose3D]:
    """One pose per non-empty line of 12 numbers (row-major 3x4 ``[R|t]``)."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    poses = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 12:
            raise DatasetError(f"poses line {lineno}: expected 12 fields, got {len(fields)}")
        try:
            m = np.array([float(f) for f in fields]).reshape(3, 4)
        except ValueError as exc:
            raise DatasetError(f"poses line {lineno}: {exc}") from None
        rot = m[:, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-4:
            raise DatasetError(f"poses line {lineno}: rotation not orthonormal within 1e-4")
        poses.append(Pose3D(orthonormalize(rot), m[:, 3]))
    return poses


def format_poses(poses: Sequence[Pose3D]) -> str:
    rows = []
    for p in poses:
        m = np.hstack([p.rotation, p.translation[:, None]]).reshape(-1)
        rows.append(" ".join(f"{v:.12e}" for v in m))
    return "\n".join(rows) + "\n"


# -- rotation classes -------------------------------------------------------------


@dataclass(frozen=True)
class AngleClassSpec:
    span_deg: float = 5.6
    resolution_deg: float = 0.1

    @property
    def count(self) -> int:
        return int(round(2 * self.span_deg / self.resolution_deg))

    @property
    def _offset(self) -> int:
        # index of the class whose lower edge is 0 degrees
        return int(round(self.span_deg / self.resolution_deg))


DEFAULT_ANGLE_SPEC = AngleClassSpec()


@dataclass
class ClampCounter:
    count: int = 0


def angles_to_classes(delta_theta, spec: AngleClassSpec = DEFAULT_ANGLE_SPEC):
    """Vectorised class lookup; returns ``(classes, n_clamped)``.

    Angles are converted to units of the class resolution so the class edges
    sit on integers; out-of-span angles clamp to the end classes.
    """
    units = np.degrees(np.asarray(delta_theta, dtype=np.float64)) / spec.resolution_deg
    raw = np.floor(units + spec._offset).astype(np.int64)
    clamped = (raw < 0) | (raw >= spec.count)
    return np.clip(raw, 0, spec.count - 1), int(clamped.sum())


def angle_to_class(delta_theta: float, spec: AngleClassSpec = DEFAULT_ANGLE_SPEC,
                   counter: ClampCounter | None = None) -> int:
    cls, n = angles_to_classes(delta_theta, spec)
    if counter is not None:
        counter.count += n
    return int(cls)


def class_to_angle(cls: int, spec: AngleClassSpec = DEFAULT_ANGLE_SPEC) -> float:
    """Midpoint of a rotation class, in radians."""
    if not 0 <= cls < spec.count:
        raise IndexError(f"class {cls} outside [0, {spec.count})")
    return math.radians((cls - spec._offset + 0.5) * spec.resolution_deg)


def class_midpoints(spec: AngleClassSpec = DEFAULT_ANGLE_SPEC) -> np.ndarray:
    return np.radians((np.arange(spec.count) - spec._offset + 0.5) * spec.resolution_deg)


# -- sequences --------------------------------------------------------------------


@dataclass(eq=False)
class LabeledSequence:
    id: str
    frames: list[EncodedScan]
    labels: list[MotionDelta]
    ground_truth: list[Pose3D]
    raw: list[RawScan] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.labels) != len(self.frames) - 1:
            raise ValueError("label count must equal frame count - 1")
        if len(self.ground_truth) != len(self.frames):
            raise ValueError("ground-truth count must equal frame count")

    def __len__(self):
        return len(self.frames)

    def label_array(self) -> np.ndarray:
        return np.array([[l.delta_d, l.delta_theta] for l in self.labels]).reshape(-1, 2)


def labels_from_poses(poses: Sequence[Pose3D]) -> list[MotionDelta]:
    return [relative_motion(a, b) for a, b in zip(poses, poses[1:])]


def _sequence_dir(root: Path, seq: str) -> Path | None:
    for cand in (root / "sequences" / seq, root / seq):
        if cand.is_dir():
            return cand
    return None


def load_sequence(root, seq: str, enc_cfg: EncoderConfig = EncoderConfig(),
                  sel: LayerSelector = LayerSelector(), keep_raw: bool = False,
                  max_frames: int | None = None) -> LabeledSequence:
    root = Path(root)
    sdir = _sequence_dir(root, seq)
    if sdir is None:
        raise DatasetError(f"missing sequence directory for {seq} under {root}")
    pose_file = root / "poses" / f"{seq}.txt"
    if not pose_file.is_file():
        raise DatasetError(f"missing poses file {pose_file}")
    poses = parse_poses(pose_file.read_text())
    velo = sorted((sdir / "velodyne").glob("*.bin"))
    cached = sorted((sdir / "encoded").glob("*.scan"))
    if max_frames is not None:
        velo, cached, poses = velo[:max_frames], cached[:max_frames], poses[:max_frames]
    frames, raw = [], []
    if velo:
        for i, path in enumerate(velo):
            scan = extract_planar_layer(parse_velodyne_frame(path.read_bytes()), sel, frame_index=i)
            frames.append(encode_scan(scan, enc_cfg))
            if keep_raw:
                raw.append(scan)
    elif cached:
        frames = [read_encoded(p) for p in cached]
        if keep_raw:
            raw = _read_raw(sdir / "raw", len(frames))
    else:
        raise DatasetError(f"sequence {seq} has neither velodyne/ nor encoded/ frames")
    if len(frames) != len(poses):
        raise DatasetError(f"sequence {seq}: {len(frames)} frames but {len(poses)} poses")
    for i, f in enumerate(frames):
        if f.frame_index != i:
            raise DatasetError(f"sequence {seq}: frame {i} carries index {f.frame_index}")
    return LabeledSequence(seq, frames, labels_from_poses(poses), poses, raw if keep_raw and raw else None)


def _read_raw(rdir: Path, count: int) -> list[RawScan]:
    files = sorted(rdir.glob("*.npy"))[:count]
    if len(files) != count:
        return []
    out = []
    for i, path in enumerate(files):
        arr = np.load(path)
        out.append(RawScan(i, arr[:, 0], arr[:, 1], ScanSource.SYNTHETIC))
    return out


def save_sequence(seq: LabeledSequence, root) -> Path:
    """Write ``encoded/`` cache files plus a poses file in the dataset layout.

    Raw scans, when present, go to ``raw/`` as (azimuth, depth) ``.npy`` arrays.
    """
    root = Path(root)
    sdir = root / "sequences" / seq.id / "encoded"
    sdir.mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        write_encoded(sdir / f"{f.frame_index:06d}.scan", f)
    if seq.raw is not None:
        rdir = sdir.parent / "raw"
        rdir.mkdir(exist_ok=True)
        for r in seq.raw:
            np.save(rdir / f"{r.frame_index:06d}.npy", np.column_stack([r.azimuth, r.depth]))
    (root / "poses").mkdir(parents=True, exist_ok=True)
    (root / "poses" / f"{seq.id}.txt").write_text(format_poses(seq.ground_truth))
    return sdir.parent


@dataclass(frozen=True)
class SplitConfig:
    train: tuple[str, ...] = DEFAULT_TRAIN
    test: tuple[str, ...] = DEFAULT_TEST

    @classmethod
    def from_json(cls, path) -> "SplitConfig":
        obj = json.loads(Path(path).read_text())
        return cls(tuple(obj["train"]), tuple(obj["test"]))

    @classmethod
    def parse(cls, text: str) -> "SplitConfig":
        """Parse an override such as ``"train=00,02 test=05"``."""
        parts = {}
        for tok in text.split():
            key, _, val = tok.partition("=")
            if key not in ("train", "test"):
                raise ValueError(f"unknown split key {key!r}")
            parts[key] = tuple(v for v in val.split(",") if v)
        return cls(parts.get("train", DEFAULT_TRAIN), parts.get("test", DEFAULT_TEST))


def build_split(root, split: SplitConfig = SplitConfig(), **load_kw) -> dict[str, list[LabeledSequence]]:
    root = Path(root)
    wanted = list(split.train) + list(split.test)
    missing = [s for s in wanted if _sequence_dir(root, s) is None]
    if missing:
        raise DatasetError(f"missing sequence directories under {root}: {', '.join(missing)}")
    return {
        "train": [load_sequence(root, s, **load_kw) for s in split.train],
        "test": [load_sequence(root, s, **load_kw) for s in split.test],
    }
