"""Pose integration and sequence inference.

Two integrators are provided.  ``HEADING_ACCUMULATING`` (the default)
advances along the updated heading ``theta_t = theta_{t-1} + delta_theta``.
``PAPER_LITERAL`` keeps the printed update, which puts ``delta_theta``
rather than the accumulated heading inside sin/cos, so it can never turn
globally; it is kept for comparison only.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoding import EncoderConfig, encode_scan, make_pair
from .geometry import MotionDelta, Pose2D, wrap_angle
from .kitti import LabeledSequence
from .model import (
    Checkpoint,
    LstmState,
    cnn_forward,
    pretrain_estimate,
    pretrain_forward,
    rcnn_step,
)


class IntegrationMode(str, Enum):
    PAPER_LITERAL = "paper-literal"
    HEADING_ACCUMULATING = "heading-accumulating"


class Provenance(str, Enum):
    GROUND_TRUTH = "ground-truth"
    PREDICTED = "predicted"
    ICP = "icp"


def integrate_step(prev: Pose2D, delta: MotionDelta,
                   mode: IntegrationMode = IntegrationMode.HEADING_ACCUMULATING) -> Pose2D:
    d, dth = delta.delta_d, delta.delta_theta
    if IntegrationMode(mode) == IntegrationMode.PAPER_LITERAL:
        return Pose2D(prev.x + d * math.sin(dth), prev.y + d * math.cos(dth), prev.theta + dth)
    theta = prev.theta + dth
    return Pose2D(prev.x + d * math.sin(theta), prev.y + d * math.cos(theta), theta)


@dataclass(eq=False)
class Trajectory:
    poses: list[Pose2D]
    frames: list[int] = field(default_factory=list)
    provenance: Provenance = Provenance.PREDICTED

    def __post_init__(self):
        if not self.frames:
            self.frames = list(range(len(self.poses)))
        if len(self.frames) != len(self.poses):
            raise ValueError("one frame index per pose")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("frame indices must be strictly increasing")
        self.provenance = Provenance(self.provenance)

    def __len__(self):
        return len(self.poses)

    def as_array(self) -> np.ndarray:
        return np.array([[p.x, p.y, p.theta] for p in self.poses]).reshape(-1, 3)

    @classmethod
    def from_array(cls, arr, frames=None, provenance=Provenance.PREDICTED) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
        return cls([Pose2D(*(float(v) for v in row)) for row in arr], list(frames) if frames is not None else [], provenance)

    @classmethod
    def from_ground_truth(cls, seq: LabeledSequence) -> "Trajectory":
        return cls([p.to_pose2d() for p in seq.ground_truth], [], Provenance.GROUND_TRUTH)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write("# heading theta from +y towards +x; x += d*sin(theta), y += d*cos(theta)\n")
            fh.write(f"# provenance: {self.provenance.value}\n")
            w = csv.writer(fh)
            w.writerow(["frame", "x", "y", "theta"])
            for f, p in zip(self.frames, self.poses):
                w.writerow([f, repr(float(p.x)), repr(float(p.y)), repr(float(p.theta))])
        return path

    @classmethod
    def read_csv(cls, path) -> "Trajectory":
        provenance = Provenance.PREDICTED
        rows = []
        with open(path) as fh:
            lines = []
            for line in fh:
                if line.startswith("# provenance:"):
                    provenance = Provenance(line.split(":", 1)[1].strip())
                elif not line.startswith("#"):
                    lines.append(line)
        for rec in csv.DictReader(lines):
            rows.append((int(rec["frame"]), float(rec["x"]), float(rec["y"]), float(rec["theta"])))
        return cls([Pose2D(x, y, t) for _, x, y, t in rows], [r[0] for r in rows], provenance)


def integrate(deltas: Iterable[MotionDelta], mode: IntegrationMode = IntegrationMode.HEADING_ACCUMULATING,
              start: Pose2D = Pose2D(), provenance=Provenance.PREDICTED) -> Trajectory:
    poses = [start]
    for d in deltas:
        poses.append(integrate_step(poses[-1], d, mode))
    return Trajectory(poses, [], provenance)


def deltas_from_array(arr) -> list[MotionDelta]:
    """Network outputs to motion deltas; negative distances clamp to 0, angles wrap."""
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 2)
    return [MotionDelta(max(float(d), 0.0), wrap_angle(float(t))) for d, t in arr]


@dataclass
class TimingStats:
    per_frame: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_frame)) if self.per_frame else float("nan")

    @property
    def p95(self) -> float:
        return float(np.percentile(self.per_frame, 95)) if self.per_frame else float("nan")

    def to_dict(self) -> dict:
        return {"mean_s_per_frame": self.mean, "p95_s_per_frame": self.p95, "frames": len(self.per_frame)}


def run_inference(seq: LabeledSequence, ckpt: Checkpoint,
                  mode: IntegrationMode = IntegrationMode.HEADING_ACCUMULATING):
    """Stream a sequence through the network with a fresh recurrent state.

    When the sequence carries raw scans they are encoded inside the timed
    loop, so per-frame timings cover encode + forward + integrate.
    Returns ``(trajectory, deltas, timing)``.
    """
    if len(seq) < 2:
        raise ValueError("inference needs at least 2 frames")
    params = ckpt.params
    cfg = ckpt.config
    enc_cfg = EncoderConfig(cfg.max_range)
    state = LstmState.zeros(cfg.rnn, 1, params.dtype)
    pose = Pose2D()
    poses, deltas, timings = [pose], [], []
    prev = seq.raw[0] if seq.raw is not None else seq.frames[0]
    prev = encode_scan(prev, enc_cfg) if seq.raw is not None else prev
    for i in range(1, len(seq)):
        t0 = time.perf_counter()
        cur = encode_scan(seq.raw[i], enc_cfg) if seq.raw is not None else seq.frames[i]
        pair = make_pair(prev, cur, enc_cfg)
        feats = cnn_forward(pair, params)[None]
        d_hat, logits = pretrain_forward(feats, params)
        est = pretrain_estimate(d_hat, logits, cfg.angle_spec)
        out, state = rcnn_step(feats, est, state, params)
        (delta,) = deltas_from_array(out)
        pose = integrate_step(pose, delta, mode)
        timings.append(time.perf_counter() - t0)
        poses.append(pose)
        deltas.append(delta)
        prev = cur
    return Trajectory(poses, [], Provenance.PREDICTED), deltas, TimingStats(timings)


def run_cnn_inference(seq: LabeledSequence, ckpt: Checkpoint,
                      mode: IntegrationMode = IntegrationMode.HEADING_ACCUMULATING):
    """Odometry from the pretrained heads alone (no recurrent refinement).

    Each pair gives the translation head's distance and the midpoint of the
    most likely rotation class.  Same return shape as ``run_inference``.
    """
    if len(seq) < 2:
        raise ValueError("inference needs at least 2 frames")
    params = ckpt.params
    cfg = ckpt.config
    enc_cfg = EncoderConfig(cfg.max_range)
    pose = Pose2D()
    poses, deltas, timings = [pose], [], []
    frames = [encode_scan(r, enc_cfg) for r in seq.raw] if seq.raw is not None else seq.frames
    for i in range(1, len(seq)):
        t0 = time.perf_counter()
        feats = cnn_forward(make_pair(frames[i - 1], frames[i], enc_cfg), params)[None]
        d_hat, logits = pretrain_forward(feats, params)
        (delta,) = deltas_from_array(pretrain_estimate(d_hat, logits, cfg.angle_spec))
        pose = integrate_step(pose, delta, mode)
        timings.append(time.perf_counter() - t0)
        poses.append(pose)
        deltas.append(delta)
    return Trajectory(poses, [], Provenance.PREDICTED), deltas, TimingStats(timings)


def write_trajectory(traj: Trajectory, path, mode: IntegrationMode, checkpoint_digest: str | None = None,
                     timing: TimingStats | None = None) -> tuple[Path, Path]:
    """CSV plus a JSON sidecar (mode, checkpoint digest, timing)."""
    path = Path(path)
    traj.write_csv(path)
    sidecar = path.with_suffix(".json")
    meta = {"mode": IntegrationMode(mode).value, "checkpoint_digest": checkpoint_digest,
            "provenance": traj.provenance.value,
            "convention": "theta from +y towards +x; x += d*sin(theta), y += d*cos(theta)",
            "timing": timing.to_dict() if timing else None}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def write_deltas(deltas: Sequence[MotionDelta], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "delta_d", "delta_theta"])
        for i, d in enumerate(deltas, start=1):
            w.writerow([i, repr(d.delta_d), repr(d.delta_theta)])
    return path


def read_deltas(path) -> list[MotionDelta]:
    with open(path) as fh:
        return [MotionDelta(float(r["delta_d"]), float(r["delta_theta"])) for r in csv.DictReader(fh)]
