"""Drift scoring, per-frame error statistics and comparison tables.

Drift follows the KITTI odometry devkit, restricted to the plane: for
every start frame and every length L, the segment ends at the first frame
whose ground-truth arc length from the start reaches L; the translational
part of the relative-pose error over that segment is divided by L.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import MotionDelta
from .odometry import Trajectory

DRIFT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


class AlignmentError(ValueError):
    """Trajectories or delta lists do not line up frame by frame."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class DriftReport:
    sequence_id: str
    method: str
    per_length: dict[int, float | None]  # mean translational drift per length, None = not evaluable
    per_length_count: dict[int, int]
    per_length_rot: dict[int, float | None]  # rad / m, reported but not part of the score
    mean: float | None  # averaged over every evaluated (start, length) subsequence
    mean_rot: float | None = None
    s_per_frame: float | None = None

    @property
    def evaluable(self) -> bool:
        return self.mean is not None

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "method": self.method,
            "mean_drift": self.mean,
            "mean_rot_drift_rad_per_m": self.mean_rot,
            "s_per_frame": self.s_per_frame,
            "lengths": {
                str(k): {"drift": self.per_length[k], "rot_rad_per_m": self.per_length_rot[k],
                         "subsequences": self.per_length_count[k]}
                for k in self.per_length
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "method", "length_m", "drift", "rot_rad_per_m", "subsequences"])
        for k in self.per_length:
            w.writerow([self.sequence_id, self.method, k, _fmt(self.per_length[k]),
                        _fmt(self.per_length_rot[k]), self.per_length_count[k]])
        w.writerow([self.sequence_id, self.method, "mean", _fmt(self.mean), _fmt(self.mean_rot),
                    sum(self.per_length_count.values())])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def check_aligned(gt: Trajectory, est: Trajectory) -> None:
    n = min(len(gt), len(est))
    for k in range(n):
        if gt.frames[k] != est.frames[k]:
            raise AlignmentError(f"frame mismatch at index {k}: gt {gt.frames[k]} vs est {est.frames[k]}", k)
    if len(gt) != len(est):
        raise AlignmentError(f"length mismatch: gt has {len(gt)} poses, est has {len(est)}; first unmatched index {n}", n)


def arc_length(traj: Trajectory) -> np.ndarray:
    xy = traj.as_array()[:, :2]
    steps = np.hypot(*np.diff(xy, axis=0).T) if len(xy) > 1 else np.zeros(0)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _relative(arr, i, j):
    """Planar motion from pose i to pose j expressed in the body frame of i."""
    th = arr[i, 2]
    dx = arr[j, 0] - arr[i, 0]
    dy = arr[j, 1] - arr[i, 1]
    fwd = dx * np.sin(th) + dy * np.cos(th)
    left = -dx * np.cos(th) + dy * np.sin(th)
    return fwd, left, arr[j, 2] - th


def drift_score(gt: Trajectory, est: Trajectory, sequence_id: str = "", method: str = "",
                lengths: Sequence[int] = DRIFT_LENGTHS) -> DriftReport:
    check_aligned(gt, est)
    g = gt.as_array()
    e = est.as_array()
    dist = arc_length(gt)
    per, count, rot = {}, {}, {}
    all_t, all_r = [], []
    for L in lengths:
        starts = np.arange(len(dist))
        ends = np.searchsorted(dist, dist + L, side="left")
        ok = ends < len(dist)
        i, j = starts[ok], ends[ok]
        count[L] = int(ok.sum())
        if not count[L]:
            per[L] = rot[L] = None
            continue
        gf, gl, gth = _relative(g, i, j)
        ef, el, eth = _relative(e, i, j)
        # error transform inv(rel_est) @ rel_gt; its translation norm equals |t_gt - t_est|
        t_err = np.hypot(gf - ef, gl - el) / L
        r_err = np.abs(np.angle(np.exp(1j * (gth - eth)))) / L
        per[L] = float(np.mean(t_err))
        rot[L] = float(np.mean(r_err))
        all_t.append(t_err)
        all_r.append(r_err)
    mean = float(np.mean(np.concatenate(all_t))) if all_t else None
    mean_rot = float(np.mean(np.concatenate(all_r))) if all_r else None
    return DriftReport(sequence_id, method, per, count, rot, mean, mean_rot)


@dataclass
class FrameErrorStats:
    rot_err_deg: np.ndarray
    trans_err_m: np.ndarray

    @property
    def mean_rot_deg(self) -> float:
        return float(np.mean(self.rot_err_deg)) if self.rot_err_deg.size else 0.0

    @property
    def max_rot_deg(self) -> float:
        return float(np.max(self.rot_err_deg, initial=0.0))

    @property
    def mean_trans_m(self) -> float:
        return float(np.mean(self.trans_err_m)) if self.trans_err_m.size else 0.0

    @property
    def max_trans_m(self) -> float:
        return float(np.max(self.trans_err_m, initial=0.0))

    def summary(self) -> dict:
        return {"mean_rot_err_deg": self.mean_rot_deg, "max_rot_err_deg": self.max_rot_deg,
                "mean_trans_err_m": self.mean_trans_m, "max_trans_err_m": self.max_trans_m,
                "frames": int(self.rot_err_deg.size)}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "rot_err_deg", "trans_err_m"])
            for k, (r, t) in enumerate(zip(self.rot_err_deg, self.trans_err_m), start=1):
                w.writerow([k, repr(float(r)), repr(float(t))])
        return path


def frame_errors(pred: Sequence[MotionDelta], truth: Sequence[MotionDelta]) -> FrameErrorStats:
    if len(pred) != len(truth):
        raise AlignmentError(f"length mismatch: {len(pred)} predicted vs {len(truth)} true deltas",
                             min(len(pred), len(truth)))
    p = np.array([[d.delta_d, d.delta_theta] for d in pred]).reshape(-1, 2)
    t = np.array([[d.delta_d, d.delta_theta] for d in truth]).reshape(-1, 2)
    dth = np.abs(np.angle(np.exp(1j * (p[:, 1] - t[:, 1]))))
    return FrameErrorStats(np.degrees(dth), np.abs(p[:, 0] - t[:, 0]))


# -- comparison tables ---------------------------------------------------------------


def load_reference_drift() -> dict:
    """Transcribed published drift values (never recomputed here)."""
    text = resources.files("laserodom").joinpath("data/reference_drift.json").read_text()
    return json.loads(text)


@dataclass
class ComparisonRow:
    method: str
    drift: dict[str, float | None]
    mean: float | None
    s_per_frame: float | None
    source: str = "computed"


@dataclass
class ComparisonTable:
    sequences: list[str]
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *self.sequences, "mean", "s_per_frame", "source"])
        for r in self.rows:
            w.writerow([r.method, *[_fmt(r.drift.get(s)) for s in self.sequences], _fmt(r.mean),
                        "" if r.s_per_frame is None else f"{r.s_per_frame:.3f}", r.source])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["Method", *self.sequences, "Mean", "Time (s/frame)", "Source"]
        body = []
        for r in self.rows:
            cells = [r.method]
            cells += ["-" if r.drift.get(s) is None else f"{r.drift[s]:.4f}" for s in self.sequences]
            cells.append("-" if r.mean is None else f"{r.mean:.4f}")
            cells.append("-" if r.s_per_frame is None else f"{r.s_per_frame:.3f}")
            cells.append(r.source)
            body.append(cells)
        widths = [max(len(str(row[k])) for row in [head, *body]) for k in range(len(head))]
        lines = ["  ".join(str(c).ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in [head, *body]]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def compare_methods(reports: Sequence[DriftReport], include_reference: bool = False) -> ComparisonTable:
    """Table with one row per method, sorted by mean drift (unevaluable last).

    A method's mean is the average of its per-sequence mean drifts.  With
    ``include_reference`` the transcribed published values are appended as
    rows marked ``transcribed``.
    """
    if not reports:
        raise ValueError("compare_methods needs at least one report")
    seen = set()
    by_method: dict[str, list[DriftReport]] = {}
    for r in reports:
        key = (r.method, r.sequence_id)
        if key in seen:
            raise ValueError(f"duplicate method label {r.method!r} for sequence {r.sequence_id!r}")
        seen.add(key)
        by_method.setdefault(r.method, []).append(r)
    sequences = list(dict.fromkeys(r.sequence_id for r in reports))
    rows = []
    for method, reps in by_method.items():
        drift = {r.sequence_id: r.mean for r in reps}
        vals = [v for v in drift.values() if v is not None]
        times = [r.s_per_frame for r in reps if r.s_per_frame is not None]
        rows.append(ComparisonRow(method, drift, float(np.mean(vals)) if vals else None,
                                  float(np.mean(times)) if times else None))
    rows.sort(key=lambda r: (r.mean is None, math.inf if r.mean is None else r.mean, r.method))
    table = ComparisonTable(sequences, rows)
    if include_reference:
        ref = load_reference_drift()
        for s in ref["sequences"]:
            if s not in table.sequences:
                table.sequences.append(s)
        for name, m in ref["methods"].items():
            table.rows.append(ComparisonRow(name, dict(m["drift"]), m["mean"], m["s_per_frame"], "transcribed"))
    return table
