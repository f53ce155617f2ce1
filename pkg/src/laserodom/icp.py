"""Point-to-point ICP for planar scans, used as a classical baseline.

Points live in the sensor frame (x forward, y left, counter-clockwise
angles).  ``icp_match(a, b)`` finds the rigid transform ``T`` with
``a ~ R(phi) b + t``; that is the pose of sensor b inside sensor a, so the
travelled distance is ``|t|`` and the heading change (clockwise positive)
is ``-phi``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .encoding import RawScan, decode_scan
from .geometry import MotionDelta, wrap_angle
from .kitti import LabeledSequence
from .odometry import Provenance, TimingStats, Trajectory, integrate


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 150
    max_correspondence: float = 2.0  # meters
    tolerance: float = 1e-5  # change of (angle, translation) between iterations
    trim: float = 0.1
    collinear_tol: float = 1e-6  # eigenvalue ratio below which geometry is degenerate
    coarse_pass: bool = True  # align with every pair inside the cap before trimming

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if not 0.0 <= self.trim <= 0.5:
            raise ValueError("trim fraction must lie in [0, 0.5]")
        if not self.max_correspondence > 0:
            raise ValueError("max_correspondence must be > 0")


@dataclass
class IcpResult:
    delta: MotionDelta
    residual: float  # RMS distance over the kept correspondences
    converged: bool
    iterations: int
    angle: float  # phi, counter-clockwise, sensor frame
    translation: np.ndarray
    history: list[float] = field(default_factory=list)  # residuals of the trimmed phase
    reason: str = ""

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s, self.translation[0]], [s, c, self.translation[1]], [0.0, 0.0, 1.0]])


def rigid_fit_2d(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray]:
    """Least-squares ``(phi, t)`` minimising ``sum |R(phi) src + t - dst|^2``."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    p = src - cs
    q = dst - cd
    sxy = float(np.dot(p[:, 0], q[:, 1]))
    syx = float(np.dot(p[:, 1], q[:, 0]))
    phi = math.atan2(sxy - syx, float(np.dot(p[:, 0], q[:, 0]) + np.dot(p[:, 1], q[:, 1])))
    c, s = math.cos(phi), math.sin(phi)
    t = cd - np.array([c * cs[0] - s * cs[1], s * cs[0] + c * cs[1]])
    return phi, t


def _degenerate(pts: np.ndarray, tol: float) -> bool:
    if len(pts) < 3:
        return True
    ev = np.linalg.eigvalsh(np.cov(pts.T))
    return ev[-1] <= 0 or ev[0] / ev[-1] < tol


def _transform(pts, phi, t):
    c, s = math.cos(phi), math.sin(phi)
    return np.column_stack([c * pts[:, 0] - s * pts[:, 1] + t[0], s * pts[:, 0] + c * pts[:, 1] + t[1]])


def _delta(phi: float, t: np.ndarray) -> MotionDelta:
    return MotionDelta(float(math.hypot(t[0], t[1])), wrap_angle(-phi))


def _iterate(tree, pb, phi, t, trim, cfg):
    history = []
    converged = False
    reason = "max iterations"
    it = 0
    keep = 0
    for it in range(1, cfg.max_iterations + 1):
        dist, idx = tree.query(_transform(pb, phi, t))
        if it == 1:
            # trimmed count is fixed once, from the pairs inside the cap; later
            # iterations keep the ``keep`` closest pairs, which makes the
            # residual non-increasing
            within = int(np.count_nonzero(dist <= cfg.max_correspondence))
            keep = within - int(math.floor(trim * within))
            if keep < 3:
                reason = "too few correspondences"
                break
        ok = np.argsort(dist, kind="stable")[:keep]
        src, dst = pb[ok], tree.data[idx[ok]]
        if _degenerate(dst, cfg.collinear_tol):
            reason = "degenerate correspondences"
            break
        new_phi, new_t = rigid_fit_2d(src, dst)
        res = _transform(src, new_phi, new_t) - dst
        history.append(float(np.sqrt(np.mean(np.sum(res * res, axis=1)))))
        change = abs(wrap_angle(new_phi - phi)) + float(np.hypot(*(new_t - t)))
        phi, t = new_phi, new_t
        if change < cfg.tolerance:
            converged = True
            reason = ""
            break
    return phi, t, it, history, converged, reason


def icp_match(a: RawScan, b: RawScan, cfg: IcpConfig = IcpConfig(),
              init: tuple[float, np.ndarray] | None = None) -> IcpResult:
    pa = a.points_xy()
    pb = b.points_xy()
    if len(pa) < 3 or len(pb) < 3:
        raise ValueError(f"ICP needs at least 3 points per scan, got {len(pa)} and {len(pb)}")
    phi, t = (0.0, np.zeros(2)) if init is None else (float(init[0]), np.asarray(init[1], dtype=np.float64))
    if _degenerate(pa, cfg.collinear_tol) or _degenerate(pb, cfg.collinear_tol):
        return IcpResult(_delta(phi, t), math.inf, False, 0, phi, t, [], "degenerate geometry")
    tree = cKDTree(pa)
    coarse = 0
    if cfg.coarse_pass and cfg.trim > 0:
        # untrimmed alignment first: trimming from a far-off start tends to
        # lock onto whichever pairs happen to agree and stall a few hundredths
        # of a degree short
        phi, t, coarse, _, _, _ = _iterate(tree, pb, phi, t, 0.0, cfg)
    phi, t, it, history, converged, reason = _iterate(tree, pb, phi, t, cfg.trim, cfg)
    residual = history[-1] if history else math.inf
    return IcpResult(_delta(phi, t), residual, converged, coarse + it, phi, t, history, reason)


def icp_sequence(seq: LabeledSequence, cfg: IcpConfig = IcpConfig(), retry_factor: float = 3.0):
    """Match consecutive scans; returns ``(deltas, results, timing)``.

    Non-converged pairs contribute zero motion and raise a warning.  The
    previous pair's transform seeds each match; if the seeded match ends
    with a residual far above the running median it is repeated from the
    identity and the better of the two is kept.
    """
    if len(seq) < 2:
        raise ValueError("ICP odometry needs at least 2 frames")
    scans = seq.raw if seq.raw is not None else [decode_scan(f) for f in seq.frames]
    deltas, results, timings, good = [], [], [], []
    init = None
    for k in range(1, len(scans)):
        t0 = time.perf_counter()
        try:
            r = icp_match(scans[k - 1], scans[k], cfg, init)
            if init is not None and good and not r.residual <= retry_factor * float(np.median(good[-50:])):
                r2 = icp_match(scans[k - 1], scans[k], cfg, None)
                if r2.converged and (not r.converged or r2.residual < r.residual):
                    r = r2
        except ValueError as exc:
            r = IcpResult(MotionDelta(0.0, 0.0), math.inf, False, 0, 0.0, np.zeros(2), [], str(exc))
        timings.append(time.perf_counter() - t0)
        if r.converged:
            good.append(r.residual)
            deltas.append(r.delta)
            init = (r.angle, r.translation)
        else:
            warnings.warn(f"ICP did not converge for frames {k - 1}->{k} ({r.reason}); using zero motion")
            deltas.append(MotionDelta(0.0, 0.0))
            init = None
        results.append(r)
    return deltas, results, TimingStats(timings)


def icp_odometry(seq: LabeledSequence, cfg: IcpConfig = IcpConfig()) -> Trajectory:
    deltas, _, _ = icp_sequence(seq, cfg)
    return integrate(deltas, provenance=Provenance.ICP)
