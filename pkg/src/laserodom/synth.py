"""Procedural polygon worlds and a raycasting 2D scanner.

Produces perfectly labelled sequences in the same form as KITTI ingestion,
for desk-scale training runs and for checking the learned model against
classical scan matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import EncoderConfig, RawScan, ScanSource, encode_scan
from .geometry import Pose2D
from .kitti import DEFAULT_ANGLE_SPEC, AngleClassSpec, LabeledSequence, angles_to_classes, labels_from_poses


@dataclass(eq=False)
class World2D:
    segments: np.ndarray  # (S, 2, 2): [[x1, y1], [x2, y2]]
    seed: int
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2, 2)
        if len(self.segments) < 4:
            raise ValueError("a world needs at least the 4 arena walls")
        xmin, ymin, xmax, ymax = self.bounds
        pts = self.segments.reshape(-1, 2)
        if (pts[:, 0].min() < xmin or pts[:, 0].max() > xmax
                or pts[:, 1].min() < ymin or pts[:, 1].max() > ymax):
            raise ValueError("segments must lie within bounds")

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin < x < xmax and ymin < y < ymax


@dataclass(frozen=True)
class WorldConfig:
    width: float = 60.0
    height: float = 60.0
    density: float = 0.5  # obstacles per 100 square metres
    obstacle_size: tuple[float, float] = (0.6, 3.5)
    clearance: float = 2.0  # minimum gap between obstacles and the keep-clear path


def _box(center, half_w, half_h, angle) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    corners = np.array([[-half_w, -half_h], [half_w, -half_h], [half_w, half_h], [-half_w, half_h]])
    pts = corners @ np.array([[c, s], [-s, c]]) + center
    return np.stack([pts, np.roll(pts, -1, axis=0)], axis=1)


def _triangle(center, radius, angle) -> np.ndarray:
    ang = angle + np.array([0.0, 2.1, 4.2])
    pts = center + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return np.stack([pts, np.roll(pts, -1, axis=0)], axis=1)


def _point_segment_distance(points: np.ndarray, seg: np.ndarray) -> np.ndarray:
    a, b = seg[:, 0], seg[:, 1]
    ab = b - a
    t = np.einsum("pij,ij->pi", points[:, None, :] - a[None], ab) / np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1).min(axis=1)


def generate_world(seed: int, cfg: WorldConfig = WorldConfig(), keep_clear: np.ndarray | None = None) -> World2D:
    """A closed rectangular arena populated with boxes and triangles.

    ``keep_clear`` is an optional (N, 2) array of points (e.g. a planned
    path); obstacles closer than ``cfg.clearance`` to any of them are
    rejected.  Deterministic for fixed ``(seed, cfg, keep_clear)``.
    """
    rng = np.random.default_rng(seed)
    w, h = cfg.width, cfg.height
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    segs = [np.stack([corners, np.roll(corners, -1, axis=0)], axis=1)]
    n_obstacles = int(round(cfg.density * w * h / 100.0))
    lo, hi = cfg.obstacle_size
    placed = 0
    for _ in range(20 * n_obstacles):
        if placed == n_obstacles:
            break
        size = rng.uniform(lo, hi)
        margin = size + 0.5
        if w <= 2 * margin or h <= 2 * margin:
            break
        center = rng.uniform([margin, margin], [w - margin, h - margin])
        angle = rng.uniform(0.0, math.pi)
        if rng.random() < 0.7:
            shape = _box(center, size / 2, rng.uniform(lo, size) / 2, angle)
        else:
            shape = _triangle(center, size / 2, angle)
        if keep_clear is not None and len(keep_clear):
            if _point_segment_distance(np.asarray(keep_clear, float).reshape(-1, 2), shape).min() < cfg.clearance:
                continue
        segs.append(shape)
        placed += 1
    return World2D(np.concatenate(segs), seed, (0.0, 0.0, w, h))


@dataclass(frozen=True)
class ScannerSpec:
    rays: int = 3600
    max_range: float = 80.0
    noise_std: float = 0.02
    dropout: float = 0.01
    angle_offset: float = 0.5  # fraction of the ray pitch; 0.5 centres rays in 0.1 degree bins

    def __post_init__(self):
        if self.rays <= 0 or self.max_range <= 0:
            raise ValueError("scanner needs rays > 0 and max_range > 0")

    def azimuths(self) -> np.ndarray:
        return (np.arange(self.rays) + self.angle_offset) * (2.0 * math.pi / self.rays)


NOISELESS = ScannerSpec(noise_std=0.0, dropout=0.0)


def ray_distances(world: World2D, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Nearest positive hit distance along each unit direction (inf on a miss)."""
    a = world.segments[:, 0]
    e = world.segments[:, 1] - a
    d = directions
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    ao = a - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
        u = (ao[None, :, 0] * d[:, None, 1] - ao[None, :, 1] * d[:, None, 0]) / denom
    hit = (denom != 0) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    t = np.where(hit, t, np.inf)
    return t.min(axis=1)


def raycast_scan(world: World2D, pose: Pose2D, spec: ScannerSpec = ScannerSpec(),
                 rng: np.random.Generator | None = None, frame_index: int = 0) -> RawScan:
    """Cast ``spec.rays`` rays around ``pose``; azimuth 0 is the heading, counter-clockwise positive."""
    if not world.contains(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside the arena")
    az = spec.azimuths()
    heading = pose.theta - az
    dirs = np.column_stack([np.sin(heading), np.cos(heading)])
    depth = ray_distances(world, np.array([pose.x, pose.y]), dirs)
    if spec.noise_std > 0 or spec.dropout > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        noise = rng.normal(0.0, spec.noise_std, size=depth.shape) if spec.noise_std > 0 else 0.0
        kept = rng.random(depth.shape) >= spec.dropout
        depth = np.where(kept, depth + noise, np.inf)
    valid = np.isfinite(depth) & (depth > 0) & (depth <= spec.max_range)
    return RawScan(frame_index, az[valid], depth[valid], ScanSource.SYNTHETIC)


@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    """Per-frame speed (m/frame) and yaw-rate (rad/frame) driving a heading-accumulating motion."""

    speeds: np.ndarray
    yaw_rates: np.ndarray
    start: Pose2D = field(default_factory=Pose2D)
    angle_spec: AngleClassSpec = DEFAULT_ANGLE_SPEC

    def __post_init__(self):
        s = np.asarray(self.speeds, dtype=np.float64).reshape(-1)
        w = np.asarray(self.yaw_rates, dtype=np.float64).reshape(-1)
        if s.shape != w.shape:
            raise ValueError("speed and yaw-rate profiles must have equal length")
        if np.any(s < 0) or not np.all(np.isfinite(s)) or not np.all(np.isfinite(w)):
            raise ValueError("speeds must be finite and non-negative")
        _, clamped = angles_to_classes(w, self.angle_spec)
        if clamped:
            raise ValueError(f"{clamped} yaw rates fall outside the +/-{self.angle_spec.span_deg} deg class span")
        object.__setattr__(self, "speeds", s)
        object.__setattr__(self, "yaw_rates", w)

    @property
    def frame_count(self) -> int:
        return self.speeds.size + 1

    def poses(self) -> list[Pose2D]:
        out = [self.start]
        x, y, th = self.start.x, self.start.y, self.start.theta
        for s, w in zip(self.speeds, self.yaw_rates):
            th = th + w
            x += s * math.sin(th)
            y += s * math.cos(th)
            out.append(Pose2D(x, y, th))
        return out

    @classmethod
    def line(cls, frames: int, step: float = 1.0, start: Pose2D = Pose2D()) -> "TrajectorySpec":
        return cls(np.full(frames - 1, step), np.zeros(frames - 1), start)

    @classmethod
    def stationary(cls, frames: int, start: Pose2D = Pose2D()) -> "TrajectorySpec":
        return cls.line(frames, 0.0, start)

    @classmethod
    def circle(cls, frames: int, radius: float, step: float, center=(0.0, 0.0)) -> "TrajectorySpec":
        """Constant curvature, clockwise; starts heading +y on the circle's left edge."""
        start = Pose2D(center[0] - radius, center[1], 0.0)
        return cls(np.full(frames - 1, step), np.full(frames - 1, step / radius), start)

    @classmethod
    def random_walk(cls, frames: int, seed: int, bounds, speed_range=(0.3, 0.8),
                    yaw_max_deg: float = 4.0, margin: float = 6.0) -> "TrajectorySpec":
        """Smoothly varying speed and turn rate that never leaves the arena.

        The walker keeps one invariant: a slow full-lock turning circle on one side
        of it fits inside the arena shrunk by ``margin``. Whenever a random step
        would break that, it commits to that circle instead.
        """
        rng = np.random.default_rng(seed)
        xmin, ymin, xmax, ymax = bounds
        yaw_max = math.radians(yaw_max_deg)
        lo, hi = speed_range
        reach = lo / yaw_max  # turning radius at the slowest speed and full lock
        cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
        room_x = (xmax - xmin) / 2 - margin - reach
        room_y = (ymax - ymin) / 2 - margin - reach
        if min(room_x, room_y) < 0.5 * reach:
            raise ValueError(f"arena too small for a {reach:.1f} m turning radius; "
                             "enlarge it or lower the speed")

        def circles(x, y, th):
            # centres of the right (clockwise) and left turning circles
            return ((x + reach * math.cos(th), y - reach * math.sin(th)),
                    (x - reach * math.cos(th), y + reach * math.sin(th)))

        def fits(c):
            return abs(c[0] - cx) <= room_x and abs(c[1] - cy) <= room_y

        x = rng.uniform(cx - room_x, cx + room_x)
        y = rng.uniform(cy - room_y, cy + room_y)
        for _ in range(100):
            th = rng.uniform(-math.pi, math.pi)
            if any(fits(c) for c in circles(x, y, th)):
                break
        else:
            th = math.atan2(cx - x, cy - y) + math.pi / 2  # left circle centred on the arena side
        start = Pose2D(x, y, th)
        speed = rng.uniform(lo, hi)
        yaw = 0.0
        side = 0
        speeds, yaws = [], []
        for _ in range(frames - 1):
            if side:
                # committed turn on an exact radius keeps the circle centre fixed
                speed = lo
                yaw = side * speed / reach
                to_center = math.atan2(cx - x, cy - y)
                if abs((to_center - th + math.pi) % (2 * math.pi) - math.pi) < yaw_max:
                    side = 0
            else:
                speed = float(np.clip(speed + rng.normal(0.0, 0.04 * (hi - lo) + 1e-3), lo, hi))
                yaw = float(np.clip(0.85 * yaw + rng.normal(0.0, 0.35 * yaw_max), -yaw_max, yaw_max))
                nth = th + yaw
                nx, ny = x + speed * math.sin(nth), y + speed * math.cos(nth)
                if not any(fits(c) for c in circles(nx, ny, nth)):
                    right, left = circles(x, y, th)
                    side = 1 if fits(right) and (not fits(left) or rng.random() < 0.5) else -1
                    speed = lo
                    yaw = side * speed / reach
            th += yaw
            x += speed * math.sin(th)
            y += speed * math.cos(th)
            speeds.append(speed)
            yaws.append(yaw)
        return cls(np.array(speeds), np.array(yaws), start)


def generate_sequence(world: World2D, traj: TrajectorySpec, spec: ScannerSpec = ScannerSpec(),
                      enc_cfg: EncoderConfig | None = None, seed: int = 0, seq_id: str = "synthetic",
                      ) -> LabeledSequence:
    """Raycast and encode every frame; labels and ground truth come from the analytic path.

    Ground-truth poses are expressed relative to the first frame, the way
    KITTI stores them.
    """
    enc_cfg = enc_cfg or EncoderConfig(max_range=spec.max_range)
    poses = traj.poses()
    for i, p in enumerate(poses):
        if not world.contains(p.x, p.y):
            raise ValueError(f"trajectory leaves the arena at frame {i}")
    rng = np.random.default_rng(seed)
    raw = [raycast_scan(world, p, spec, rng, frame_index=i) for i, p in enumerate(poses)]
    frames = [encode_scan(r, enc_cfg) for r in raw]
    gt = [p.relative_to(poses[0]).to_pose3d() for p in poses]
    return LabeledSequence(seq_id, frames, labels_from_poses(gt), gt, raw)
