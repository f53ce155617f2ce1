"""Binned depth encoding of 360 degree planar scans.

A scan is reduced to a 3601-long vector: bin ``i`` holds the mean depth of
all returns whose azimuth falls in ``[i * 0.1deg, (i + 1) * 0.1deg)``.  The
final slot only catches azimuths that land exactly on ``2 * pi`` after
wrapping and is normally zero.  Empty bins hold 0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

N_BINS = 3601
BIN_WIDTH = math.pi / 1800.0  # 0.1 degree in radians
TWO_PI = 2.0 * math.pi

# bin lower edges; the exact values decide boundary ties
BIN_EDGES = np.arange(N_BINS + 1, dtype=np.float64) * BIN_WIDTH


class ScanSource(str, Enum):
    KITTI_LAYER = "kitti-layer"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True, eq=False)
class RawScan:
    """One planar sweep: azimuths (rad, sensor frame, CCW from forward) and depths (m)."""

    frame_index: int
    azimuth: np.ndarray
    depth: np.ndarray
    source: ScanSource = ScanSource.SYNTHETIC

    def __post_init__(self):
        az = np.asarray(self.azimuth, dtype=np.float64).reshape(-1)
        d = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        if az.shape != d.shape:
            raise ValueError("azimuth and depth must have the same length")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "source", ScanSource(self.source))

    def __len__(self):
        return self.depth.size

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.azimuth)) and np.all(np.isfinite(self.depth))):
            raise ValueError(f"frame {self.frame_index}: non-finite coordinates in scan")
        if np.any(self.depth <= 0):
            raise ValueError(f"frame {self.frame_index}: depths must be strictly positive")

    def points_xy(self) -> np.ndarray:
        """Cartesian points in the sensor frame (x forward, y left), shape (N, 2)."""
        return np.column_stack([self.depth * np.cos(self.azimuth), self.depth * np.sin(self.azimuth)])

    @classmethod
    def from_points_xy(cls, frame_index: int, xy: np.ndarray, source=ScanSource.SYNTHETIC) -> "RawScan":
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        az = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), TWO_PI)
        return cls(frame_index, az, np.hypot(xy[:, 0], xy[:, 1]), source)


@dataclass(frozen=True, eq=False)
class EncodedScan:
    frame_index: int
    bins: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.float64).reshape(-1)
        if b.size != N_BINS:
            raise ValueError(f"encoded scan must have {N_BINS} bins, got {b.size}")
        object.__setattr__(self, "bins", b)

    def __eq__(self, other):
        if not isinstance(other, EncodedScan):
            return NotImplemented
        return self.frame_index == other.frame_index and np.array_equal(self.bins, other.bins)


@dataclass(frozen=True)
class EncoderConfig:
    max_range: float = 80.0

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")


@dataclass(frozen=True, eq=False)
class ScanPairTensor:
    """Network input: channel 0 is the scan at t-1, channel 1 the scan at t."""

    data: np.ndarray
    frame_index: int = field(default=0)


def azimuth_to_bin(azimuth: np.ndarray) -> np.ndarray:
    """Bin index by floor semantics against ``BIN_EDGES`` (ties go to the higher bin)."""
    az = np.mod(np.asarray(azimuth, dtype=np.float64), TWO_PI)
    idx = np.floor(az / BIN_WIDTH).astype(np.int64)
    np.clip(idx, 0, N_BINS - 1, out=idx)
    # the division can be off by one near an edge; settle against the edge table
    idx -= (az < BIN_EDGES[idx]).astype(np.int64)
    idx += (az >= BIN_EDGES[idx + 1]).astype(np.int64)
    np.clip(idx, 0, N_BINS - 1, out=idx)
    return idx


def encode_scan(scan: RawScan, cfg: EncoderConfig = EncoderConfig()) -> EncodedScan:
    """Average depth per 0.1 degree bin, clamped to ``[0, cfg.max_range]``.

    Per-bin sums use exact (correctly rounded) summation so the result does
    not depend on the order of the points.
    """
    scan.validate()
    bins = np.zeros(N_BINS)
    if len(scan) == 0:
        return EncodedScan(scan.frame_index, bins)
    idx = azimuth_to_bin(scan.azimuth)
    order = np.argsort(idx, kind="stable")
    idx_sorted = idx[order]
    depth_sorted = scan.depth[order]
    occupied, starts, counts = np.unique(idx_sorted, return_index=True, return_counts=True)
    single = counts == 1
    bins[occupied[single]] = depth_sorted[starts[single]]
    if not single.all():
        depths = depth_sorted.tolist()
        for b, s, n in zip(occupied[~single].tolist(), starts[~single].tolist(), counts[~single].tolist()):
            bins[b] = math.fsum(depths[s : s + n]) / n
    np.clip(bins, 0.0, cfg.max_range, out=bins)
    return EncodedScan(scan.frame_index, bins)


def decode_scan(enc: EncodedScan, source=ScanSource.SYNTHETIC) -> RawScan:
    """Back to a point set, one point per occupied bin at the bin centre."""
    occupied = np.flatnonzero(enc.bins > 0)
    az = np.mod((occupied + 0.5) * BIN_WIDTH, TWO_PI)
    return RawScan(enc.frame_index, az, enc.bins[occupied], source)


def make_pair(prev: EncodedScan, cur: EncodedScan, cfg: EncoderConfig = EncoderConfig()) -> ScanPairTensor:
    if prev.frame_index + 1 != cur.frame_index:
        raise ValueError(
            f"scan pair must be consecutive frames, got {prev.frame_index} and {cur.frame_index}"
        )
    data = np.stack([prev.bins, cur.bins]) / cfg.max_range
    return ScanPairTensor(data, cur.frame_index)


def stack_pairs(frames: list[EncodedScan], cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """All consecutive pairs of a sequence as an array of shape (n - 1, 2, 3601)."""
    for a, b in zip(frames, frames[1:]):
        if a.frame_index + 1 != b.frame_index:
            raise ValueError(f"frames {a.frame_index} and {b.frame_index} are not consecutive")
    bins = np.stack([f.bins for f in frames]) / cfg.max_range
    return np.stack([bins[:-1], bins[1:]], axis=1)


# -- cache files ----------------------------------------------------------------

_HEADER = struct.Struct("<I")
RECORD_SIZE = _HEADER.size + 4 * N_BINS


def serialize_encoded(enc: EncodedScan) -> bytes:
    return _HEADER.pack(enc.frame_index) + enc.bins.astype("<f4").tobytes()


def deserialize_encoded(data: bytes) -> EncodedScan:
    if len(data) != RECORD_SIZE:
        raise ValueError(f"encoded scan record must be {RECORD_SIZE} bytes, got {len(data)}")
    (frame,) = _HEADER.unpack_from(data)
    bins = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return EncodedScan(frame, bins)


def write_encoded(path, enc: EncodedScan) -> None:
    Path(path).write_bytes(serialize_encoded(enc))


def read_encoded(path) -> EncodedScan:
    return deserialize_encoded(Path(path).read_bytes())
