"""Domain types shared across the pipeline.

All types are immutable value objects after construction and safe to share
between threads. Serialization lives in :mod:`dynaseg.io`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

QUAT_NORM_HARD_TOL = 1e-3   # beyond this a quaternion is rejected
QUAT_NORM_SOFT_TOL = 1e-6   # construction-time unit-norm invariant


class Status(enum.Enum):
    """Bundle-adjustment verdict for a 2D-3D feature match."""

    INLIER = "in"
    OUTLIER = "out"


@dataclass(frozen=True)
class FeatureRecord:
    """One keypoint observation: frame, pixel coordinates, verdict, run id."""

    frame_id: int
    x: float
    y: float
    status: Status
    run_id: int

    def __post_init__(self):
        if self.frame_id < 0:
            raise ValidationError(f"frame_id must be non-negative, got {self.frame_id}")
        if self.run_id < 0:
            raise ValidationError(f"run_id must be non-negative, got {self.run_id}")
        if not isinstance(self.status, Status):
            raise ValidationError(f"status must be a Status, got {self.status!r}")

    def validate_bounds(self, width: int, height: int) -> None:
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ValidationError(
                f"record (frame={self.frame_id}, x={self.x}, y={self.y}, "
                f"run={self.run_id}) lies outside the {width}x{height} image"
            )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; fx/fy/cx/cy in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class SequenceMeta:
    """Recording parameters of one sequence."""

    sequence_id: str
    image_width: int
    image_height: int
    fps: float
    frame_count: int
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        for name in ("image_width", "image_height", "fps", "frame_count"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def frame_period(self) -> float:
        return 1.0 / self.fps


@dataclass(frozen=True)
class Pose:
    """Camera-to-world pose: timestamp (s), translation t (m), unit quaternion q (x,y,z,w)."""

    timestamp: float
    t: tuple[float, float, float]
    q: tuple[float, float, float, float]

    def __post_init__(self):
        n = math.sqrt(sum(c * c for c in self.q))
        if abs(n - 1.0) > QUAT_NORM_SOFT_TOL:
            raise ValidationError(f"quaternion norm {n} deviates from 1 beyond {QUAT_NORM_SOFT_TOL}")

    def translation(self) -> np.ndarray:
        return np.asarray(self.t, dtype=np.float64)

    def quaternion(self) -> np.ndarray:
        return np.asarray(self.q, dtype=np.float64)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped camera poses plus the tracked/total frame tally.

    ``tracked_frames``/``total_frames`` carry the tracking-rate numerator and
    denominator; they are not serialized in the trajectory text format.
    """

    poses: tuple[Pose, ...]
    tracked_frames: int
    total_frames: int

    def __post_init__(self):
        ts = [p.timestamp for p in self.poses]
        for a, b in zip(ts, ts[1:]):
            if not a < b:
                raise ValidationError(f"timestamps must be strictly increasing ({a} then {b})")
        if not 0 <= self.tracked_frames <= self.total_frames:
            raise ValidationError(
                f"need 0 <= tracked_frames <= total_frames, got "
                f"{self.tracked_frames}/{self.total_frames}"
            )

    @classmethod
    def from_poses(cls, poses: Iterable[Pose], total_frames: int | None = None) -> "Trajectory":
        poses = tuple(poses)
        n = len(poses)
        return cls(poses=poses, tracked_frames=n, total_frames=n if total_frames is None else total_frames)

    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.poses], dtype=np.float64)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses], dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box on one frame; half-open corners x0 < x1, y0 < y1."""

    frame_id: int
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(
                f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1}) on frame {self.frame_id}"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> np.ndarray:
        return np.array(
            [[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]],
            dtype=np.float64,
        )

    def overlaps(self, other: "BBox") -> bool:
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )

    def hull(self, other: "BBox") -> "BBox":
        return BBox(
            self.frame_id,
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )

    def intersection_area(self, other: "BBox") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return w * h if (w > 0 and h > 0) else 0.0

    def iou(self, other: "BBox") -> float:
        inter = self.intersection_area(other)
        if inter == 0.0:
            return 0.0
        return inter / (self.area + other.area - inter)

    def clipped(self, width: float, height: float) -> "BBox | None":
        """Intersection with the image rectangle, or None if empty."""
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, float(width)), min(self.y1, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox(self.frame_id, x0, y0, x1, y1)

    def dilated(self, radius: float) -> "BBox":
        return BBox(self.frame_id, self.x0 - radius, self.y0 - radius, self.x1 + radius, self.y1 + radius)


@dataclass(frozen=True)
class RleMask:
    """Run-length encoded binary raster, row-major. ``first`` is the value of run 0."""

    first: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.first not in (0, 1):
            raise ValidationError(f"first must be 0 or 1, got {self.first}")
        if any(r <= 0 for r in self.runs):
            raise ValidationError("run lengths must be positive")

    @property
    def n_pixels(self) -> int:
        return sum(self.runs)

    def foreground_count(self) -> int:
        return sum(self.runs[self.first == 0 :: 2]) if self.runs else 0


def encode_mask(raster: np.ndarray) -> RleMask:
    """Encode a 2D binary raster into alternating run lengths."""
    flat = np.asarray(raster, dtype=bool).ravel()
    if flat.size == 0:
        raise ValidationError("cannot encode an empty raster")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    return RleMask(first=int(flat[0]), runs=tuple(int(r) for r in runs))


def decode_mask(rle: RleMask, width: int, height: int) -> np.ndarray:
    """Decode back to a (height, width) boolean raster; lengths must sum to width*height."""
    total = rle.n_pixels
    if total != width * height:
        raise ValidationError(f"RLE pixel count {total} != {width}x{height}")
    values = np.zeros(len(rle.runs), dtype=bool)
    values[rle.first == 0 :: 2] = True
    flat = np.repeat(values, np.asarray(rle.runs, dtype=np.int64))
    return flat.reshape(height, width)


@dataclass(frozen=True)
class MaskSequence:
    """Per-frame binary masks of one dynamic object, RLE-compressed."""

    sequence_id: str
    width: int
    height: int
    object_id: int
    frames: Mapping[int, RleMask] = field(default_factory=dict)

    def __post_init__(self):
        for f, rle in self.frames.items():
            if rle.n_pixels != self.width * self.height:
                raise ValidationError(
                    f"mask for frame {f} decodes to {rle.n_pixels} pixels, "
                    f"expected {self.width}x{self.height}"
                )

    def frame_ids(self) -> list[int]:
        return sorted(self.frames)

    def mask_at(self, frame_id: int) -> np.ndarray | None:
        rle = self.frames.get(frame_id)
        if rle is None:
            return None
        return decode_mask(rle, self.width, self.height)

    def with_object_id(self, object_id: int, sequence_id: str | None = None) -> "MaskSequence":
        return MaskSequence(
            sequence_id=self.sequence_id if sequence_id is None else sequence_id,
            width=self.width,
            height=self.height,
            object_id=object_id,
            frames=dict(self.frames),
        )


class FeatureTable:
    """Columnar store of feature records, sorted by frame.

    This is the bulk carrier equivalent to a frame-grouped mapping of
    :class:`FeatureRecord`; readers and the simulator produce it so that
    million-row runs stay in numpy arrays.
    """

    __slots__ = ("frame", "x", "y", "inlier", "run", "_offsets", "_frame_ids")

    def __init__(self, frame, x, y, inlier, run):
        frame = np.asarray(frame, dtype=np.int32)
        n = frame.shape[0]
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inlier = np.asarray(inlier, dtype=bool)
        run = np.asarray(run, dtype=np.int32)
        if not (x.shape[0] == y.shape[0] == inlier.shape[0] == run.shape[0] == n):
            raise ValidationError("feature table columns must have equal length")
        order = np.argsort(frame, kind="stable")
        self.frame = frame[order]
        self.x = x[order]
        self.y = y[order]
        self.inlier = inlier[order]
        self.run = run[order]
        self._frame_ids, starts = np.unique(self.frame, return_index=True)
        self._offsets = np.append(starts, n)

    def __len__(self) -> int:
        return self.frame.shape[0]

    def frame_ids(self) -> np.ndarray:
        return self._frame_ids

    def frame_slice(self, frame_id: int) -> slice:
        i = np.searchsorted(self._frame_ids, frame_id)
        if i == len(self._frame_ids) or self._frame_ids[i] != frame_id:
            return slice(0, 0)
        return slice(self._offsets[i], self._offsets[i + 1])

    def xy_for_frame(self, frame_id: int) -> np.ndarray:
        s = self.frame_slice(frame_id)
        return np.column_stack([self.x[s], self.y[s]])

    def select(self, keep: np.ndarray) -> "FeatureTable":
        return FeatureTable(self.frame[keep], self.x[keep], self.y[keep], self.inlier[keep], self.run[keep])

    def validate_bounds(self, width: int, height: int) -> None:
        bad = ~((self.x >= 0) & (self.x < width) & (self.y >= 0) & (self.y < height))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"record (frame={int(self.frame[i])}, x={self.x[i]}, y={self.y[i]}, "
                f"run={int(self.run[i])}) lies outside the {width}x{height} image"
            )

    @classmethod
    def from_grouped(cls, grouped: Mapping[int, Sequence[FeatureRecord]]) -> "FeatureTable":
        frames, xs, ys, inl, runs = [], [], [], [], []
        for f in sorted(grouped):
            for r in grouped[f]:
                frames.append(r.frame_id)
                xs.append(r.x)
                ys.append(r.y)
                inl.append(r.status is Status.INLIER)
                runs.append(r.run_id)
        return cls(frames, xs, ys, inl, runs)

    def to_grouped(self) -> dict[int, list[FeatureRecord]]:
        out: dict[int, list[FeatureRecord]] = {}
        for i in range(len(self)):
            rec = FeatureRecord(
                frame_id=int(self.frame[i]),
                x=float(self.x[i]),
                y=float(self.y[i]),
                status=Status.INLIER if self.inlier[i] else Status.OUTLIER,
                run_id=int(self.run[i]),
            )
            out.setdefault(rec.frame_id, []).append(rec)
        return out


def as_feature_table(records) -> FeatureTable:
    """Accept either a FeatureTable or a frame-grouped record mapping."""
    if isinstance(records, FeatureTable):
        return records
    return FeatureTable.from_grouped(records)
