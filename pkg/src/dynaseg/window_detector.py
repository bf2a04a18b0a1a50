"""Multi-scale sliding-window scan flagging dynamic-object windows.

The score of a window compares its outlier/inlier balance against the same
physical location a few frames later, after rotation-only compensation of
camera motion. A drop below the threshold means inliers turned into outliers
there, i.e. a mapped object started moving.

The scan is deterministic and embarrassingly parallel over frames; results
are canonicalized by (frame, size, y, x) regardless of evaluation order.
Window evaluation is batched per frame through summed-area tables, so a full
600-frame, 4-size scan takes seconds, not minutes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import TrajectoryGapError, ValidationError
from .geometry import compensation_homography, rotation_between
from .model import BBox, CameraIntrinsics, Trajectory
from .run_merge import MergedFeatureMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    window_sizes: tuple[int, ...] = (100, 200, 300, 400)
    stride: int = 50
    frame_gap: int = 3
    s_max: float = 0.15
    epsilon: float = 0.5
    # guards for degenerate windows; see score semantics below
    min_window_features: int = 10
    min_warp_overlap: float = 0.5

    def __post_init__(self):
        if self.stride <= 0:
            raise ValidationError(f"stride must be positive, got {self.stride}")
        if not self.window_sizes or any(s < self.stride for s in self.window_sizes):
            raise ValidationError("every window size must be >= stride")
        if self.frame_gap < 1:
            raise ValidationError(f"frame_gap must be >= 1, got {self.frame_gap}")
        if not 0.0 < self.s_max < 1.0:
            raise ValidationError(f"s_max must be in (0,1), got {self.s_max}")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class WindowScore:
    """Score of one anchor window; counts are (in_w, out_w, in_w', out_w')."""

    frame_id: int
    box: BBox
    score: float
    counts: tuple[int, int, int, int]

    @property
    def total_features(self) -> int:
        return sum(self.counts)


@dataclass
class ScanReport:
    """Flagged windows plus skip statistics of one full scan."""

    flagged: list[WindowScore] = field(default_factory=list)
    windows_total: int = 0
    skipped_trajectory_gap: int = 0
    skipped_off_image: int = 0
    skipped_low_features: int = 0


def enumerate_positions(image_extent: int, size: int, stride: int) -> np.ndarray:
    """Stride-aligned anchor offsets keeping the window fully inside the image."""
    if size > image_extent:
        return np.empty(0, dtype=np.int64)
    n = (image_extent - size) // stride + 1
    return np.arange(n, dtype=np.int64) * stride


def window_count_for_frame(width: int, height: int, cfg: DetectorConfig) -> int:
    total = 0
    for s in cfg.window_sizes:
        total += len(enumerate_positions(width, s, cfg.stride)) * len(
            enumerate_positions(height, s, cfg.stride)
        )
    return total


def _grid_ranges(merged: MergedFeatureMap, lo: np.ndarray, hi: np.ndarray, n_cells: int):
    c = merged.cell_size
    start = np.clip(np.ceil(lo / c - 0.5).astype(np.int64), 0, n_cells)
    stop = np.clip(np.ceil(hi / c - 0.5).astype(np.int64), 0, n_cells)
    stop = np.maximum(stop, start)
    return start, stop


def _rect_sums(ii: np.ndarray, gx0, gx1, gy0, gy1) -> np.ndarray:
    return ii[gy1, gx1] - ii[gy0, gx1] - ii[gy1, gx0] + ii[gy0, gx0]


def _batch_counts(merged: MergedFeatureMap, frame_id: int, x0, y0, x1, y1):
    gx0, gx1 = _grid_ranges(merged, x0, x1, merged.grid_w)
    gy0, gy1 = _grid_ranges(merged, y0, y1, merged.grid_h)
    ii_in, ii_out = merged.integral(frame_id)
    return _rect_sums(ii_in, gx0, gx1, gy0, gy1), _rect_sums(ii_out, gx0, gx1, gy0, gy1)


def _score_frame_batch(
    merged: MergedFeatureMap,
    traj: Trajectory,
    K: CameraIntrinsics,
    frame_t: int,
    x0: np.ndarray,
    y0: np.ndarray,
    w: np.ndarray,
    h: np.ndarray,
    cfg: DetectorConfig,
):
    """Evaluate a batch of anchor windows of one frame.

    Returns (scores, counts 4-tuple, valid-warp mask); raises
    TrajectoryGapError when either frame has no associated pose.
    """
    fps = merged.meta.fps
    width, height = merged.meta.image_width, merged.meta.image_height
    t_next = frame_t + cfg.frame_gap

    dR = rotation_between(traj, t_next, frame_t, fps)
    H = compensation_homography(K, dR).H

    x1 = x0 + w
    y1 = y0 + h
    in_w, out_w = _batch_counts(merged, frame_t, x0, y0, x1, y1)

    # warp the 4 corners of every anchor into the future frame
    n = len(x0)
    corners = np.empty((n, 4, 3), dtype=np.float64)
    corners[:, 0, 0], corners[:, 0, 1] = x0, y0
    corners[:, 1, 0], corners[:, 1, 1] = x1, y0
    corners[:, 2, 0], corners[:, 2, 1] = x1, y1
    corners[:, 3, 0], corners[:, 3, 1] = x0, y1
    corners[:, :, 2] = 1.0
    mapped = corners @ H.T
    uv = mapped[:, :, :2] / mapped[:, :, 2:3]
    wx0 = uv[:, :, 0].min(axis=1)
    wx1 = uv[:, :, 0].max(axis=1)
    wy0 = uv[:, :, 1].min(axis=1)
    wy1 = uv[:, :, 1].max(axis=1)

    full_area = (wx1 - wx0) * (wy1 - wy0)
    cx0 = np.maximum(wx0, 0.0)
    cy0 = np.maximum(wy0, 0.0)
    cx1 = np.minimum(wx1, float(width))
    cy1 = np.minimum(wy1, float(height))
    clipped_w = np.maximum(cx1 - cx0, 0.0)
    clipped_h = np.maximum(cy1 - cy0, 0.0)
    valid = (full_area > 0) & (clipped_w > 0) & (clipped_h > 0)
    overlap = np.where(valid, clipped_w * clipped_h / np.where(full_area > 0, full_area, 1.0), 0.0)
    valid &= overlap >= cfg.min_warp_overlap

    in_wp = np.zeros(n, dtype=np.int64)
    out_wp = np.zeros(n, dtype=np.int64)
    if valid.any():
        iv = np.flatnonzero(valid)
        a, b = _batch_counts(merged, t_next, cx0[iv], cy0[iv], cx1[iv], cy1[iv])
        in_wp[iv] = a
        out_wp[iv] = b

    eps = cfg.epsilon
    ratio_w = (out_w + eps) / (in_w + eps)
    ratio_wp = (out_wp + eps) / (in_wp + eps)
    scores = ratio_w / ratio_wp
    return scores, (in_w, out_w, in_wp, out_wp), valid


def score_window(
    merged: MergedFeatureMap,
    traj: Trajectory,
    K: CameraIntrinsics,
    frame_t: int,
    box: BBox,
    cfg: DetectorConfig,
) -> WindowScore | None:
    """Score one window anchored at ``frame_t``.

    The anchor is evaluated at frame t and its motion-compensated location at
    frame t+gap; S = smoothed outlier/inlier ratio of the anchor divided by
    the same ratio of the future window. Returns None (skip signal) when the
    warped window leaves the image, keeps under half its area after clipping,
    or either frame lacks an associated pose.
    """
    t_next = frame_t + cfg.frame_gap
    if not (0 <= frame_t and t_next < merged.meta.frame_count):
        raise ValidationError(
            f"frames {frame_t} and {t_next} must both lie in [0, {merged.meta.frame_count})"
        )
    try:
        scores, counts, valid = _score_frame_batch(
            merged,
            traj,
            K,
            frame_t,
            np.array([box.x0]),
            np.array([box.y0]),
            np.array([box.width]),
            np.array([box.height]),
            cfg,
        )
    except TrajectoryGapError:
        return None
    if not valid[0]:
        return None
    return WindowScore(
        frame_id=frame_t,
        box=box,
        score=float(scores[0]),
        counts=(int(counts[0][0]), int(counts[1][0]), int(counts[2][0]), int(counts[3][0])),
    )


def scan_sequence(
    merged: MergedFeatureMap,
    traj: Trajectory,
    K: CameraIntrinsics,
    cfg: DetectorConfig,
) -> ScanReport:
    """Score every stride-aligned window of every frame pair and collect flags.

    A window is flagged when S < s_max and both windows hold at least
    ``min_window_features`` features; the flag is attributed to the anchor
    frame (the one before motion manifests).
    """
    meta = merged.meta
    report = ScanReport()
    sizes_sorted = tuple(sorted(cfg.window_sizes))

    # precompute anchor batches per size: positions are frame-independent
    per_size = []
    for s in sizes_sorted:
        xs = enumerate_positions(meta.image_width, s, cfg.stride)
        ys = enumerate_positions(meta.image_height, s, cfg.stride)
        if len(xs) == 0 or len(ys) == 0:
            continue
        gx, gy = np.meshgrid(xs, ys)  # y-major then x: canonical order
        per_size.append((s, gx.ravel().astype(np.float64), gy.ravel().astype(np.float64)))
    if per_size:
        x0 = np.concatenate([g[1] for g in per_size])
        y0 = np.concatenate([g[2] for g in per_size])
        sizes = np.concatenate([np.full(len(g[1]), g[0], dtype=np.float64) for g in per_size])
    else:
        x0 = y0 = sizes = np.empty(0, dtype=np.float64)
    batch_n = len(x0)

    last_frame = meta.frame_count - cfg.frame_gap
    for t in range(0, max(last_frame, 0)):
        report.windows_total += batch_n
        if batch_n == 0:
            continue
        try:
            scores, counts, valid = _score_frame_batch(merged, traj, K, t, x0, y0, sizes, sizes, cfg)
        except TrajectoryGapError:
            report.skipped_trajectory_gap += batch_n
            continue
        in_w, out_w, in_wp, out_wp = counts
        report.skipped_off_image += int((~valid).sum())
        enough = ((in_w + out_w) >= cfg.min_window_features) & (
            (in_wp + out_wp) >= cfg.min_window_features
        )
        report.skipped_low_features += int((valid & ~enough).sum())
        hits = valid & enough & (scores < cfg.s_max)
        for i in np.flatnonzero(hits):
            box = BBox(t, float(x0[i]), float(y0[i]), float(x0[i] + sizes[i]), float(y0[i] + sizes[i]))
            report.flagged.append(
                WindowScore(
                    frame_id=t,
                    box=box,
                    score=float(scores[i]),
                    counts=(int(in_w[i]), int(out_w[i]), int(in_wp[i]), int(out_wp[i])),
                )
            )
    log.info(
        "scan: %d windows, %d flagged, %d gap-skips, %d off-image, %d low-feature",
        report.windows_total,
        len(report.flagged),
        report.skipped_trajectory_gap,
        report.skipped_off_image,
        report.skipped_low_features,
    )
    return report
