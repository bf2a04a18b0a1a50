"""Runtime SLAM-integration primitive: drop keypoints on masked areas.

Pure functions with no shared mutable state, callable from a real-time SLAM
thread. Frames without a mask pass through unfiltered (segmentation may lag
behind the tracker at runtime) and the caller gets a flag saying so.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import FeatureTable, MaskSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KeypointSet:
    """Detected keypoints of one frame."""

    frame_id: int
    xy: np.ndarray  # (N, 2) pixel coordinates

    def __post_init__(self):
        object.__setattr__(self, "xy", np.asarray(self.xy, dtype=np.float64).reshape(-1, 2))

    def __len__(self) -> int:
        return self.xy.shape[0]


def keypoint_mask_lookup(xy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """True where the keypoint's pixel (floor(x), floor(y)) is masked.

    Masks are binary, so membership uses the containing pixel; no bilinear
    sampling. Coordinates must lie inside the mask raster.
    """
    h, w = mask.shape
    px = np.floor(xy[:, 0]).astype(np.int64)
    py = np.floor(xy[:, 1]).astype(np.int64)
    if len(px) and not ((px >= 0).all() and (px < w).all() and (py >= 0).all() and (py < h).all()):
        raise ValidationError("keypoint outside the mask raster")
    return mask[py, px]


def filter_keypoints(kps: KeypointSet, mask: np.ndarray | None) -> tuple[KeypointSet, bool]:
    """Keep keypoints on background pixels, preserving order.

    Returns (kept, mask_applied). ``mask=None`` means the frame has no mask:
    the set passes through unchanged with mask_applied=False and a warning.
    """
    if mask is None:
        log.warning("frame %d has no mask; keypoints pass through unfiltered", kps.frame_id)
        return kps, False
    on_mask = keypoint_mask_lookup(kps.xy, np.asarray(mask, dtype=bool))
    return KeypointSet(frame_id=kps.frame_id, xy=kps.xy[~on_mask]), True


def filter_feature_table(table: FeatureTable, masks: MaskSequence) -> tuple[FeatureTable, int]:
    """Bulk variant over a whole feature table.

    Returns (filtered table, number of frames that had no mask and passed
    through).
    """
    keep = np.ones(len(table), dtype=bool)
    unmasked_frames = 0
    for frame_id in table.frame_ids():
        frame_id = int(frame_id)
        raster = masks.mask_at(frame_id)
        if raster is None:
            unmasked_frames += 1
            continue
        sel = table.frame_slice(frame_id)
        xy = np.column_stack([table.x[sel], table.y[sel]])
        keep[sel] = ~keypoint_mask_lookup(xy, raster)
    if unmasked_frames:
        log.warning("%d frames had no mask; their features pass through unfiltered", unmasked_frames)
    return table.select(keep), unmasked_frames
