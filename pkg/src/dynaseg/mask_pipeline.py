"""Turn flagged windows into per-object mask sequences.

Overlapping boxes are merged per frame, each merged box is refined into a
single binary mask from the outlier cells it contains, masks are tracked to
past and future frames, and mask sets are superimposed. Refinement and
propagation accept plugins so segmentation/tracking networks can be swapped
in for the built-in geometric defaults; refine/propagate calls for distinct
boxes are independent and parallelizable.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .errors import PluginContractError, ValidationError
from .model import BBox, MaskSequence, RleMask, SequenceMeta, decode_mask, encode_mask
from .io import write_pgm
from .run_merge import MergedFeatureMap
from .window_detector import WindowScore


@dataclass(frozen=True)
class MaskGenConfig:
    """k: propagation/refinement half-window in frames; the remaining fields
    parameterize the built-in geometric refiner."""

    k: int = 15
    refine_density_threshold: float = 0.25
    dilation_radius: int = 10
    search_margin: int = 30
    max_empty_frames: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.refine_density_threshold <= 1.0:
            raise ValidationError(
                f"refine_density_threshold must be in (0,1], got {self.refine_density_threshold}"
            )
        if self.dilation_radius < 0 or self.search_margin < 0 or self.max_empty_frames < 1:
            raise ValidationError("dilation_radius/search_margin/max_empty_frames out of range")


@dataclass(frozen=True)
class RefineRequest:
    """Context handed to a segmenter plugin: the box plus the frame interval
    whose content it may inspect."""

    meta: SequenceMeta
    box: BBox
    frame_lo: int
    frame_hi: int


@dataclass(frozen=True)
class TrackRequest:
    """Context handed to a tracker plugin: the frame to segment and the mask
    tracked on the previous frame."""

    meta: SequenceMeta
    frame_id: int
    previous_mask: RleMask
    search_box: BBox


@runtime_checkable
class SegmenterPlugin(Protocol):
    def refine(self, request: RefineRequest) -> np.ndarray: ...


@runtime_checkable
class TrackerPlugin(Protocol):
    def track(self, request: TrackRequest) -> np.ndarray: ...


# -- box merging -----------------------------------------------------------------

def merge_boxes(flagged: Sequence[WindowScore]) -> dict[int, list[BBox]]:
    """Per frame, replace every transitive group of overlapping boxes by its
    union hull; repeats until the hulls themselves are pairwise disjoint."""
    per_frame: dict[int, list[BBox]] = {}
    for w in flagged:
        per_frame.setdefault(w.frame_id, []).append(w.box)

    merged: dict[int, list[BBox]] = {}
    for frame_id in sorted(per_frame):
        boxes = per_frame[frame_id]
        changed = True
        while changed:
            changed = False
            result: list[BBox] = []
            for box in boxes:
                absorbed = False
                for i, other in enumerate(result):
                    if box.overlaps(other):
                        result[i] = other.hull(box)
                        absorbed = True
                        changed = True
                        break
                if not absorbed:
                    result.append(box)
            boxes = result
        merged[frame_id] = sorted(boxes, key=lambda b: (b.y0, b.x0, b.y1, b.x1))
    return merged


# -- geometric refinement ----------------------------------------------------------

def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def _cells_to_raster(
    merged: MergedFeatureMap, keep: np.ndarray, gx0: int, gy0: int, box: BBox
) -> np.ndarray:
    """Paint kept grid cells as pixel rectangles, clipped to the box."""
    meta = merged.meta
    raster = np.zeros((meta.image_height, meta.image_width), dtype=bool)
    c = merged.cell_size
    ys, xs = np.nonzero(keep)
    for gy, gx in zip(ys + gy0, xs + gx0):
        x_lo = max(int(np.ceil(box.x0)), gx * c)
        x_hi = min(int(np.floor(box.x1)), (gx + 1) * c, meta.image_width)
        y_lo = max(int(np.ceil(box.y0)), gy * c)
        y_hi = min(int(np.floor(box.y1)), (gy + 1) * c, meta.image_height)
        if x_lo < x_hi and y_lo < y_hi:
            raster[y_lo:y_hi, x_lo:x_hi] = True
    return raster


def _refine_raster(
    merged: MergedFeatureMap, box: BBox, frame_lo: int, frame_hi: int, cfg: MaskGenConfig
) -> np.ndarray | None:
    """Threshold accumulated outlier cells in the box, dilate, keep the largest
    4-connected component. None = no outliers at all (empty-mask signal)."""
    gx0, gx1 = merged.cell_range(box.x0, box.x1, merged.grid_w)
    gy0, gy1 = merged.cell_range(box.y0, box.y1, merged.grid_h)
    if gx0 >= gx1 or gy0 >= gy1:
        return None
    acc = merged.outlier_counts[frame_lo : frame_hi + 1, gy0:gy1, gx0:gx1].sum(axis=0)
    peak = int(acc.max()) if acc.size else 0
    if peak == 0:
        return None
    keep = acc >= cfg.refine_density_threshold * peak
    raster = _cells_to_raster(merged, keep, gx0, gy0, box)
    if not raster.any():
        return None
    raster = ndimage.binary_dilation(raster, structure=_disk(cfg.dilation_radius))
    labels, n = ndimage.label(raster)  # 4-connectivity
    if n > 1:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
        raster = labels == (1 + int(np.argmax(sizes)))
    # containment contract: mask stays within the box dilated by the radius
    limit = box.dilated(cfg.dilation_radius).clipped(merged.meta.image_width, merged.meta.image_height)
    if limit is None:
        return None
    bound = np.zeros_like(raster)
    bound[int(np.floor(limit.y0)) : int(np.ceil(limit.y1)), int(np.floor(limit.x0)) : int(np.ceil(limit.x1))] = True
    raster &= bound
    return raster if raster.any() else None


def _validate_plugin_mask(mask: np.ndarray, meta: SequenceMeta, box: BBox | None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (meta.image_height, meta.image_width):
        raise PluginContractError(
            f"plugin mask shape {mask.shape} != image {meta.image_height}x{meta.image_width}"
        )
    mask = mask.astype(bool)
    if box is not None and mask.any():
        xs0 = max(int(box.x0), 0)
        ys0 = max(int(box.y0), 0)
        xs1 = min(int(np.ceil(box.x1)), meta.image_width)
        ys1 = min(int(np.ceil(box.y1)), meta.image_height)
        if not mask[ys0:ys1, xs0:xs1].any():
            raise PluginContractError("plugin mask does not intersect the given box")
    return mask


def refine_box(
    merged: MergedFeatureMap,
    box: BBox,
    cfg: MaskGenConfig,
    plugin: SegmenterPlugin | None = None,
) -> np.ndarray | None:
    """Refine a merged box into one binary mask.

    The default refiner accumulates the box's outlier cells over the frames
    [t-k, t+k] (clipped to the sequence). Returns None when the interval holds
    no outliers, which drops the box.
    """
    meta = merged.meta
    frame_lo = max(box.frame_id - cfg.k, 0)
    frame_hi = min(box.frame_id + cfg.k, meta.frame_count - 1)
    if plugin is not None:
        mask = plugin.refine(RefineRequest(meta=meta, box=box, frame_lo=frame_lo, frame_hi=frame_hi))
        mask = _validate_plugin_mask(mask, meta, box)
        return mask if mask.any() else None
    return _refine_raster(merged, box, frame_lo, frame_hi, cfg)


def _mask_bbox(mask: np.ndarray, frame_id: int) -> BBox:
    ys, xs = np.nonzero(mask)
    return BBox(frame_id, float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def propagate_mask(
    merged: MergedFeatureMap,
    seed_mask: np.ndarray,
    seed_frame: int,
    cfg: MaskGenConfig,
    plugin: TrackerPlugin | None = None,
    object_id: int = 1,
) -> MaskSequence:
    """Track a seed mask to past and future frames.

    Default tracker: search where the previous mask was (expanded by
    ``search_margin``), re-refine on that single frame's outliers, and carry
    the previous mask over short gaps. A direction stops after
    ``max_empty_frames`` consecutive gap frames; carried gap masks at the tail
    are discarded so each direction ends at its last genuine detection.
    """
    meta = merged.meta
    seed_mask = np.asarray(seed_mask, dtype=bool)
    if not seed_mask.any():
        raise ValidationError("seed mask is empty")

    frames: dict[int, np.ndarray] = {seed_frame: seed_mask}
    for step in (1, -1):
        prev = seed_mask
        pending: list[tuple[int, np.ndarray]] = []
        empties = 0
        frame = seed_frame + step
        while 0 <= frame < meta.frame_count and empties < cfg.max_empty_frames:
            search = _mask_bbox(prev, frame).dilated(cfg.search_margin).clipped(
                meta.image_width, meta.image_height
            )
            if search is None:
                break
            if plugin is not None:
                found = plugin.track(
                    TrackRequest(
                        meta=meta, frame_id=frame, previous_mask=encode_mask(prev), search_box=search
                    )
                )
                found = _validate_plugin_mask(found, meta, None)
                if not found.any():
                    found = None
            else:
                found = _refine_raster(merged, search, frame, frame, cfg)
            if found is None:
                empties += 1
                pending.append((frame, prev))
            else:
                for gap_frame, gap_mask in pending:
                    frames[gap_frame] = gap_mask
                pending.clear()
                empties = 0
                frames[frame] = found
                prev = found
            frame += step

    return MaskSequence(
        sequence_id=meta.sequence_id,
        width=meta.image_width,
        height=meta.image_height,
        object_id=object_id,
        frames={f: encode_mask(m) for f, m in frames.items()},
    )


# -- mask set algebra ----------------------------------------------------------------

def superimpose(masks: Sequence[MaskSequence]) -> MaskSequence:
    """Per-frame pixelwise OR of mask sequences; the union gets object_id 0."""
    if not masks:
        raise ValidationError("nothing to superimpose")
    first = masks[0]
    for m in masks[1:]:
        if (m.width, m.height) != (first.width, first.height):
            raise ValidationError(
                f"resolution mismatch: {m.width}x{m.height} vs {first.width}x{first.height}"
            )
        if m.sequence_id != first.sequence_id:
            raise ValidationError(f"sequence mismatch: {m.sequence_id!r} vs {first.sequence_id!r}")
    out: dict[int, RleMask] = {}
    all_frames = sorted({f for m in masks for f in m.frames})
    for f in all_frames:
        union = np.zeros((first.height, first.width), dtype=bool)
        for m in masks:
            rle = m.frames.get(f)
            if rle is not None:
                union |= decode_mask(rle, first.width, first.height)
        out[f] = encode_mask(union)
    return MaskSequence(
        sequence_id=first.sequence_id,
        width=first.width,
        height=first.height,
        object_id=0,
        frames=out,
    )


def _covered_by_existing(sequences: Sequence[MaskSequence], frame_id: int, box: BBox) -> bool:
    for seq in sequences:
        rle = seq.frames.get(frame_id)
        if rle is None:
            continue
        mask = decode_mask(rle, seq.width, seq.height)
        if not mask.any():
            continue
        if box.overlaps(_mask_bbox(mask, frame_id)):
            return True
    return False


def build_masks(
    merged: MergedFeatureMap,
    flagged: Sequence[WindowScore],
    cfg: MaskGenConfig,
    segmenter: SegmenterPlugin | None = None,
    tracker: TrackerPlugin | None = None,
) -> list[MaskSequence]:
    """Full mask stage: merge boxes, refine, propagate.

    Flags of one object typically repeat over a handful of onset frames;
    boxes already explained by a previously propagated mask are skipped, so
    one MaskSequence comes out per distinct object region.
    """
    merged_boxes = merge_boxes(flagged)
    sequences: list[MaskSequence] = []
    object_id = 1
    for frame_id in sorted(merged_boxes):
        for box in merged_boxes[frame_id]:
            if _covered_by_existing(sequences, frame_id, box):
                continue
            mask = refine_box(merged, box, cfg, plugin=segmenter)
            if mask is None:
                continue
            seq = propagate_mask(merged, mask, frame_id, cfg, plugin=tracker, object_id=object_id)
            sequences.append(seq)
            object_id += 1
    return sequences


# -- training-set export ----------------------------------------------------------------

def export_training_set(masks: MaskSequence, meta: SequenceMeta, out_dir) -> Path:
    """Write one PGM per frame plus a manifest JSON; deterministic bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for frame_id in masks.frame_ids():
        name = f"frame_{frame_id:06d}.pgm"
        write_pgm(out / name, decode_mask(masks.frames[frame_id], masks.width, masks.height))
        entries.append({"frame": frame_id, "file": name})
    manifest = {
        "sequence": masks.sequence_id,
        "width": masks.width,
        "height": masks.height,
        "object": masks.object_id,
        "entries": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


# -- process-level plugin adapters ----------------------------------------------------------------

class SubprocessSegmenter:
    """Adapter running an external executable as a segmenter plugin.

    Protocol: one JSON request on stdin
    ``{"kind":"refine","width":..,"height":..,"frame":..,"frames":[lo,hi],
    "box":[x0,y0,x1,y1]}`` and one JSON mask reply on stdout
    ``{"rle":[...],"first":0|1}``.
    """

    def __init__(self, argv: Sequence[str]):
        self.argv = list(argv)

    def refine(self, request: RefineRequest) -> np.ndarray:
        reply = _run_plugin(
            self.argv,
            {
                "kind": "refine",
                "width": request.meta.image_width,
                "height": request.meta.image_height,
                "frame": request.box.frame_id,
                "frames": [request.frame_lo, request.frame_hi],
                "box": [request.box.x0, request.box.y0, request.box.x1, request.box.y1],
            },
        )
        return _mask_from_reply(reply, request.meta)


class SubprocessTracker:
    """Adapter running an external executable as a tracker plugin.

    Request: ``{"kind":"track","width":..,"height":..,"frame":..,
    "box":[...],"previous":{"rle":[...],"first":0|1}}``; reply as for refine.
    """

    def __init__(self, argv: Sequence[str]):
        self.argv = list(argv)

    def track(self, request: TrackRequest) -> np.ndarray:
        reply = _run_plugin(
            self.argv,
            {
                "kind": "track",
                "width": request.meta.image_width,
                "height": request.meta.image_height,
                "frame": request.frame_id,
                "box": [
                    request.search_box.x0,
                    request.search_box.y0,
                    request.search_box.x1,
                    request.search_box.y1,
                ],
                "previous": {
                    "rle": list(request.previous_mask.runs),
                    "first": request.previous_mask.first,
                },
            },
        )
        return _mask_from_reply(reply, request.meta)


def _run_plugin(argv: Sequence[str], request: dict) -> dict:
    proc = subprocess.run(
        list(argv),
        input=json.dumps(request).encode("utf-8"),
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )
    if proc.returncode != 0:
        raise PluginContractError(
            f"plugin exited with {proc.returncode}: {proc.stderr.decode('utf-8', 'replace').strip()}"
        )
    try:
        return json.loads(proc.stdout.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise PluginContractError(f"plugin emitted invalid JSON: {exc}") from exc


def _mask_from_reply(reply: dict, meta: SequenceMeta) -> np.ndarray:
    try:
        rle = RleMask(first=reply["first"], runs=tuple(int(r) for r in reply["rle"]))
    except (KeyError, TypeError, ValidationError) as exc:
        raise PluginContractError(f"plugin reply is not a valid RLE mask: {exc}") from exc
    try:
        return decode_mask(rle, meta.image_width, meta.image_height)
    except ValidationError as exc:
        raise PluginContractError(str(exc)) from exc
