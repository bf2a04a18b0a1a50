"""Merge inlier/outlier observations across SLAM runs on a quantized grid.

Sub-pixel detections never repeat exactly across non-deterministic runs, so
observations are accumulated per grid cell. Cells observed in too few runs
are zeroed: isolated per-run noise would otherwise merge into spurious
clusters. Building the map is an associative reduction over runs; queries on
a built map are read-only and thread-safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .model import BBox, CameraIntrinsics, FeatureTable, SequenceMeta, as_feature_table


@dataclass(frozen=True)
class MergeConfig:
    """cell_size: quantization grid pitch; min_run_fraction: fraction of runs a
    cell/status must appear in to survive filtering."""

    cell_size: int = 8
    min_run_fraction: float = 0.3

    def __post_init__(self):
        if self.cell_size < 1:
            raise ValidationError(f"cell_size must be >= 1, got {self.cell_size}")
        if not 0.0 <= self.min_run_fraction <= 1.0:
            raise ValidationError(f"min_run_fraction must be in [0,1], got {self.min_run_fraction}")


class MergedFeatureMap:
    """Per-frame grid of filtered inlier/outlier counters.

    ``inlier_counts``/``outlier_counts`` have shape (frames, grid_h, grid_w)
    and hold observation totals after rare-cell filtering; ``runs_seen_*``
    hold the number of distinct contributing runs per cell/status.
    """

    def __init__(self, meta: SequenceMeta, cfg: MergeConfig, total_runs: int,
                 inlier_counts, outlier_counts, runs_seen_in, runs_seen_out):
        self.meta = meta
        self.cell_size = cfg.cell_size
        self.min_run_fraction = cfg.min_run_fraction
        self.total_runs = total_runs
        self.grid_w = math.ceil(meta.image_width / cfg.cell_size)
        self.grid_h = math.ceil(meta.image_height / cfg.cell_size)
        shape = (meta.frame_count, self.grid_h, self.grid_w)
        for arr in (inlier_counts, outlier_counts, runs_seen_in, runs_seen_out):
            if arr.shape != shape:
                raise ValidationError(f"grid shape {arr.shape} != expected {shape}")
        self.inlier_counts = inlier_counts
        self.outlier_counts = outlier_counts
        self.runs_seen_in = runs_seen_in
        self.runs_seen_out = runs_seen_out
        self._integrals: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # cell-center-in-box rule: a cell contributes to a box query when its
    # center (gx+0.5)*c, (gy+0.5)*c falls inside [x0,x1) x [y0,y1)
    def cell_range(self, lo: float, hi: float, n_cells: int) -> tuple[int, int]:
        c = self.cell_size
        start = int(np.ceil(lo / c - 0.5))
        stop = int(np.ceil(hi / c - 0.5))
        return max(start, 0), min(stop, n_cells)

    def integral(self, frame_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Cached summed-area tables (inlier, outlier) for one frame."""
        cached = self._integrals.get(frame_id)
        if cached is not None:
            return cached
        pads = []
        for counts in (self.inlier_counts, self.outlier_counts):
            ii = np.zeros((self.grid_h + 1, self.grid_w + 1), dtype=np.int64)
            np.cumsum(np.cumsum(counts[frame_id], axis=0), axis=1, out=ii[1:, 1:])
            pads.append(ii)
        if len(self._integrals) > 16:
            self._integrals.clear()
        self._integrals[frame_id] = (pads[0], pads[1])
        return pads[0], pads[1]

    def window_counts(self, frame_id: int, box: BBox) -> tuple[int, int]:
        """Filtered (inlier, outlier) totals of cells whose centers fall in box."""
        if not 0 <= frame_id < self.meta.frame_count:
            raise ValidationError(f"frame {frame_id} out of range [0, {self.meta.frame_count})")
        gx0, gx1 = self.cell_range(box.x0, box.x1, self.grid_w)
        gy0, gy1 = self.cell_range(box.y0, box.y1, self.grid_h)
        if gx0 >= gx1 or gy0 >= gy1:
            return 0, 0
        ii_in, ii_out = self.integral(frame_id)
        def rect(ii):
            return int(ii[gy1, gx1] - ii[gy0, gx1] - ii[gy1, gx0] + ii[gy0, gx0])
        return rect(ii_in), rect(ii_out)

    def frame_totals(self, frame_id: int) -> tuple[int, int]:
        return (
            int(self.inlier_counts[frame_id].sum()),
            int(self.outlier_counts[frame_id].sum()),
        )


def window_counts(merged: MergedFeatureMap, frame_id: int, box: BBox) -> tuple[int, int]:
    return merged.window_counts(frame_id, box)


def _cell_histogram(table: FeatureTable, meta: SequenceMeta, cell: int,
                    grid_h: int, grid_w: int, want_inlier: bool) -> np.ndarray:
    sel = table.inlier if want_inlier else ~table.inlier
    gx = (table.x[sel] // cell).astype(np.int64)
    gy = (table.y[sel] // cell).astype(np.int64)
    flat = (table.frame[sel].astype(np.int64) * grid_h + gy) * grid_w + gx
    counts = np.bincount(flat, minlength=meta.frame_count * grid_h * grid_w)
    return counts.reshape(meta.frame_count, grid_h, grid_w)


def merge_runs(runs: Sequence, meta: SequenceMeta, cfg: MergeConfig) -> MergedFeatureMap:
    """Accumulate per-run observations on the grid and zero rarely-seen cells.

    ``runs`` is a sequence of FeatureTables or frame-grouped FeatureRecord
    mappings, one entry per run. A cell/status whose distinct-run count falls
    below ceil(min_run_fraction * total_runs) is zeroed for that status.
    """
    if not runs:
        raise ValidationError("need at least one run to merge")
    tables = [as_feature_table(r) for r in runs]
    for t in tables:
        t.validate_bounds(meta.image_width, meta.image_height)
        if len(t) and int(t.frame[-1]) >= meta.frame_count:
            raise ValidationError(
                f"record frame {int(t.frame[-1])} beyond declared frame count {meta.frame_count}"
            )

    grid_w = math.ceil(meta.image_width / cfg.cell_size)
    grid_h = math.ceil(meta.image_height / cfg.cell_size)
    shape = (meta.frame_count, grid_h, grid_w)

    counts = {True: np.zeros(shape, dtype=np.int32), False: np.zeros(shape, dtype=np.int32)}
    seen = {True: np.zeros(shape, dtype=np.int16), False: np.zeros(shape, dtype=np.int16)}
    for t in tables:
        for want_inlier in (True, False):
            h = _cell_histogram(t, meta, cfg.cell_size, grid_h, grid_w, want_inlier)
            counts[want_inlier] += h.astype(np.int32)
            seen[want_inlier] += (h > 0).astype(np.int16)

    threshold = math.ceil(cfg.min_run_fraction * len(tables))
    for want_inlier in (True, False):
        counts[want_inlier][seen[want_inlier] < threshold] = 0

    return MergedFeatureMap(
        meta, cfg, len(tables),
        inlier_counts=counts[True], outlier_counts=counts[False],
        runs_seen_in=seen[True], runs_seen_out=seen[False],
    )


# -- debug dump ------------------------------------------------------------------

def dump_merged_map(merged: MergedFeatureMap, path) -> None:
    """JSONL of nonzero cells, preceded by a header line with grid parameters."""
    m = merged.meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {
                    "sequence": m.sequence_id,
                    "width": m.image_width,
                    "height": m.image_height,
                    "frames": m.frame_count,
                    "fps": m.fps,
                    "fx": m.intrinsics.fx,
                    "fy": m.intrinsics.fy,
                    "cx": m.intrinsics.cx,
                    "cy": m.intrinsics.cy,
                    "cell_size": merged.cell_size,
                    "min_run_fraction": merged.min_run_fraction,
                    "total_runs": merged.total_runs,
                },
                sort_keys=True,
            )
        )
        fh.write("\n")
        nz = np.nonzero(
            (merged.inlier_counts > 0) | (merged.outlier_counts > 0)
            | (merged.runs_seen_in > 0) | (merged.runs_seen_out > 0)
        )
        for f, gy, gx in zip(*nz):
            fh.write(
                f'{{"frame":{int(f)},"cx":{int(gx)},"cy":{int(gy)},'
                f'"in":{int(merged.inlier_counts[f, gy, gx])},'
                f'"out":{int(merged.outlier_counts[f, gy, gx])},'
                f'"runs_in":{int(merged.runs_seen_in[f, gy, gx])},'
                f'"runs_out":{int(merged.runs_seen_out[f, gy, gx])}}}\n'
            )


def load_merged_map(path) -> MergedFeatureMap:
    """Inverse of :func:`dump_merged_map`."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
            meta = SequenceMeta(
                sequence_id=header["sequence"],
                image_width=header["width"],
                image_height=header["height"],
                fps=header["fps"],
                frame_count=header["frames"],
                intrinsics=CameraIntrinsics(
                    fx=header["fx"], fy=header["fy"], cx=header["cx"], cy=header["cy"]
                ),
            )
            cfg = MergeConfig(cell_size=header["cell_size"], min_run_fraction=header["min_run_fraction"])
            total_runs = header["total_runs"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed merged-map header: {exc}", path, 1) from exc

        grid_w = math.ceil(meta.image_width / cfg.cell_size)
        grid_h = math.ceil(meta.image_height / cfg.cell_size)
        shape = (meta.frame_count, grid_h, grid_w)
        counts_in = np.zeros(shape, dtype=np.int32)
        counts_out = np.zeros(shape, dtype=np.int32)
        seen_in = np.zeros(shape, dtype=np.int16)
        seen_out = np.zeros(shape, dtype=np.int16)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                f, gx, gy = obj["frame"], obj["cx"], obj["cy"]
                counts_in[f, gy, gx] = obj["in"]
                counts_out[f, gy, gx] = obj["out"]
                seen_in[f, gy, gx] = obj["runs_in"]
                seen_out[f, gy, gx] = obj["runs_out"]
            except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
                raise ParseError(f"malformed merged-map cell: {exc}", path, lineno) from exc
    return MergedFeatureMap(
        meta, cfg, total_runs,
        inlier_counts=counts_in, outlier_counts=counts_out,
        runs_seen_in=seen_in, runs_seen_out=seen_out,
    )
