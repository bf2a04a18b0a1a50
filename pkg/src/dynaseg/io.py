"""File formats: feature-record JSONL, TUM trajectory text, mask JSONL, PGM, meta.

Readers reject any record violating type invariants; nothing is silently
clamped. Writers emit ``repr``-exact floats so write/read round-trips are
lossless and re-serialization is byte-stable. IO is single-threaded per file.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .model import (
    QUAT_NORM_HARD_TOL,
    BBox,
    CameraIntrinsics,
    FeatureRecord,
    FeatureTable,
    MaskSequence,
    Pose,
    RleMask,
    SequenceMeta,
    Status,
    Trajectory,
    as_feature_table,
)

_STATUS_BY_TAG = {"in": Status.INLIER, "out": Status.OUTLIER}


# -- feature records ---------------------------------------------------------

def _parse_feature_line(line: str, path, lineno: int) -> tuple[int, float, float, bool, int]:
    try:
        obj = json.loads(line)
        frame = obj["frame"]
        x = obj["x"]
        y = obj["y"]
        status = obj["status"]
        run = obj["run"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed feature record: {exc}", path, lineno) from exc
    if status not in _STATUS_BY_TAG:
        raise ParseError(f'status must be "in" or "out", got {status!r}', path, lineno)
    if not isinstance(frame, int) or frame < 0:
        raise ParseError(f"frame must be a non-negative integer, got {frame!r}", path, lineno)
    if not isinstance(run, int) or run < 0:
        raise ParseError(f"run must be a non-negative integer, got {run!r}", path, lineno)
    return frame, float(x), float(y), status == "in", run


def read_feature_table(path, meta: SequenceMeta | None = None) -> FeatureTable:
    """Fast columnar reader for feature-record JSONL."""
    frames, xs, ys, inl, runs = [], [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            f, x, y, is_in, r = _parse_feature_line(line, path, lineno)
            frames.append(f)
            xs.append(x)
            ys.append(y)
            inl.append(is_in)
            runs.append(r)
    table = FeatureTable(frames, xs, ys, inl, runs)
    if meta is not None:
        table.validate_bounds(meta.image_width, meta.image_height)
    return table


def read_feature_records(path, meta: SequenceMeta | None = None) -> dict[int, list[FeatureRecord]]:
    """Read feature records grouped by frame id.

    When ``meta`` is given, coordinates are validated against the declared
    resolution and offending records are rejected with a ValidationError.
    """
    return read_feature_table(path, meta).to_grouped()


def feature_line(frame: int, x: float, y: float, inlier: bool, run: int) -> str:
    status = "in" if inlier else "out"
    return f'{{"frame":{frame},"x":{float(x)!r},"y":{float(y)!r},"status":"{status}","run":{run}}}'


def write_feature_records(path, records) -> None:
    """Write a FeatureTable or frame-grouped record mapping as JSONL."""
    table = as_feature_table(records)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(table)):
            fh.write(
                feature_line(
                    int(table.frame[i]), table.x[i], table.y[i], bool(table.inlier[i]), int(table.run[i])
                )
            )
            fh.write("\n")


# -- trajectories (TUM text format) ------------------------------------------

def read_trajectory(path, total_frames: int | None = None) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` comments allowed.

    Quaternions off unit norm by more than 1e-3 are rejected; smaller
    deviations are normalized (exactly-unit values are left untouched so a
    rewrite is byte-identical).
    """
    poses: list[Pose] = []
    last_ts = -math.inf
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", path, lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"non-numeric field: {exc}", path, lineno) from exc
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            if not ts > last_ts:
                raise ValidationError(
                    f"{path}:{lineno}: timestamps must be strictly increasing "
                    f"({last_ts} then {ts})"
                )
            last_ts = ts
            q = np.array([qx, qy, qz, qw], dtype=np.float64)
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) > QUAT_NORM_HARD_TOL:
                raise ValidationError(
                    f"{path}:{lineno}: quaternion norm {norm} deviates from 1 beyond "
                    f"{QUAT_NORM_HARD_TOL}"
                )
            if abs(norm - 1.0) > 1e-12:
                q = q / norm
            poses.append(Pose(timestamp=ts, t=(tx, ty, tz), q=(q[0], q[1], q[2], q[3])))
    return Trajectory.from_poses(poses, total_frames=total_frames)


def write_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in traj.poses:
            tx, ty, tz = p.t
            qx, qy, qz, qw = p.q
            fh.write(
                f"{float(p.timestamp)!r} {float(tx)!r} {float(ty)!r} {float(tz)!r} "
                f"{float(qx)!r} {float(qy)!r} {float(qz)!r} {float(qw)!r}\n"
            )


# -- masks --------------------------------------------------------------------

def read_masks(path, meta: SequenceMeta) -> list[MaskSequence]:
    """Read mask JSONL; returns one MaskSequence per object id found."""
    per_object: dict[int, dict[int, RleMask]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                frame = obj["frame"]
                object_id = obj["object"]
                runs = obj["rle"]
                first = obj["first"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed mask record: {exc}", path, lineno) from exc
            try:
                rle = RleMask(first=first, runs=tuple(int(r) for r in runs))
            except ValidationError as exc:
                raise ParseError(str(exc), path, lineno) from exc
            if rle.n_pixels != meta.image_width * meta.image_height:
                raise ParseError(
                    f"RLE pixel count {rle.n_pixels} != "
                    f"{meta.image_width}x{meta.image_height}",
                    path,
                    lineno,
                )
            per_object.setdefault(object_id, {})[frame] = rle
    return [
        MaskSequence(
            sequence_id=meta.sequence_id,
            width=meta.image_width,
            height=meta.image_height,
            object_id=oid,
            frames=frames,
        )
        for oid, frames in sorted(per_object.items())
    ]


def write_masks(path, masks: Iterable[MaskSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in masks:
            for frame in seq.frame_ids():
                rle = seq.frames[frame]
                runs = ",".join(str(r) for r in rle.runs)
                fh.write(f'{{"frame":{frame},"object":{seq.object_id},"rle":[{runs}],"first":{rle.first}}}\n')


def write_pgm(path, raster: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255, foreground (True) = 255."""
    raster = np.asarray(raster, dtype=bool)
    h, w = raster.shape
    data = (raster.astype(np.uint8) * 255).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


# -- sequence meta -------------------------------------------------------------

_META_KEYS = ("id", "width", "height", "fps", "frames", "fx", "fy", "cx", "cy")


def read_meta(path) -> SequenceMeta:
    """Flat ``key = value`` file with id/width/height/fps/frames/fx/fy/cx/cy."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", path, lineno)
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    missing = [k for k in _META_KEYS if k not in values]
    if missing:
        raise ParseError(f"missing meta keys: {', '.join(missing)}", path)
    try:
        return SequenceMeta(
            sequence_id=values["id"],
            image_width=int(values["width"]),
            image_height=int(values["height"]),
            fps=float(values["fps"]),
            frame_count=int(values["frames"]),
            intrinsics=CameraIntrinsics(
                fx=float(values["fx"]),
                fy=float(values["fy"]),
                cx=float(values["cx"]),
                cy=float(values["cy"]),
            ),
        )
    except ValueError as exc:
        raise ParseError(f"bad meta value: {exc}", path) from exc


def write_meta(meta: SequenceMeta, path) -> None:
    k = meta.intrinsics
    lines = [
        f"id = {meta.sequence_id}",
        f"width = {meta.image_width}",
        f"height = {meta.image_height}",
        f"fps = {meta.fps!r}",
        f"frames = {meta.frame_count}",
        f"fx = {k.fx!r}",
        f"fy = {k.fy!r}",
        f"cx = {k.cx!r}",
        f"cy = {k.cy!r}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- flagged windows -----------------------------------------------------------

def write_flagged_windows(path, flagged) -> None:
    """JSONL export of detector hits: {"frame","box","S"} per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for w in flagged:
            b = w.box
            fh.write(
                f'{{"frame":{w.frame_id},"box":[{b.x0!r},{b.y0!r},{b.x1!r},{b.y1!r}],'
                f'"S":{w.score!r}}}\n'
            )


def read_flagged_windows(path) -> list[tuple[int, BBox, float]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                frame = obj["frame"]
                x0, y0, x1, y1 = obj["box"]
                score = obj["S"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed flagged-window record: {exc}", path, lineno) from exc
            out.append((frame, BBox(frame, x0, y0, x1, y1), float(score)))
    return out
