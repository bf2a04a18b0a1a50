"""Rotation-only homography motion compensation and Sim(3) trajectory alignment.

Everything here is a pure function over immutable inputs; safe for parallel
per-window invocation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometryError, TrajectoryGapError, ValidationError
from .model import BBox, CameraIntrinsics, Trajectory

_ORTHO_TOL = 1e-9


def _check_rotation(m: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    if np.abs(m.T @ m - np.eye(3)).max() > tol:
        raise ValidationError("matrix is not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise ValidationError("matrix determinant is not +1")


@dataclass(frozen=True)
class RotationDelta:
    """Relative rotation between two frames; dR is orthonormal with det +1."""

    dR: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dR", np.asarray(self.dR, dtype=np.float64).reshape(3, 3))
        _check_rotation(self.dR)

    def transposed(self) -> "RotationDelta":
        return RotationDelta(self.dR.T.copy())


@dataclass(frozen=True)
class Homography:
    """3x3 projective map between image planes."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(H)) < 1e-12:
            raise ValidationError("homography is singular")
        object.__setattr__(self, "H", H)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N,2) pixels through H with homogeneous normalization."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        hom = np.column_stack([pts, np.ones(len(pts))])
        mapped = hom @ self.H.T
        return mapped[:, :2] / mapped[:, 2:3]


@dataclass(frozen=True)
class Sim3:
    """Similarity transform x -> s*R*x + t."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.s <= 0:
            raise ValidationError(f"scale must be positive, got {self.s}")
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        _check_rotation(self.R, tol=1e-6)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.s * (pts @ self.R.T) + self.t


# -- frame/pose association ----------------------------------------------------

def pose_index_for_frame(traj: Trajectory, frame_id: int, fps: float) -> int:
    """Nearest-timestamp pose for a frame, within half a frame period.

    Frame f is expected at timestamp f/fps.
    """
    if len(traj) == 0:
        raise TrajectoryGapError(f"empty trajectory has no pose for frame {frame_id}")
    target = frame_id / fps
    ts = traj.timestamps()
    i = int(np.searchsorted(ts, target))
    best, best_dt = None, np.inf
    for j in (i - 1, i):
        if 0 <= j < len(ts):
            dt = abs(ts[j] - target)
            if dt < best_dt:
                best, best_dt = j, dt
    if best is None or best_dt > 0.5 / fps:
        raise TrajectoryGapError(f"no pose within half a frame period of frame {frame_id}")
    return best


def rotation_matrix(traj: Trajectory, index: int) -> np.ndarray:
    """World (camera-to-world) rotation of the pose at ``index``."""
    return Rotation.from_quat(traj.poses[index].quaternion()).as_matrix()


def rotation_between(traj: Trajectory, frame_p: int, frame_pp: int, fps: float) -> RotationDelta:
    """dR = R(p')*R(p)^T, with R(f) the camera-to-world rotation of frame f."""
    rp = rotation_matrix(traj, pose_index_for_frame(traj, frame_p, fps))
    rpp = rotation_matrix(traj, pose_index_for_frame(traj, frame_pp, fps))
    return RotationDelta(rpp @ rp.T)


def compensation_homography(K: CameraIntrinsics, dR: RotationDelta) -> Homography:
    """H = K * dR * K^-1 : rotation-only compensation of camera motion."""
    Km = K.matrix()
    return Homography(Km @ dR.dR @ np.linalg.inv(Km))


def warp_box(H: Homography, box: BBox, image_width: int, image_height: int) -> tuple[BBox, float] | None:
    """Warp the 4 corners and return (axis-aligned hull clipped to the image,
    fraction of the warped hull area that survived clipping).

    Returns None when the warped box lies entirely outside the image, which
    callers treat as a skip signal.
    """
    warped = H.apply(box.corners())
    x0, y0 = warped.min(axis=0)
    x1, y1 = warped.max(axis=0)
    if x0 >= x1 or y0 >= y1:
        return None
    full = BBox(box.frame_id, x0, y0, x1, y1)
    clipped = full.clipped(image_width, image_height)
    if clipped is None:
        return None
    return clipped, clipped.area / full.area


# -- Sim(3) estimation -----------------------------------------------------------

def umeyama_sim3(est: np.ndarray, ref: np.ndarray) -> Sim3:
    """Closed-form least-squares similarity minimizing sum ||ref - (s*R*est + t)||^2.

    Umeyama's solution; raises DegenerateGeometryError when the point
    covariance is rank-deficient (e.g. collinear points).
    """
    src = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValidationError(f"point sets differ in size: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValidationError(f"need at least 3 point pairs, got {n}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src0 = src - mu_src
    dst0 = dst - mu_dst

    cov = dst0.T @ src0 / n
    if np.linalg.matrix_rank(cov, tol=1e-9 * max(1.0, float(np.abs(cov).max()))) < 2:
        raise DegenerateGeometryError("point covariance is rank-deficient")

    U, D, Vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign[2] = -1.0
    R = U @ np.diag(sign) @ Vt

    var_src = (src0 ** 2).sum() / n
    if var_src <= 0:
        raise DegenerateGeometryError("source points are all identical")
    s = float((D * sign).sum() / var_src)
    if s <= 0:
        raise DegenerateGeometryError("estimated scale is not positive")
    t = mu_dst - s * (R @ mu_src)
    return Sim3(s=s, R=R, t=t)
