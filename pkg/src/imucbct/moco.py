"""Motion-correction strategies built on estimated sensor poses.

Rigid correction folds the per-view motion matrix into the projection
matrices.  The non-rigid paths interpolate a moving-least-squares
deformation from three control points (ankle/knee/hip or their
knee-shrunk stand-ins): per query point, control points are weighted by
inverse squared distance and the best similarity (2D) or rigid (3D)
transform of the weighted cloud is applied.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigurationError, CoverageError,
                     DegenerateControlPointsError)
from .geometry import affine_inverse, euler_xyz_from_matrix, project_point
from .imu import SensorMount, SyncMap
from .interp import bilinear_sample
from .pose import PoseTrack


@dataclass
class MotionSeries:
    """Per-view affine motion mapping reference-pose coordinates to the
    body position at view i; the first view is the reference."""

    matrices: np.ndarray  # (n, 4, 4)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != (4, 4):
            raise ConfigurationError(f"expected (n, 4, 4) matrices, got {self.matrices.shape}")
        if np.max(np.abs(self.matrices[0] - np.eye(4))) > 1e-9:
            raise ConfigurationError("motion at the first view must be the identity")

    def __len__(self):
        return len(self.matrices)


@dataclass(frozen=True)
class MocoConfig:
    """Non-rigid correction parameters."""

    alpha: float = 0.8          # control-point shrink toward the knee
    eps: float = 1e-8           # weight regularization at control points
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.interpolation != "bilinear":
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")


@dataclass
class ControlPointSet:
    """Reference points p and their deformed positions q."""

    dim: int
    p: np.ndarray  # (m, dim)
    q: np.ndarray  # (m, dim)
    off_detector: bool = False

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.dim not in (2, 3):
            raise ConfigurationError("dim must be 2 or 3")
        if self.p.shape != self.q.shape or self.p.ndim != 2 or self.p.shape[1] != self.dim:
            raise ConfigurationError(
                f"control points must share shape (m, {self.dim}), "
                f"got {self.p.shape}/{self.q.shape}")
        minimum = 1 if self.dim == 2 else 3
        if len(self.p) < minimum:
            raise ConfigurationError(f"need at least {minimum} control points in {self.dim}D")


def rigid_motion_series(track: PoseTrack, sync: SyncMap) -> MotionSeries:
    """Per-view motion from a single sensor's pose track.

    M(i) maps a point rigid with the sensor from its reference (first
    view) position to its position at view i: M(i) = S(t_i) S(t_0)^-1,
    the composition of the global pose changes across the view gap.
    """
    idx = np.asarray(sync.indices)
    if idx[-1] >= len(track):
        raise CoverageError(
            f"pose track of {len(track)} samples does not cover projection "
            f"sample {int(idx[-1])}")
    s0_inv = affine_inverse(track.poses[idx[0]])
    mats = track.poses[idx] @ s0_inv
    mats[0] = np.eye(4)
    return MotionSeries(matrices=mats)


def correct_projection_matrices(geom, motion: MotionSeries):
    """Fold per-view motion into the projection matrices: P'(i) = P(i) M(i)."""
    if len(motion) != geom.n_proj:
        raise ConfigurationError(
            f"{len(motion)} motion matrices for {geom.n_proj} views")
    corrected = np.einsum("nij,njk->nik", geom.matrices, motion.matrices)
    return geom.with_matrices(corrected)


def joints_from_imu_poses(tibia_pose, femur_pose, shank_mount: SensorMount,
                          thigh_mount: SensorMount):
    """Ankle, knee and hip world positions from the two sensor poses.

    The knee and ankle come from the shank sensor (proximal resp. distal
    joint of its segment), the hip from the thigh sensor.
    """
    def joint_world(pose, mount, joint_in_segment):
        local = mount.r_off.T @ (np.asarray(joint_in_segment) - mount.p_sen)
        return pose[:3, :3] @ local + pose[:3, 3]

    knee = joint_world(tibia_pose, shank_mount, (0.0, 0.0, 0.0))
    ankle = joint_world(tibia_pose, shank_mount, (0.0, -shank_mount.segment_length_m, 0.0))
    hip = joint_world(femur_pose, thigh_mount, (0.0, 0.0, 0.0))
    return ankle, knee, hip


def shrink_joints_toward_knee(ankle, knee, hip, alpha):
    """Move hip and ankle toward the knee: x' = (1 - alpha) x + alpha k."""
    ankle, knee, hip = (np.asarray(v, float) for v in (ankle, knee, hip))
    return ((1.0 - alpha) * ankle + alpha * knee, knee,
            (1.0 - alpha) * hip + alpha * knee)


def control_points_2d(joints_i, joints_0, geom, view, cfg: MocoConfig) -> ControlPointSet:
    """Project the (shrunk) joint triple of the reference frame and of
    view i with the view's matrix, giving 2D control points p -> q.

    Points may fall outside the detector; they are kept (the deformation
    only needs coordinates) and flagged.
    """
    ref = np.vstack(shrink_joints_toward_knee(*joints_0, cfg.alpha))
    cur = np.vstack(shrink_joints_toward_knee(*joints_i, cfg.alpha))
    P = geom.matrices[view]
    p = np.asarray(project_point(P, ref))
    q = np.asarray(project_point(P, cur))
    allpts = np.vstack([p, q])
    off = bool(np.any(allpts[:, 0] < 0) or np.any(allpts[:, 0] > geom.det_cols - 1)
               or np.any(allpts[:, 1] < 0) or np.any(allpts[:, 1] > geom.det_rows - 1))
    return ControlPointSet(dim=2, p=p, q=q, off_detector=off)


# ---------------------------------------------------------------------------
# 2D moving least squares (similarity solution with normalized matrix sum)


def mls_map_2d(p, q, nu, eps=1e-8):
    """Deformed positions f(nu) for query points nu of shape (N, 2).

    Per query, control points are weighted by 1 / (|p_j - nu|^2 + eps);
    f scales the offset from the weighted p-centroid by the normalized
    similarity matrix sum and re-anchors at the q-centroid.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    nu = np.asarray(nu, float)
    nx = np.ascontiguousarray(nu[:, 0])
    ny = np.ascontiguousarray(nu[:, 1])

    m = len(p)
    w = [1.0 / ((p[j, 0] - nx) ** 2 + (p[j, 1] - ny) ** 2 + eps) for j in range(m)]
    wsum = w[0].copy()
    for j in range(1, m):
        wsum += w[j]
    psx = sum(w[j] * p[j, 0] for j in range(m)) / wsum
    psy = sum(w[j] * p[j, 1] for j in range(m)) / wsum
    qsx = sum(w[j] * q[j, 0] for j in range(m)) / wsum
    qsy = sum(w[j] * q[j, 1] for j in range(m)) / wsum

    dx = nx - psx
    dy = ny - psy
    ux = np.zeros_like(dx)
    uy = np.zeros_like(dy)
    for j in range(m):
        phx = p[j, 0] - psx
        phy = p[j, 1] - psy
        qhx = q[j, 0] - qsx
        qhy = q[j, 1] - qsy
        alpha = phx * dx + phy * dy          # p_hat . d
        beta = phy * dx - phx * dy           # p_hat . d_perp
        ux += w[j] * (qhx * alpha + qhy * beta)
        uy += w[j] * (qhy * alpha - qhx * beta)

    norm = np.sqrt(ux * ux + uy * uy)
    dist = np.sqrt(dx * dx + dy * dy)
    safe = np.where(norm > 1e-300, norm, 1.0)
    scale = np.where(norm > 1e-300, dist / safe, 0.0)
    return np.column_stack([scale * ux + qsx, scale * uy + qsy])


def mls_warp_2d(image, cps: ControlPointSet, eps=1e-8):
    """Resample the image through the control-point deformation.

    Inverse-mapping convention: the output pixel at nu takes the input
    value at f(nu), bilinearly interpolated, so the result has no holes.
    Identical p and q leave the image untouched (zero motion is the
    identity operator).
    """
    if cps.dim != 2:
        raise ConfigurationError("mls_warp_2d needs 2D control points")
    if np.array_equal(cps.p, cps.q):
        return image.copy()
    h, w = image.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    nu = np.column_stack([uu.ravel(), vv.ravel()])
    f = mls_map_2d(cps.p, cps.q, nu, eps=eps)
    return bilinear_sample(image, f[:, 0], f[:, 1]).reshape(h, w)


# ---------------------------------------------------------------------------
# 3D moving least squares (rigid solution via SVD)

_CHUNK = 1 << 18


def mls_transform_3d(nu, cps: ControlPointSet, eps=1e-8):
    """Rigidly deform query point(s) by the weighted control-point fit.

    For each query the weighted cross-covariance of centered control
    points is decomposed as U S V^T and the rotation V U^T (determinant
    corrected by flipping the smallest singular direction) maps the
    query's offset from the p-centroid onto the q-centroid.
    """
    if cps.dim != 3:
        raise ConfigurationError("mls_transform_3d needs 3D control points")
    p = cps.p
    centered = p - p.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-12 * max(svals[0], 1e-30):
        raise DegenerateControlPointsError("control points are collinear")

    nu = np.asarray(nu, dtype=float)
    single = nu.ndim == 1
    pts = np.atleast_2d(nu)
    out = np.empty_like(pts)
    for lo in range(0, len(pts), _CHUNK):
        out[lo:lo + _CHUNK] = _mls_rigid_3d_block(p, cps.q, pts[lo:lo + _CHUNK], eps)
    return out[0] if single else out


def _mls_rigid_3d_block(p, q, nu, eps):
    d = nu[:, None, :] - p[None, :, :]
    w = 1.0 / (np.einsum("nmi,nmi->nm", d, d) + eps)
    wsum = w.sum(axis=1)
    pstar = (w @ p) / wsum[:, None]
    qstar = (w @ q) / wsum[:, None]
    phat = p[None, :, :] - pstar[:, None, :]
    qhat = q[None, :, :] - qstar[:, None, :]
    B = np.einsum("nm,nmi,nmj->nij", w, phat, qhat)
    U, _, Vh = np.linalg.svd(B)
    s = np.sign(np.linalg.det(U) * np.linalg.det(Vh))
    s[s == 0] = 1.0
    V = Vh.transpose(0, 2, 1).copy()
    V[:, :, 2] *= s[:, None]
    R = V @ U.transpose(0, 2, 1)
    return np.einsum("nij,nj->ni", R, nu - pstar) + qstar


# ---------------------------------------------------------------------------
# export


def save_motion_csv(motion: MotionSeries, path):
    """Per-view translation (mm) and intrinsic-xyz Euler angles (deg)."""
    lines = ["view,tx_mm,ty_mm,tz_mm,rx_deg,ry_deg,rz_deg"]
    for i, M in enumerate(motion.matrices):
        t = M[:3, 3] * 1000.0
        ang = np.rad2deg(euler_xyz_from_matrix(M[:3, :3]))
        vals = [*t, *ang]
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in vals))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
