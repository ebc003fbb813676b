"""Strapdown pose integration and projection-based initialization.

Integration follows the discrete scheme:

    R(t+1) = R(t) G(t),          G(t) = exp([omega(t) dt]x)
    g_loc(t) = R(t)^T g
    v(t+1) = G(t)^T (v(t) + (a(t) + g_loc(t)) dt)
    S(t+1) = S(t) [[G(t), v(t) dt], [0, 1]]

with v in m/s in the sensor frame and the per-sample displacement taken
from the pre-update velocity.  Under this convention the initial
velocity is the backward difference of the sensor position at the first
integrated sample.

Initialization recovers the sensor pose from the tracked 2D positions
of four known sensor-fixed points in a single projection, by solving
for the four depths along the pixel rays with damped Gauss-Newton.
The initial velocity follows from a second projection: integrating the
gap with zero initial velocity offsets the relative translation by
exactly n * e * dt, where e is the velocity error, so one linear
correction recovers it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (ConditioningError, ConfigurationError, CoverageError,
                     InitializationError, IntegrationError)
from .geometry import (affine_inverse, make_affine, polar_orthonormalize,
                       project_point, rodrigues)
from .imu import GRAVITY, ImuSeries, SyncMap


@dataclass
class PoseTrack:
    """World poses of a sensor, one per IMU sample, plus the initial
    velocity the track was integrated with."""

    rate_hz: float
    poses: np.ndarray   # (N, 4, 4)
    v0: np.ndarray      # (3,) sensor-frame velocity at the first sample

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)
        self.v0 = np.asarray(self.v0, dtype=float)

    def __len__(self):
        return len(self.poses)


def integrate_poses(series: ImuSeries, s0, v0, g=GRAVITY, *,
                    n_steps=None, reorthonormalize_every=256) -> PoseTrack:
    """Dead-reckon world poses from an IMU series and initial state.

    ``s0`` is the world pose at the first sample, ``v0`` the initial
    sensor-frame velocity (m/s).  Integrates ``n_steps`` samples
    (default: the whole series).  The rotation block is re-orthonormalized
    by polar decomposition every ``reorthonormalize_every`` steps.
    """
    g = np.asarray(g, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    steps = len(series) - 1 if n_steps is None else min(n_steps, len(series) - 1)
    bad = ~(np.all(np.isfinite(series.acc[:steps + 1]), axis=1)
            & np.all(np.isfinite(series.gyro[:steps + 1]), axis=1))
    if bad.any():
        raise IntegrationError("non-finite IMU sample", sample=int(np.argmax(bad)))

    dt = series.dt
    poses = np.empty((steps + 1, 4, 4))
    poses[0] = s0
    R = s0[:3, :3].copy()
    x = s0[:3, 3].copy()
    v = np.asarray(v0, dtype=float).copy()
    for t in range(steps):
        g_loc = R.T @ g
        G = rodrigues(series.gyro[t] * dt)
        x = x + R @ (v * dt)
        R = R @ G
        v = G.T @ (v + (series.acc[t] + g_loc) * dt)
        if (t + 1) % reorthonormalize_every == 0:
            R = polar_orthonormalize(R)
        poses[t + 1, :3, :3] = R
        poses[t + 1, :3, 3] = x
        poses[t + 1, 3] = (0.0, 0.0, 0.0, 1.0)
    return PoseTrack(rate_hz=series.rate_hz, poses=poses, v0=np.asarray(v0, float))


# ---------------------------------------------------------------------------
# initial pose from one projection


@dataclass(frozen=True)
class FiducialModel:
    """Four sensor-fixed points with known geometry and their tracked 2D
    detector positions in one projection.

    The canonical layout is the sensor origin plus the three axis tips
    at distance ``arm_m`` along the measurement axes (axis-tip spacing
    sqrt(2) * arm_m).  Arbitrary non-coplanar layouts are accepted; the
    solver then constrains all pairwise distances and handedness.
    """

    model_points: np.ndarray   # (4, 3) sensor frame
    tracked_uv: np.ndarray     # (4, 2) detector pixels
    arm_m: float = 1.0
    canonical: bool = True

    def __post_init__(self):
        object.__setattr__(self, "model_points", np.asarray(self.model_points, float))
        object.__setattr__(self, "tracked_uv", np.asarray(self.tracked_uv, float))
        if self.model_points.shape != (4, 3) or self.tracked_uv.shape != (4, 2):
            raise ConfigurationError("need 4 model points and 4 tracked pixels")
        rel = self.model_points[1:] - self.model_points[0]
        if abs(np.linalg.det(rel)) < 1e-12:
            raise ConfigurationError("fiducial points must be non-coplanar")


def canonical_fiducial_points(arm_m):
    return arm_m * np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])


def project_fiducials(pose, P, arm_m=0.05) -> FiducialModel:
    """Track the canonical fiducials of a sensor at ``pose`` in view P."""
    pts = canonical_fiducial_points(arm_m)
    world = pts @ pose[:3, :3].T + pose[:3, 3]
    uv = np.asarray(project_point(P, world))
    return FiducialModel(model_points=pts, tracked_uv=uv, arm_m=arm_m, canonical=True)


def _canonical_residuals(X, dirs, arm):
    """Unit-axis, spacing, orthogonality and handedness constraints,
    normalized to O(error / arm)."""
    a2 = arm * arm
    ux, uy, uz = X[1] - X[0], X[2] - X[0], X[3] - X[0]
    r = np.empty(12)
    r[0] = (ux @ ux - a2) / a2
    r[1] = (uy @ uy - a2) / a2
    r[2] = (uz @ uz - a2) / a2
    d_xy, d_yz, d_xz = X[1] - X[2], X[2] - X[3], X[1] - X[3]
    r[3] = (d_xy @ d_xy - 2.0 * a2) / a2
    r[4] = (d_yz @ d_yz - 2.0 * a2) / a2
    r[5] = (d_xz @ d_xz - 2.0 * a2) / a2
    r[6] = (ux @ uy) / a2
    r[7] = (uy @ uz) / a2
    r[8] = (ux @ uz) / a2
    r[9:12] = (np.cross(ux, uy) - arm * uz) / a2

    J = np.zeros((12, 4))
    du = dirs  # dX_k / dlambda_k
    # length terms
    J[0, 1] = 2.0 * ux @ du[1] / a2
    J[0, 0] = -2.0 * ux @ du[0] / a2
    J[1, 2] = 2.0 * uy @ du[2] / a2
    J[1, 0] = -2.0 * uy @ du[0] / a2
    J[2, 3] = 2.0 * uz @ du[3] / a2
    J[2, 0] = -2.0 * uz @ du[0] / a2
    # spacing terms
    J[3, 1] = 2.0 * d_xy @ du[1] / a2
    J[3, 2] = -2.0 * d_xy @ du[2] / a2
    J[4, 2] = 2.0 * d_yz @ du[2] / a2
    J[4, 3] = -2.0 * d_yz @ du[3] / a2
    J[5, 1] = 2.0 * d_xz @ du[1] / a2
    J[5, 3] = -2.0 * d_xz @ du[3] / a2
    # orthogonality
    J[6, 0] = (-du[0] @ uy - ux @ du[0]) / a2
    J[6, 1] = du[1] @ uy / a2
    J[6, 2] = ux @ du[2] / a2
    J[7, 0] = (-du[0] @ uz - uy @ du[0]) / a2
    J[7, 2] = du[2] @ uz / a2
    J[7, 3] = uy @ du[3] / a2
    J[8, 0] = (-du[0] @ uz - ux @ du[0]) / a2
    J[8, 1] = du[1] @ uz / a2
    J[8, 3] = ux @ du[3] / a2
    # handedness: cross(ux, uy) - arm * uz
    J[9:12, 0] = (np.cross(-du[0], uy) + np.cross(ux, -du[0]) + arm * du[0]) / a2
    J[9:12, 1] = np.cross(du[1], uy) / a2
    J[9:12, 2] = np.cross(ux, du[2]) / a2
    J[9:12, 3] = -arm * du[3] / a2
    return r, J


def _general_residuals(X, dirs, model):
    """Pairwise squared distances plus a scaled handedness constraint."""
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    scale2 = float(np.mean([np.sum((model[i] - model[j]) ** 2) for i, j in pairs]))
    r = np.empty(7)
    J = np.zeros((7, 4))
    for k, (i, j) in enumerate(pairs):
        d = X[i] - X[j]
        target = np.sum((model[i] - model[j]) ** 2)
        r[k] = (d @ d - target) / scale2
        J[k, i] = 2.0 * d @ dirs[i] / scale2
        J[k, j] = -2.0 * d @ dirs[j] / scale2
    rel = X[1:] - X[0]
    det = np.linalg.det(rel)
    det_model = np.linalg.det(model[1:] - model[0])
    scale3 = scale2 ** 1.5
    r[6] = (det - det_model) / scale3
    # derivative of det wrt each depth via cofactor expansion
    c0 = np.cross(rel[1], rel[2])
    c1 = np.cross(rel[2], rel[0])
    c2 = np.cross(rel[0], rel[1])
    J[6, 1] = c0 @ dirs[1] / scale3
    J[6, 2] = c1 @ dirs[2] / scale3
    J[6, 3] = c2 @ dirs[3] / scale3
    J[6, 0] = -(c0 + c1 + c2) @ dirs[0] / scale3
    return r, J


def estimate_initial_pose(fid: FiducialModel, P, geom=None, *,
                          tol=1e-12, max_iter=200):
    """Recover the sensor world pose from one projection's tracked points.

    Each sought point lies on the ray from the source through its
    tracked pixel; the four ray depths are solved by damped Gauss-Newton
    so the points satisfy the rigid fiducial constraints.  The absolute
    scale comes from the known fiducial size, which also separates poses
    shifted along the principal ray.
    """
    M = P[:, :3]
    source = -np.linalg.solve(M, P[:, 3])
    hom = np.column_stack([fid.tracked_uv, np.ones(4)])
    dirs = np.linalg.solve(M, hom.T).T
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]

    # rays are coplanar (solver degenerate) iff the directions span <= 2D;
    # coincident pixels alone are fine, the depths still separate the points
    svals = np.linalg.svd(dirs, compute_uv=False)
    if svals[-1] < 1e-12 * svals[0]:
        raise ConditioningError("projected rays are coplanar (collinear pixels)")

    sid = geom.sid_m if geom is not None else float(np.linalg.norm(source))
    lam = np.full(4, sid)

    def eval_at(lam):
        X = source[None, :] + lam[:, None] * dirs
        if fid.canonical:
            return _canonical_residuals(X, dirs, fid.arm_m)
        return _general_residuals(X, dirs, fid.model_points)

    r, J = eval_at(lam)
    cost = r @ r
    mu = 1e-3
    for _ in range(max_iter):
        if np.sqrt(cost) < tol:
            break
        JtJ = J.T @ J
        gvec = J.T @ r
        try:
            step = np.linalg.solve(JtJ + mu * np.diag(np.diag(JtJ) + 1e-30), -gvec)
        except np.linalg.LinAlgError:
            raise ConditioningError("normal equations singular") from None
        new_lam = lam + step
        r_new, J_new = eval_at(new_lam)
        new_cost = r_new @ r_new
        if new_cost < cost:
            lam, r, J, cost = new_lam, r_new, J_new, new_cost
            mu = max(mu * 0.3, 1e-12)
        else:
            mu *= 10.0
            if mu > 1e12:
                break
    if np.sqrt(cost) > 1e-8:
        raise InitializationError(
            f"pose solver did not converge (residual {np.sqrt(cost):.3g})")

    X = source[None, :] + lam[:, None] * dirs
    # orthonormal frame via Procrustes against the model geometry
    model = fid.model_points
    mc = model.mean(axis=0)
    Xc = X.mean(axis=0)
    H = (model - mc).T @ (X - Xc)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[-1] = -Vt[-1]
        R = Vt.T @ U.T
    t = Xc - R @ mc
    return make_affine(R, t)


def estimate_initial_velocity(s0, s_n_observed, series: ImuSeries,
                              sync: SyncMap, g=GRAVITY):
    """Initial sensor-frame velocity from the first two projections.

    Integrates the series gap with zero initial velocity; the translation
    discrepancy against the observed pose at sample n grows as n * e * dt,
    giving the velocity error e directly.
    """
    n = sync.n
    if n < 1:
        raise CoverageError("projections map to the same IMU sample (n < 1)")
    if len(series) <= n:
        raise CoverageError(f"series of {len(series)} samples, need > {n}")
    track = integrate_poses(series, s0, np.zeros(3), g=g, n_steps=n)
    s0_inv = affine_inverse(np.asarray(s0, float))
    t_prime = (s0_inv @ track.poses[n])[:3, 3]
    t_obs = (s0_inv @ np.asarray(s_n_observed, float))[:3, 3]
    return -(t_prime - t_obs) / (n * series.dt)


# ---------------------------------------------------------------------------
# export


def quaternion_from_matrix(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def save_pose_track_csv(track: PoseTrack, path):
    lines = ["t,x,y,z,qw,qx,qy,qz"]
    dt = 1.0 / track.rate_hz
    for i, T in enumerate(track.poses):
        q = quaternion_from_matrix(T[:3, :3])
        vals = [i * dt, *T[:3, 3], *q]
        lines.append(",".join(repr(float(v)) for v in vals))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
