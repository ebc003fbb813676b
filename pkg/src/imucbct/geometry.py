"""C-arm scan geometry: circular trajectories, projection matrices, pixel rays.

World frame is right-handed with the vertical axis along +y; the gantry
rotates about the vertical axis through the rotation center.  Scan
parameters are configured in millimeters and degrees, converted once to
SI meters/radians when the projection matrices are built.  Detector
coordinates stay in pixels, with the principal point at the geometric
detector center ((cols-1)/2, (rows-1)/2).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DegenerateProjectionError

MM_PER_M = 1000.0

# Detector u axis is tangential to the gantry circle, v is axial (world +y).


def skew(w):
    """Cross-product matrix [w]x such that skew(w) @ v == cross(w, v)."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def unskew(W):
    """Inverse of :func:`skew`, using the antisymmetric part of W."""
    A = 0.5 * (W - W.T)
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


def rodrigues(w):
    """Rotation matrix exp([w]x) for a rotation vector w (radians).

    Falls back to the first-order series below 1e-12 rad where the
    closed form loses precision.
    """
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    K = K / theta
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def make_affine(R=None, t=None):
    """Assemble a 4x4 affine matrix from a rotation block and translation."""
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def affine_inverse(T):
    """Inverse of a rigid 4x4 transform (rotation block must be orthonormal)."""
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def apply_affine(T, pts):
    """Apply a 4x4 affine transform to points of shape (3,) or (N, 3)."""
    pts = np.asarray(pts, dtype=float)
    return pts @ T[:3, :3].T + T[:3, 3]


def polar_orthonormalize(R):
    """Closest rotation matrix to R in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def is_rotation(R, tol=1e-9):
    return (np.max(np.abs(R.T @ R - np.eye(3))) < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


def euler_xyz_from_matrix(R):
    """Decompose R = Rz(c) @ Ry(b) @ Rx(a) into angles (a, b, c) in radians.

    Near the gimbal singularity (|b| ~ 90 deg) the split between a and c
    is not unique; a is pinned to zero there.
    """
    sy = -R[2, 0]
    sy = float(np.clip(sy, -1.0, 1.0))
    b = np.arcsin(sy)
    if abs(abs(sy) - 1.0) < 1e-12:
        # gimbal lock: only a +/- c is observable
        a = 0.0
        c = np.arctan2(-R[0, 1], R[1, 1])
    else:
        a = np.arctan2(R[2, 1], R[2, 2])
        c = np.arctan2(R[1, 0], R[0, 0])
    return np.array([a, b, c])


def matrix_from_euler_xyz(angles):
    a, b, c = angles
    return rotation_z(c) @ rotation_y(b) @ rotation_x(a)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class ScanConfig:
    """Circular scan parameters in configuration units (mm, degrees)."""

    n_proj: int
    angular_increment_deg: float
    sdd_mm: float
    sid_mm: float
    det_cols: int
    det_rows: int
    pixel_mm: float
    rotation_center_mm: tuple = (0.0, 0.0, 0.0)
    frame_rate_hz: float = 31.0

    def __post_init__(self):
        if self.n_proj <= 0 or self.det_cols <= 0 or self.det_rows <= 0:
            raise ConfigurationError("projection and detector counts must be positive")
        if self.pixel_mm <= 0 or self.angular_increment_deg <= 0 or self.frame_rate_hz <= 0:
            raise ConfigurationError("pixel pitch, increment and frame rate must be positive")
        if not (self.sdd_mm > self.sid_mm > 0):
            raise ConfigurationError("need sdd > sid > 0")


PROFILES = {
    # full-resolution profile: 248 views x 0.8 deg, 620x480 @ 0.616 mm
    "paper": ScanConfig(n_proj=248, angular_increment_deg=0.8, sdd_mm=1198.0,
                        sid_mm=780.0, det_cols=620, det_rows=480,
                        pixel_mm=0.616, frame_rate_hz=31.0),
    # half-resolution profile covering the same arc in the same scan time,
    # so the complete pipeline runs in minutes on a CPU
    "desk": ScanConfig(n_proj=124, angular_increment_deg=1.6, sdd_mm=1198.0,
                       sid_mm=780.0, det_cols=310, det_rows=240,
                       pixel_mm=1.232, frame_rate_hz=15.5),
}


def scan_profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown scan profile {name!r}") from None


@dataclass
class ScanGeometry:
    """Scan description plus one 3x4 projection matrix per view.

    Matrices map homogeneous world coordinates in meters to homogeneous
    detector pixel coordinates; the homogeneous scale of a projected
    point equals its depth along the principal ray in meters.
    """

    n_proj: int
    angular_increment_deg: float
    sdd_mm: float
    sid_mm: float
    det_cols: int
    det_rows: int
    pixel_mm: float
    rotation_center_mm: np.ndarray
    frame_rate_hz: float
    matrices: np.ndarray  # (n_proj, 3, 4)

    def __post_init__(self):
        self.rotation_center_mm = np.asarray(self.rotation_center_mm, dtype=float)
        self.matrices = np.asarray(self.matrices, dtype=float)
        if self.matrices.shape != (self.n_proj, 3, 4):
            raise ConfigurationError(
                f"expected {self.n_proj} projection matrices, got {self.matrices.shape}")
        if not np.all(np.isfinite(self.matrices)):
            raise ConfigurationError("projection matrices contain non-finite entries")

    @property
    def sdd_m(self):
        return self.sdd_mm / MM_PER_M

    @property
    def sid_m(self):
        return self.sid_mm / MM_PER_M

    @property
    def pixel_m(self):
        return self.pixel_mm / MM_PER_M

    @property
    def rotation_center_m(self):
        return self.rotation_center_mm / MM_PER_M

    @property
    def total_arc_deg(self):
        return self.n_proj * self.angular_increment_deg

    @property
    def fan_angle_rad(self):
        """Full in-plane beam divergence covered by the detector."""
        half_width = 0.5 * self.det_cols * self.pixel_m
        return 2.0 * np.arctan2(half_width, self.sdd_m)

    def source_position(self, i):
        """World position (m) of the X-ray source for view i."""
        P = self.matrices[i]
        return -np.linalg.solve(P[:, :3], P[:, 3])

    def with_matrices(self, matrices):
        return replace(self, matrices=np.asarray(matrices, dtype=float))


def build_circular_trajectory(cfg: ScanConfig) -> ScanGeometry:
    """Build projection matrices for a circular horizontal trajectory.

    View i sits at gantry angle i * angular_increment; the source moves
    on a circle of radius sid around the rotation center and the
    principal ray hits the detector center.
    """
    sid = cfg.sid_mm / MM_PER_M
    sdd = cfg.sdd_mm / MM_PER_M
    pix = cfg.pixel_mm / MM_PER_M
    center = np.asarray(cfg.rotation_center_mm, dtype=float) / MM_PER_M

    cu = (cfg.det_cols - 1) / 2.0
    cv = (cfg.det_rows - 1) / 2.0
    K = np.array([[sdd / pix, 0.0, cu],
                  [0.0, sdd / pix, cv],
                  [0.0, 0.0, 1.0]])

    matrices = np.empty((cfg.n_proj, 3, 4))
    for i in range(cfg.n_proj):
        theta = np.deg2rad(i * cfg.angular_increment_deg)
        source = center + sid * np.array([np.cos(theta), 0.0, np.sin(theta)])
        u_axis = np.array([-np.sin(theta), 0.0, np.cos(theta)])
        v_axis = np.array([0.0, 1.0, 0.0])
        w_axis = (center - source) / sid
        R_cam = np.vstack([u_axis, v_axis, w_axis])
        Rt = np.hstack([R_cam, (-R_cam @ source)[:, None]])
        matrices[i] = K @ Rt

    return ScanGeometry(
        n_proj=cfg.n_proj,
        angular_increment_deg=cfg.angular_increment_deg,
        sdd_mm=cfg.sdd_mm,
        sid_mm=cfg.sid_mm,
        det_cols=cfg.det_cols,
        det_rows=cfg.det_rows,
        pixel_mm=cfg.pixel_mm,
        rotation_center_mm=np.asarray(cfg.rotation_center_mm, dtype=float),
        frame_rate_hz=cfg.frame_rate_hz,
        matrices=matrices,
    )


def project_point(P, x):
    """Project world point(s) x (meters) with a 3x4 matrix to pixel (u, v).

    Accepts a single (3,) point or an (N, 3) batch.  Raises
    DegenerateProjectionError when the homogeneous scale is within
    1e-12 of zero.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    hom = pts @ P[:, :3].T + P[:, 3]
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateProjectionError("point lies in the camera's principal plane")
    uv = hom[:, :2] / w[:, None]
    return (uv[0, 0], uv[0, 1]) if single else uv


def pixel_ray(geom: ScanGeometry, i, u, v):
    """Ray through detector pixel (u, v) of view i.

    Returns (origin, direction): the source position and a unit vector
    pointing from the source toward the pixel's 3D location.
    """
    if not 0 <= i < geom.n_proj:
        raise IndexError(f"view index {i} out of range [0, {geom.n_proj})")
    P = geom.matrices[i]
    M = P[:, :3]
    origin = -np.linalg.solve(M, P[:, 3])
    # M^-1 @ (u, v, 1) points toward positive homogeneous depth
    direction = np.linalg.solve(M, np.array([u, v, 1.0]))
    return origin, direction / np.linalg.norm(direction)


def pixel_rays(geom: ScanGeometry, i, uv):
    """Vectorized :func:`pixel_ray` for an (N, 2) pixel array."""
    if not 0 <= i < geom.n_proj:
        raise IndexError(f"view index {i} out of range [0, {geom.n_proj})")
    P = geom.matrices[i]
    M = P[:, :3]
    origin = -np.linalg.solve(M, P[:, 3])
    hom = np.column_stack([uv, np.ones(len(uv))])
    dirs = np.linalg.solve(M, hom.T).T
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    return origin, dirs


def decompose_projection(P, pixel_m):
    """Recover source position and intrinsics from a projection matrix.

    Returns a dict with the source (m), the orthonormal camera rotation,
    the normalized intrinsic matrix and the implied source-detector
    distance in meters.
    """
    M = P[:, :3]
    source = -np.linalg.solve(M, P[:, 3])
    K, R = scipy.linalg.rq(M)
    # fix RQ sign ambiguity: positive diagonal, unit lower-right entry
    signs = np.sign(np.diag(K))
    signs[signs == 0] = 1.0
    K = K * signs[None, :]
    R = R * signs[:, None]
    K = K / K[2, 2]
    return {
        "source_m": source,
        "rotation": R,
        "intrinsics": K,
        "sdd_m": K[0, 0] * pixel_m,
    }


def save_geometry(geom: ScanGeometry, path):
    doc = {
        "n_proj": geom.n_proj,
        "angular_increment_deg": geom.angular_increment_deg,
        "sdd_mm": geom.sdd_mm,
        "sid_mm": geom.sid_mm,
        "det_cols": geom.det_cols,
        "det_rows": geom.det_rows,
        "pixel_mm": geom.pixel_mm,
        "rotation_center_mm": list(geom.rotation_center_mm),
        "frame_rate_hz": geom.frame_rate_hz,
        "matrices": [m.reshape(12).tolist() for m in geom.matrices],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def load_geometry(path) -> ScanGeometry:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        matrices = np.array(doc["matrices"], dtype=float).reshape(-1, 3, 4)
        return ScanGeometry(
            n_proj=int(doc["n_proj"]),
            angular_increment_deg=float(doc["angular_increment_deg"]),
            sdd_mm=float(doc["sdd_mm"]),
            sid_mm=float(doc["sid_mm"]),
            det_cols=int(doc["det_cols"]),
            det_rows=int(doc["det_rows"]),
            pixel_mm=float(doc["pixel_mm"]),
            rotation_center_mm=np.array(doc["rotation_center_mm"], dtype=float),
            frame_rate_hz=float(doc["frame_rate_hz"]),
            matrices=matrices,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"bad geometry document {path}: {exc}") from exc
