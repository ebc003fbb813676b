"""Analytic two-segment leg phantom: joint tracks, kinematics, rendering.

The leg is modeled as two rigid segments (thigh, shank) articulated at
the knee.  Each segment carries nested attenuating primitives (soft
tissue, bone, marrow) defined in the segment frame; line integrals
through the phantom are computed analytically from ray-quadric
intersections.  Attenuation values are synthetic, not clinical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigurationError, CoverageError,
                     DegenerateKinematicsError, FormatError)
from .volume import Volume, VolumeSpec

_BIG = 1e30


# ---------------------------------------------------------------------------
# joint trajectories


@dataclass
class JointTracks:
    """Hip/knee/ankle world trajectories (meters) sampled at a fixed rate."""

    rate_hz: float
    hip: np.ndarray
    knee: np.ndarray
    ankle: np.ndarray

    def __post_init__(self):
        self.hip = np.asarray(self.hip, dtype=float)
        self.knee = np.asarray(self.knee, dtype=float)
        self.ankle = np.asarray(self.ankle, dtype=float)
        shapes = {self.hip.shape, self.knee.shape, self.ankle.shape}
        if len(shapes) != 1 or self.hip.ndim != 2 or self.hip.shape[1] != 3:
            raise ValueError(f"joint arrays must share shape (N, 3), got {shapes}")
        if len(self.hip) < 2:
            raise ValueError("need at least 2 frames")
        if not (np.all(np.isfinite(self.hip)) and np.all(np.isfinite(self.knee))
                and np.all(np.isfinite(self.ankle))):
            raise ValueError("joint tracks contain non-finite values")
        for name, a, b in (("thigh", self.hip, self.knee),
                           ("shank", self.knee, self.ankle)):
            lengths = np.linalg.norm(a - b, axis=1)
            if np.max(np.abs(lengths - lengths[0])) > 1e-9:
                frame = int(np.argmax(np.abs(lengths - lengths[0])))
                raise ValueError(
                    f"{name} length varies by {np.max(np.abs(lengths - lengths[0])):.3g} m "
                    f"(first offender at frame {frame}); segments must be rigid")

    def __len__(self):
        return len(self.hip)

    @property
    def times(self):
        return np.arange(len(self)) / self.rate_hz

    @property
    def thigh_length_m(self):
        return float(np.linalg.norm(self.hip[0] - self.knee[0]))

    @property
    def shank_length_m(self):
        return float(np.linalg.norm(self.knee[0] - self.ankle[0]))


def synthesize_sway_tracks(duration_s, rate_hz, squat_angle_deg,
                           sway_amplitudes, sway_freqs, seed,
                           *, thigh_length_m=0.35, shank_length_m=0.35,
                           thigh_share=0.6, flex_mod_deg=0.0,
                           flex_mod_hz=0.3, flex_drift_deg=0.0) -> JointTracks:
    """Generate smooth squat-and-sway joint trajectories.

    The pelvis (hip) translates by one sinusoid per world axis with
    seed-dependent phases; knee flexion is the squat angle plus optional
    sinusoidal modulation and a slow linear drift, split between thigh
    and shank tilt by ``thigh_share``.  All offsets are zero at t = 0,
    so the initial pose is independent of the seed, and segment lengths
    are constant by construction.

    Parameters
    ----------
    duration_s, rate_hz : float
        Track length and sampling rate (samples at i / rate_hz).
    squat_angle_deg : float
        Held knee flexion angle.
    sway_amplitudes : (3,) array, meters
        Per-axis pelvis sway amplitude.
    sway_freqs : (3,) array, Hz
        Per-axis sway frequency.
    seed : int
        Fixes the sway and modulation phases.
    """
    if duration_s <= 0 or rate_hz <= 0:
        raise ConfigurationError("duration and rate must be positive")
    amp = np.asarray(sway_amplitudes, dtype=float)
    freq = np.asarray(sway_freqs, dtype=float)
    if amp.shape != (3,) or freq.shape != (3,):
        raise ConfigurationError("sway amplitudes and freqs must be 3-vectors")
    if np.any(amp < 0) or np.any(freq < 0):
        raise ConfigurationError("sway amplitudes and freqs must be non-negative")

    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, 3)
    flex_phase = rng.uniform(0.0, 2.0 * np.pi)

    n = int(round(duration_s * rate_hz))
    if n < 2:
        raise ConfigurationError("duration too short for the sampling rate")
    t = np.arange(n) / rate_hz

    sway = amp[None, :] * (np.sin(2.0 * np.pi * freq[None, :] * t[:, None] + phases)
                           - np.sin(phases))
    flex = np.deg2rad(squat_angle_deg
                      + flex_mod_deg * (np.sin(2.0 * np.pi * flex_mod_hz * t + flex_phase)
                                        - np.sin(flex_phase))
                      + flex_drift_deg * (t / duration_s))

    tilt_t = thigh_share * flex
    tilt_s = (1.0 - thigh_share) * flex
    d_thigh = np.column_stack([np.sin(tilt_t), -np.cos(tilt_t), np.zeros(n)])
    d_shank = np.column_stack([-np.sin(tilt_s), -np.cos(tilt_s), np.zeros(n)])

    hip0 = -thigh_length_m * d_thigh[0]  # puts the knee at the world origin at t = 0
    hip = hip0[None, :] + sway
    knee = hip + thigh_length_m * d_thigh
    ankle = knee + shank_length_m * d_shank
    return JointTracks(rate_hz=rate_hz, hip=hip, knee=knee, ankle=ankle)


_CSV_HEADER = "t,hip_x,hip_y,hip_z,knee_x,knee_y,knee_z,ankle_x,ankle_y,ankle_z"


def save_tracks_csv(tracks: JointTracks, path, units="m"):
    if units not in ("m", "mm"):
        raise ConfigurationError("units must be 'm' or 'mm'")
    scale = 1.0 if units == "m" else 1000.0
    lines = [f"# units: {units}", _CSV_HEADER]
    for i, t in enumerate(tracks.times):
        row = np.concatenate([tracks.hip[i], tracks.knee[i], tracks.ankle[i]]) * scale
        lines.append(f"{float(t)!r}," + ",".join(repr(float(v)) for v in row))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_tracks_csv(path) -> JointTracks:
    """Load a joint-track CSV, converting mm to meters when declared."""
    scale = 1.0
    times, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                decl = line.lstrip("#").strip().lower()
                if decl.startswith("units:"):
                    unit = decl.split(":", 1)[1].strip()
                    if unit == "mm":
                        scale = 1e-3
                    elif unit != "m":
                        raise FormatError(f"unknown units {unit!r}", row=lineno)
                continue
            if line.lower().startswith("t,"):
                continue
            cells = line.split(",")
            if len(cells) != 10:
                raise FormatError(f"expected 10 columns, got {len(cells)}", row=lineno)
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise FormatError(f"non-numeric cell in {line!r}", row=lineno) from None
            times.append(vals[0])
            rows.append(vals[1:])
    if len(rows) < 2:
        raise FormatError(f"need at least 2 frames, got {len(rows)}")
    data = np.asarray(rows) * scale
    dt = np.diff(times)
    if np.max(np.abs(dt - dt[0])) > 1e-9 or dt[0] <= 0:
        raise FormatError("time column is not uniformly increasing")
    try:
        return JointTracks(rate_hz=1.0 / dt[0], hip=data[:, 0:3],
                           knee=data[:, 3:6], ankle=data[:, 6:9])
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# forward kinematics


@dataclass
class SegmentKinematics:
    """Per-frame segment frame and its first/second time derivatives.

    The frame origin sits at the proximal joint, local y points from the
    distal to the proximal joint, and roll is fixed by projecting the
    world x axis out of the segment axis.
    """

    rate_hz: float
    R: np.ndarray     # (N, 3, 3)
    r: np.ndarray     # (N, 3)
    Rd: np.ndarray
    Rdd: np.ndarray
    rd: np.ndarray
    rdd: np.ndarray

    def __len__(self):
        return len(self.r)

    def pose(self, t):
        T = np.eye(4)
        T[:3, :3] = self.R[t]
        T[:3, 3] = self.r[t]
        return T


def _d1(arr, dt):
    out = np.empty_like(arr)
    out[1:-1] = (arr[2:] - arr[:-2]) / (2.0 * dt)
    if len(arr) >= 3:
        # second-order one-sided, arranged as differences so a constant
        # input yields exactly zero
        out[0] = (4.0 * (arr[1] - arr[0]) - (arr[2] - arr[0])) / (2.0 * dt)
        out[-1] = (4.0 * (arr[-1] - arr[-2]) - (arr[-1] - arr[-3])) / (2.0 * dt)
    else:
        out[0] = out[-1] = (arr[-1] - arr[0]) / dt
    return out


def _d2(arr, dt):
    out = np.empty_like(arr)
    out[1:-1] = (arr[2:] - 2.0 * arr[1:-1] + arr[:-2]) / (dt * dt)
    if len(arr) >= 3:
        out[0] = out[1]
        out[-1] = out[-2]
    else:
        out[:] = 0.0
    return out


def _segment_frames(proximal, distal):
    axis = proximal - distal
    lengths = np.linalg.norm(axis, axis=1)
    if np.any(lengths < 1e-9):
        raise DegenerateKinematicsError("zero-length segment")
    ey = axis / lengths[:, None]
    xhat = np.array([1.0, 0.0, 0.0])
    ex = xhat[None, :] - (ey @ xhat)[:, None] * ey
    norms = np.linalg.norm(ex, axis=1)
    if np.any(norms < 1e-9):
        raise DegenerateKinematicsError("segment axis parallel to the world x axis")
    ex = ex / norms[:, None]
    ez = np.cross(ex, ey)
    return np.stack([ex, ey, ez], axis=2)  # columns are the frame axes


def forward_kinematics(tracks: JointTracks):
    """Segment kinematics (thigh, shank) with finite-difference derivatives.

    Derivatives are central differences at the native rate, one-sided at
    the series ends.
    """
    dt = 1.0 / tracks.rate_hz
    out = []
    for proximal, distal in ((tracks.hip, tracks.knee), (tracks.knee, tracks.ankle)):
        R = _segment_frames(proximal, distal)
        r = proximal.copy()
        out.append(SegmentKinematics(
            rate_hz=tracks.rate_hz, R=R, r=r,
            Rd=_d1(R, dt), Rdd=_d2(R, dt), rd=_d1(r, dt), rdd=_d2(r, dt)))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# phantom solids


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    semi_axes: tuple


@dataclass(frozen=True)
class CappedCylinder:
    center: tuple
    axis: tuple       # unit vector in the segment frame
    radius: float
    half_length: float


@dataclass(frozen=True)
class SegmentSolid:
    """One attenuating primitive; ``parent`` indexes the enclosing solid
    in the same segment list (None for the outermost)."""

    shape: object
    mu: float         # attenuation, 1/m
    parent: int = None


@dataclass(frozen=True)
class LegPhantom:
    thigh: tuple
    shank: tuple

    def __post_init__(self):
        for name, solids in (("thigh", self.thigh), ("shank", self.shank)):
            for i, solid in enumerate(solids):
                if solid.mu < 0:
                    raise ConfigurationError(f"{name} solid {i} has negative attenuation")
                if solid.parent is not None and not 0 <= solid.parent < i:
                    raise ConfigurationError(
                        f"{name} solid {i}: parent must precede it in the list")


def _cyl_y(y_lo, y_hi, radius, x=0.0, z=0.0):
    return CappedCylinder(center=(x, (y_lo + y_hi) / 2.0, z), axis=(0.0, 1.0, 0.0),
                          radius=radius, half_length=(y_hi - y_lo) / 2.0)


def default_leg_phantom(thigh_length_m=0.35, shank_length_m=0.35,
                        mu_soft=20.0, mu_bone=50.0, mu_marrow=10.0) -> LegPhantom:
    """Two-segment leg with nested soft tissue, bone and marrow.

    Segment frames: origin at the proximal joint, y up the segment, so
    the thigh spans y in [-thigh_length, 0] and the shank y in
    [-shank_length, 0].  Attenuations default to 0.02/0.05/0.01 per mm
    for soft tissue/bone/marrow (synthetic values).
    """
    lt, ls = thigh_length_m, shank_length_m
    thigh = (
        SegmentSolid(_cyl_y(-lt, -0.004, 0.045), mu_soft),
        SegmentSolid(_cyl_y(-lt + 0.015, -0.012, 0.014), mu_bone, parent=0),
        SegmentSolid(_cyl_y(-lt + 0.025, -0.022, 0.007), mu_marrow, parent=1),
        SegmentSolid(Ellipsoid(center=(0.028, -lt + 0.030, 0.0),
                               semi_axes=(0.012, 0.018, 0.012)),
                     0.9 * mu_bone, parent=0),
    )
    shank = (
        SegmentSolid(_cyl_y(-ls + 0.004, -0.003, 0.040), mu_soft),
        SegmentSolid(_cyl_y(-ls + 0.014, -0.012, 0.012, x=0.010), mu_bone, parent=0),
        SegmentSolid(_cyl_y(-ls + 0.024, -0.022, 0.006, x=0.010), mu_marrow, parent=1),
        SegmentSolid(_cyl_y(-ls + 0.020, -0.030, 0.005, x=-0.016, z=0.014),
                     mu_bone, parent=0),
    )
    return LegPhantom(thigh=thigh, shank=shank)


# ---------------------------------------------------------------------------
# analytic rendering


def _lincomb(coeffs, comps):
    """Scalar-weighted sum of (N,) component arrays, skipping zero weights."""
    out = None
    for c, arr in zip(coeffs, comps):
        if c == 0.0:
            continue
        term = c * arr
        out = term if out is None else out + term
    return out if out is not None else np.zeros_like(comps[0])


def _ellipsoid_chords(origin, dirs, shape: Ellipsoid):
    # origin is a single point shared by all rays (the X-ray source);
    # dirs is a tuple of three contiguous (N,) component arrays
    semi = np.asarray(shape.semi_axes)
    q = (origin - np.asarray(shape.center)) / semi
    a = None
    for k in range(3):
        term = (dirs[k] / semi[k]) ** 2
        a = term if a is None else a + term
    b = 2.0 * _lincomb(q / semi, dirs)
    c0 = float(q @ q) - 1.0
    disc = b * b - (4.0 * c0) * a
    return np.sqrt(np.maximum(disc, 0.0)) / a


def _cylinder_intervals(origin, dirs, shape: CappedCylinder):
    axis = np.asarray(shape.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    rel = origin - np.asarray(shape.center)
    ax0 = float(rel @ axis)
    axd = _lincomb(axis, dirs)
    p0 = rel - ax0 * axis
    a = None
    b = None
    for k in range(3):
        pdk = dirs[k] - axis[k] * axd if axis[k] != 0.0 else dirs[k]
        sq = pdk * pdk
        a = sq if a is None else a + sq
        if p0[k] != 0.0:
            term = p0[k] * pdk
            b = term if b is None else b + term
    b = 2.0 * b if b is not None else np.zeros_like(a)
    c0 = float(p0 @ p0) - shape.radius ** 2

    # radial interval (keep the degenerate axis-parallel branch correct)
    hit = a > 1e-18
    safe_a = np.where(hit, a, 1.0)
    disc = b * b - (4.0 * c0) * a
    sq = np.sqrt(np.maximum(disc, 0.0))
    inv = 0.5 / safe_a
    parallel_inside = -_BIG if c0 < 0 else _BIG
    r_lo = np.where(hit, (-b - sq) * inv, parallel_inside)
    r_hi = np.where(hit, (-b + sq) * inv, -parallel_inside)
    miss = hit & (disc <= 0)
    if miss.any():
        r_lo[miss] = _BIG
        r_hi[miss] = -_BIG

    # axial slab
    along = np.abs(axd) > 1e-15
    inv_axd = 1.0 / np.where(along, axd, 1.0)
    t1 = (-shape.half_length - ax0) * inv_axd
    t2 = (shape.half_length - ax0) * inv_axd
    a_lo = np.minimum(t1, t2)
    a_hi = np.maximum(t1, t2)
    if not along.all():
        slab_inside = -_BIG if abs(ax0) <= shape.half_length else _BIG
        a_lo[~along] = slab_inside
        a_hi[~along] = -slab_inside

    return np.maximum(r_lo, a_lo), np.minimum(r_hi, a_hi)


def _solid_chords(origin, dirs, shape):
    if isinstance(shape, Ellipsoid):
        return _ellipsoid_chords(origin, dirs, shape)
    if isinstance(shape, CappedCylinder):
        lo, hi = _cylinder_intervals(origin, dirs, shape)
        return np.maximum(hi - lo, 0.0)
    raise ConfigurationError(f"unknown solid shape {type(shape).__name__}")


def _point_inside(points, shape):
    if isinstance(shape, Ellipsoid):
        q = (points - np.asarray(shape.center)) / np.asarray(shape.semi_axes)
        return np.einsum("ij,ij->i", q, q) <= 1.0
    if isinstance(shape, CappedCylinder):
        c = np.asarray(shape.center)
        axis = np.asarray(shape.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        rel = points - c
        ax = rel @ axis
        perp = rel - ax[:, None] * axis
        return ((np.abs(ax) <= shape.half_length)
                & (np.einsum("ij,ij->i", perp, perp) <= shape.radius ** 2))
    raise ConfigurationError(f"unknown solid shape {type(shape).__name__}")


def _detector_ray_components(P, cols, rows):
    """Source position plus unit ray directions for the full pixel grid.

    Directions are returned as three contiguous (rows*cols,) component
    arrays (u varies fastest), a layout that keeps the per-solid chord
    math on flat arrays.
    """
    M = P[:, :3]
    origin = -np.linalg.solve(M, P[:, 3])
    uu, vv = np.meshgrid(np.arange(cols, dtype=float), np.arange(rows, dtype=float))
    hom = np.empty((3, cols * rows))
    hom[0] = uu.ravel()
    hom[1] = vv.ravel()
    hom[2] = 1.0
    d = np.linalg.solve(M, hom)
    inv_norm = 1.0 / np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    return origin, tuple(np.ascontiguousarray(d[k] * inv_norm) for k in range(3))


def _segment_line_integrals(solids, origin, dirs):
    total = np.zeros(len(dirs[0]))
    for solid in solids:
        mu_delta = solid.mu - (solids[solid.parent].mu if solid.parent is not None else 0.0)
        if mu_delta == 0.0:
            continue
        total += mu_delta * _solid_chords(origin, dirs, solid.shape)
    return total


def render_projection(phantom: LegPhantom, thigh_pose, shank_pose, P, geom):
    """Analytic line integrals of the posed phantom for one view.

    Returns an image of shape (det_rows, det_cols); pixel (v, u) holds
    the integral of attenuation along the ray through detector pixel
    (u, v).  Nested primitives override their parent attenuation along
    the shared chord.
    """
    cols, rows = geom.det_cols, geom.det_rows
    origin, dirs = _detector_ray_components(P, cols, rows)

    img = np.zeros(rows * cols)
    for solids, pose in ((phantom.thigh, thigh_pose), (phantom.shank, shank_pose)):
        R = pose[:3, :3]
        o_local = R.T @ (origin - pose[:3, 3])
        d_local = tuple(_lincomb(R[:, j], dirs) for j in range(3))
        img += _segment_line_integrals(solids, o_local, d_local)
    return img.reshape(rows, cols)


def render_stack(phantom: LegPhantom, thigh_poses, shank_poses, geom):
    """Render one projection per view; poses are (n_proj, 4, 4) arrays."""
    if len(thigh_poses) != geom.n_proj or len(shank_poses) != geom.n_proj:
        raise CoverageError(
            f"need {geom.n_proj} poses, got {len(thigh_poses)}/{len(shank_poses)}")
    stack = np.empty((geom.n_proj, geom.det_rows, geom.det_cols))
    for i in range(geom.n_proj):
        stack[i] = render_projection(phantom, thigh_poses[i], shank_poses[i],
                                     geom.matrices[i], geom)
    return stack


def voxelize(phantom: LegPhantom, poses, spec: VolumeSpec) -> Volume:
    """Rasterize the posed phantom by voxel-center membership tests.

    ``poses`` is the (thigh_pose, shank_pose) pair.  Within a segment
    the innermost containing primitive wins; where segments overlap the
    shank (listed second) wins.
    """
    thigh_pose, shank_pose = poses
    pts = spec.voxel_centers_m()
    values = np.zeros(len(pts))
    for solids, pose in ((phantom.thigh, thigh_pose), (phantom.shank, shank_pose)):
        Rt = pose[:3, :3].T
        local = (pts - pose[:3, 3]) @ Rt.T
        for solid in solids:
            inside = _point_inside(local, solid.shape)
            values[inside] = solid.mu
    return Volume(spec=spec, data=values.reshape(spec.dims))


# ---------------------------------------------------------------------------
# projection stack I/O


def save_stack(stack, geom, raw_path, sidecar_path=None):
    """Raw little-endian float32, row-major within a view, view-major."""
    raw_path = str(raw_path)
    if sidecar_path is None:
        sidecar_path = raw_path.rsplit(".", 1)[0] + ".json"
    tmp = raw_path + ".tmp"
    np.ascontiguousarray(stack).astype("<f4").tofile(tmp)
    os.replace(tmp, raw_path)
    doc = {"views": int(stack.shape[0]), "rows": int(stack.shape[1]),
           "cols": int(stack.shape[2]), "pixel_mm": geom.pixel_mm}
    tmp = str(sidecar_path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, sidecar_path)


def load_stack(raw_path, sidecar_path=None):
    raw_path = str(raw_path)
    if sidecar_path is None:
        sidecar_path = raw_path.rsplit(".", 1)[0] + ".json"
    with open(sidecar_path) as fh:
        doc = json.load(fh)
    shape = (int(doc["views"]), int(doc["rows"]), int(doc["cols"]))
    data = np.fromfile(raw_path, dtype="<f4").astype(float)
    if data.size != shape[0] * shape[1] * shape[2]:
        raise FormatError(f"raw stack size {data.size} does not match sidecar {shape}")
    return data.reshape(shape), doc
