"""Ideal IMU signal synthesis, Gaussian sensor noise, and scan synchronization.

An IMU rigidly mounted on a segment measures specific force and angular
rate in its own frame.  Signals are derived from segment kinematics:
the accelerometer sees the sensor-point acceleration minus gravity,
rotated into the sensor frame, and the gyroscope rate comes from the
skew part of R^T dR/dt.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, CoverageError, FormatError
from .geometry import unskew
from .phantom import SegmentKinematics

GRAVITY = np.array([0.0, -9.80665, 0.0])
G0 = 9.80665

# Bosch BMI160-class RMS noise, per axis
RMS_ACC_BASE_MG = 1.8
RMS_GYRO_BASE_DPS = 0.07


@dataclass(frozen=True)
class SensorMount:
    """Rigid mounting of a sensor on a segment.

    ``p_sen`` is the sensor position in the segment frame (m), ``r_off``
    a fixed orientation offset, and ``segment_length_m`` locates the
    distal joint at (0, -length, 0) in the segment frame.
    """

    segment: str                    # "thigh" | "shank"
    p_sen: np.ndarray
    r_off: np.ndarray = None
    segment_length_m: float = 0.35

    def __post_init__(self):
        if self.segment not in ("thigh", "shank"):
            raise ConfigurationError(f"unknown segment {self.segment!r}")
        object.__setattr__(self, "p_sen", np.asarray(self.p_sen, dtype=float))
        r_off = np.eye(3) if self.r_off is None else np.asarray(self.r_off, dtype=float)
        if np.max(np.abs(r_off.T @ r_off - np.eye(3))) > 1e-9:
            raise ConfigurationError("r_off must be orthonormal")
        object.__setattr__(self, "r_off", r_off)


def default_mounts(thigh_length_m=0.35, shank_length_m=0.35):
    """Default sensor placement: on the segment axis, shank sensor 14 cm
    below the knee, thigh sensor 25 cm below the hip."""
    return {
        "thigh": SensorMount("thigh", p_sen=(0.0, -0.25, 0.0),
                             segment_length_m=thigh_length_m),
        "shank": SensorMount("shank", p_sen=(0.0, -0.14, 0.0),
                             segment_length_m=shank_length_m),
    }


@dataclass
class ImuSeries:
    """Per-sample specific force (m/s^2) and angular rate (rad/s)."""

    rate_hz: float
    acc: np.ndarray   # (N, 3)
    gyro: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float)
        if self.acc.shape != self.gyro.shape or self.acc.ndim != 2 or self.acc.shape[1] != 3:
            raise ConfigurationError(
                f"acc/gyro must share shape (N, 3), got {self.acc.shape}/{self.gyro.shape}")

    def __len__(self):
        return len(self.acc)

    @property
    def dt(self):
        return 1.0 / self.rate_hz


@dataclass(frozen=True)
class NoiseSpec:
    """White Gaussian per-axis sensor noise.

    RMS amplitudes start at the datasheet values (milli-g for the
    accelerometer, deg/s for the gyroscope) and are divided by
    10**f_a resp. 10**f_g.
    """

    f_a: int = 0
    f_g: int = 0
    seed: int = 0
    rms_acc_base_mg: float = RMS_ACC_BASE_MG
    rms_gyro_base_dps: float = RMS_GYRO_BASE_DPS

    def __post_init__(self):
        if self.f_a < 0 or self.f_g < 0 or self.f_a != int(self.f_a) or self.f_g != int(self.f_g):
            raise ConfigurationError("noise exponents must be non-negative integers")

    @property
    def sigma_acc(self):
        """Accelerometer noise std, m/s^2 per axis."""
        return self.rms_acc_base_mg * 1e-3 * G0 / 10.0 ** self.f_a

    @property
    def sigma_gyro(self):
        """Gyroscope noise std, rad/s per axis."""
        return np.deg2rad(self.rms_gyro_base_dps) / 10.0 ** self.f_g


def sensor_world_poses(kin: SegmentKinematics, mount: SensorMount):
    """World pose of the mounted sensor at every frame, shape (N, 4, 4)."""
    n = len(kin)
    poses = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    poses[:, :3, :3] = kin.R @ mount.r_off
    poses[:, :3, 3] = kin.r + np.einsum("nij,j->ni", kin.R, mount.p_sen)
    return poses


def simulate_imu(kin: SegmentKinematics, mount: SensorMount, g=GRAVITY) -> ImuSeries:
    """Ideal sensor signals from segment kinematics.

    acc(t) = R(t)^T (r''(t) + R''(t) p_sen - g) and the rate vector is
    read off the skew part of R(t)^T R'(t), where R includes the mount's
    fixed orientation offset.
    """
    g = np.asarray(g, dtype=float)
    n = len(kin)
    R_sen = kin.R @ mount.r_off
    Rd_sen = kin.Rd @ mount.r_off
    lin_acc = kin.rdd + np.einsum("nij,j->ni", kin.Rdd, mount.p_sen) - g
    acc = np.einsum("nji,nj->ni", R_sen, lin_acc)  # R^T @ v per frame
    W = np.einsum("nji,njk->nik", R_sen, Rd_sen)
    gyro = np.empty((n, 3))
    gyro[:, 0] = 0.5 * (W[:, 2, 1] - W[:, 1, 2])
    gyro[:, 1] = 0.5 * (W[:, 0, 2] - W[:, 2, 0])
    gyro[:, 2] = 0.5 * (W[:, 1, 0] - W[:, 0, 1])
    return ImuSeries(rate_hz=kin.rate_hz, acc=acc, gyro=gyro)


def add_noise(series: ImuSeries, spec: NoiseSpec) -> ImuSeries:
    """Add i.i.d. zero-mean Gaussian noise per sample and axis.

    Returns a new series; the input is untouched.  A ``None`` spec is a
    no-op copy.  Deterministic for a given seed.
    """
    if spec is None:
        return ImuSeries(rate_hz=series.rate_hz, acc=series.acc.copy(),
                         gyro=series.gyro.copy())
    rng = np.random.default_rng(spec.seed)
    acc = series.acc + rng.normal(0.0, spec.sigma_acc, series.acc.shape)
    gyro = series.gyro + rng.normal(0.0, spec.sigma_gyro, series.gyro.shape)
    return ImuSeries(rate_hz=series.rate_hz, acc=acc, gyro=gyro)


@dataclass(frozen=True)
class SyncMap:
    """Projection-to-IMU sample correspondence.

    ``indices[i]`` is the IMU sample acquired with projection i;
    ``n`` is the sample gap between the first two projections.
    """

    imu_rate_hz: float
    proj_rate_hz: float
    indices: np.ndarray

    @property
    def n(self):
        return int(self.indices[1] - self.indices[0])


def build_sync_map(imu_rate_hz, proj_rate_hz, n_proj, n_imu_samples=None) -> SyncMap:
    """Map projection indices to nearest IMU sample indices.

    Requires imu_rate >= proj_rate > 0.  With ``n_imu_samples`` given,
    verifies that the series covers the whole scan.
    """
    if not (imu_rate_hz >= proj_rate_hz > 0):
        raise ConfigurationError("need imu_rate >= proj_rate > 0")
    if n_proj < 2:
        raise ConfigurationError("need at least two projections")
    ratio = imu_rate_hz / proj_rate_hz
    indices = np.floor(np.arange(n_proj) * ratio + 0.5).astype(int)
    if n_imu_samples is not None and indices[-1] >= n_imu_samples:
        raise CoverageError(
            f"IMU series of {n_imu_samples} samples ends before projection "
            f"{n_proj - 1} at sample {indices[-1]}")
    return SyncMap(imu_rate_hz=imu_rate_hz, proj_rate_hz=proj_rate_hz, indices=indices)


_CSV_HEADER = "t,ax,ay,az,gx,gy,gz"


def save_imu_csv(series: ImuSeries, path):
    lines = [_CSV_HEADER]
    dt = series.dt
    for i in range(len(series)):
        vals = [i * dt, *series.acc[i], *series.gyro[i]]
        lines.append(",".join(repr(float(v)) for v in vals))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_imu_csv(path) -> ImuSeries:
    times, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("t,"):
                continue
            cells = line.split(",")
            if len(cells) != 7:
                raise FormatError(f"expected 7 columns, got {len(cells)}", row=lineno)
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise FormatError(f"non-numeric cell in {line!r}", row=lineno) from None
            times.append(vals[0])
            rows.append(vals[1:])
    if len(rows) < 2:
        raise FormatError("need at least 2 samples")
    dt = np.diff(times)
    if np.max(np.abs(dt - dt[0])) > 1e-9 or dt[0] <= 0:
        raise FormatError("time column is not uniformly increasing")
    data = np.asarray(rows)
    return ImuSeries(rate_hz=1.0 / dt[0], acc=data[:, :3], gyro=data[:, 3:])
