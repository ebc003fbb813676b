import numpy as np
import pytest

from imucbct import geometry as geo
from imucbct import imu
from imucbct import phantom as ph
from imucbct.errors import ConfigurationError, CoverageError


def static_kinematics(R=None, r=None, n=8, rate=120.0):
    R = np.eye(3) if R is None else R
    r = np.zeros(3) if r is None else np.asarray(r, float)
    zeros3 = np.zeros((n, 3))
    zeros33 = np.zeros((n, 3, 3))
    return ph.SegmentKinematics(rate_hz=rate, R=np.tile(R, (n, 1, 1)),
                                r=np.tile(r, (n, 1)), Rd=zeros33, Rdd=zeros33,
                                rd=zeros3, rdd=zeros3)


def sway_kinematics(seed=0, duration=2.0, flex_mod=1.0):
    tracks = ph.synthesize_sway_tracks(duration, 120.0, 30.0, (0.006, 0.003, 0.004),
                                       (0.4, 0.3, 0.5), seed=seed, flex_mod_deg=flex_mod)
    return ph.forward_kinematics(tracks)


def test_static_sensor_measures_gravity_reaction():
    kin = static_kinematics()
    mount = imu.SensorMount("shank", p_sen=(0, -0.14, 0))
    series = imu.simulate_imu(kin, mount)
    assert np.allclose(series.acc, [0.0, 9.80665, 0.0], atol=1e-12)
    assert np.allclose(series.gyro, 0.0, atol=1e-15)


def test_static_sensor_rotated_90deg_about_z():
    R = geo.rotation_z(np.pi / 2)
    kin = static_kinematics(R=R)
    mount = imu.SensorMount("shank", p_sen=(0, 0, 0))
    series = imu.simulate_imu(kin, mount)
    assert np.allclose(series.acc, [9.80665, 0.0, 0.0], atol=1e-12)


def test_gravity_invariant_for_random_static_orientations():
    rng = np.random.default_rng(3)
    for _ in range(20):
        R = geo.rodrigues(rng.uniform(-np.pi, np.pi, 3))
        kin = static_kinematics(R=R, r=rng.uniform(-0.2, 0.2, 3))
        series = imu.simulate_imu(kin, imu.SensorMount("thigh", p_sen=(0.01, -0.2, 0.0)))
        norms = np.linalg.norm(series.acc, axis=1)
        assert np.max(np.abs(norms - 9.80665)) < 1e-9
        assert np.max(np.abs(series.gyro)) < 1e-12


def finite_difference_oracle(poses, dt, g):
    """Differentiate the sensor world pose directly (central differences)."""
    acc = []
    gyro = []
    for t in range(1, len(poses) - 1):
        R = poses[t][:3, :3]
        xdd = (poses[t + 1][:3, 3] - 2 * poses[t][:3, 3] + poses[t - 1][:3, 3]) / dt ** 2
        Rd = (poses[t + 1][:3, :3] - poses[t - 1][:3, :3]) / (2 * dt)
        acc.append(R.T @ (xdd - g))
        W = R.T @ Rd
        gyro.append(np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]]) / 2)
    return np.asarray(acc), np.asarray(gyro)


def test_sway_signals_match_pose_differentiation_oracle():
    thigh, shank = sway_kinematics(seed=4)
    mount = imu.SensorMount("shank", p_sen=(0.0, -0.14, 0.0))
    series = imu.simulate_imu(shank, mount)
    poses = imu.sensor_world_poses(shank, mount)
    acc_o, gyro_o = finite_difference_oracle(poses, 1.0 / 120.0, imu.GRAVITY)
    assert np.max(np.abs(series.acc[1:-1] - acc_o)) < 1e-3
    assert np.max(np.abs(series.gyro[1:-1] - gyro_o)) < 1e-4


def test_frame_covariance_under_mount_rotation():
    thigh, shank = sway_kinematics(seed=5)
    Q = geo.rodrigues(np.array([0.4, -0.2, 0.7]))
    base = imu.SensorMount("shank", p_sen=(0.0, -0.14, 0.0))
    rotated = imu.SensorMount("shank", p_sen=(0.0, -0.14, 0.0), r_off=Q)
    s0 = imu.simulate_imu(shank, base)
    s1 = imu.simulate_imu(shank, rotated)
    assert np.max(np.abs(s1.acc - s0.acc @ Q)) < 1e-9   # rows rotated by Q^T
    assert np.max(np.abs(s1.gyro - s0.gyro @ Q)) < 1e-9


def test_noise_rms_at_base_level():
    spec = imu.NoiseSpec(f_a=0, f_g=0, seed=12)
    assert spec.sigma_acc == pytest.approx(0.01765197, abs=1e-7)
    assert np.rad2deg(spec.sigma_gyro) == pytest.approx(0.07)
    n = 1_000_000
    series = imu.ImuSeries(rate_hz=120.0, acc=np.zeros((n, 3)), gyro=np.zeros((n, 3)))
    noisy = imu.add_noise(series, spec)
    acc_rms = np.sqrt(np.mean(noisy.acc ** 2, axis=0))
    gyro_rms = np.sqrt(np.mean(noisy.gyro ** 2, axis=0))
    assert np.all(np.abs(acc_rms / spec.sigma_acc - 1) < 0.01)
    assert np.all(np.abs(gyro_rms / spec.sigma_gyro - 1) < 0.01)


def test_noise_disabled_is_identity():
    thigh, shank = sway_kinematics(seed=6, duration=0.5)
    series = imu.simulate_imu(shank, imu.SensorMount("shank", p_sen=(0, -0.14, 0)))
    out = imu.add_noise(series, None)
    assert np.array_equal(out.acc, series.acc)
    assert out.acc is not series.acc


def test_noise_determinism_and_input_untouched():
    series = imu.ImuSeries(rate_hz=120.0, acc=np.zeros((100, 3)), gyro=np.zeros((100, 3)))
    spec = imu.NoiseSpec(f_a=2, f_g=3, seed=77)
    a = imu.add_noise(series, spec)
    b = imu.add_noise(series, spec)
    assert np.array_equal(a.acc, b.acc) and np.array_equal(a.gyro, b.gyro)
    assert np.all(series.acc == 0.0)
    c = imu.add_noise(series, imu.NoiseSpec(f_a=2, f_g=3, seed=78))
    assert not np.array_equal(a.acc, c.acc)


def test_noise_scaling_with_exponents():
    assert imu.NoiseSpec(f_a=5, f_g=4).sigma_acc == pytest.approx(1.8e-3 * 9.80665 / 1e5)
    assert imu.NoiseSpec(f_a=5, f_g=4).sigma_gyro == pytest.approx(np.deg2rad(0.07) / 1e4)
    with pytest.raises(ConfigurationError):
        imu.NoiseSpec(f_a=-1)


def test_sync_map_paper_rates():
    sync = imu.build_sync_map(120.0, 31.0, 248)
    assert sync.indices[0] == 0
    assert sync.indices[1] == 4
    assert sync.n == 4
    assert np.all(np.diff(sync.indices) > 0)
    assert sync.indices[-1] == round(247 * 120 / 31)


def test_sync_map_equal_rates():
    sync = imu.build_sync_map(60.0, 60.0, 10)
    assert np.array_equal(sync.indices, np.arange(10))
    assert sync.n == 1


def test_sync_map_coverage_error():
    with pytest.raises(CoverageError):
        imu.build_sync_map(120.0, 31.0, 248, n_imu_samples=900)
    imu.build_sync_map(120.0, 31.0, 248, n_imu_samples=960)  # fits


def test_sync_map_rate_validation():
    with pytest.raises(ConfigurationError):
        imu.build_sync_map(30.0, 31.0, 10)


def test_imu_csv_round_trip(tmp_path):
    thigh, shank = sway_kinematics(seed=8, duration=0.25)
    series = imu.simulate_imu(shank, imu.SensorMount("shank", p_sen=(0, -0.14, 0)))
    path = tmp_path / "imu.csv"
    imu.save_imu_csv(series, path)
    back = imu.load_imu_csv(path)
    assert back.rate_hz == pytest.approx(series.rate_hz, rel=1e-9)
    assert np.array_equal(back.acc, series.acc)
    assert np.array_equal(back.gyro, series.gyro)
