import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imucbct import geometry as geo
from imucbct import phantom as ph
from imucbct.errors import ConfigurationError, DegenerateKinematicsError, FormatError
from imucbct.volume import VolumeSpec


def small_geometry(cols=31, rows=25):
    cfg = geo.ScanConfig(n_proj=4, angular_increment_deg=10.0, sdd_mm=1198.0,
                         sid_mm=780.0, det_cols=cols, det_rows=rows,
                         pixel_mm=4.0, frame_rate_hz=10.0)
    return cfg, geo.build_circular_trajectory(cfg)


def sphere_phantom(solids):
    return ph.LegPhantom(thigh=solids, shank=())


# ---------------------------------------------------------------------------
# track synthesis


def test_zero_amplitudes_give_static_pose():
    tracks = ph.synthesize_sway_tracks(2.0, 120.0, 30.0, (0, 0, 0), (0.2, 0.3, 0.4), seed=5)
    for arr in (tracks.hip, tracks.knee, tracks.ankle):
        assert np.max(np.abs(arr - arr[0])) == 0.0


def test_twenty_seconds_at_120hz_gives_2400_frames():
    tracks = ph.synthesize_sway_tracks(20.0, 120.0, 45.0, (0.002, 0.001, 0.002),
                                       (0.2, 0.3, 0.4), seed=1)
    assert len(tracks) == 2400


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_segment_lengths_constant_for_random_seeds(seed):
    tracks = ph.synthesize_sway_tracks(1.0, 120.0, 35.0, (0.01, 0.004, 0.006),
                                       (0.3, 0.5, 0.2), seed=seed,
                                       flex_mod_deg=1.5, flex_drift_deg=2.0)
    for a, b in ((tracks.hip, tracks.knee), (tracks.knee, tracks.ankle)):
        lengths = np.linalg.norm(a - b, axis=1)
        assert np.max(np.abs(lengths - lengths[0])) < 1e-9


def test_initial_pose_independent_of_seed():
    t1 = ph.synthesize_sway_tracks(1.0, 120.0, 30.0, (0.005, 0.005, 0.005),
                                   (0.3, 0.4, 0.5), seed=1, flex_mod_deg=1.0)
    t2 = ph.synthesize_sway_tracks(1.0, 120.0, 30.0, (0.005, 0.005, 0.005),
                                   (0.3, 0.4, 0.5), seed=99, flex_mod_deg=1.0)
    assert np.allclose(t1.hip[0], t2.hip[0], atol=1e-15)
    assert np.allclose(t1.ankle[0], t2.ankle[0], atol=1e-15)
    assert np.allclose(t1.knee[0], 0.0)


def test_bad_parameters_rejected():
    with pytest.raises(ConfigurationError):
        ph.synthesize_sway_tracks(0.0, 120.0, 30.0, (0, 0, 0), (1, 1, 1), seed=0)
    with pytest.raises(ConfigurationError):
        ph.synthesize_sway_tracks(2.0, 120.0, 30.0, (-0.1, 0, 0), (1, 1, 1), seed=0)


# ---------------------------------------------------------------------------
# CSV round trips


def test_handwritten_csv_exact(tmp_path):
    path = tmp_path / "tracks.csv"
    path.write_text(
        "# units: m\n"
        "t,hip_x,hip_y,hip_z,knee_x,knee_y,knee_z,ankle_x,ankle_y,ankle_z\n"
        "0.0,0.0,0.7,0.0,0.0,0.35,0.0,0.0,0.0,0.0\n"
        "0.5,0.1,0.7,0.0,0.1,0.35,0.0,0.1,0.0,0.0\n"
        "1.0,0.2,0.7,0.0,0.2,0.35,0.0,0.2,0.0,0.0\n")
    tracks = ph.load_tracks_csv(path)
    assert tracks.rate_hz == pytest.approx(2.0)
    assert np.array_equal(tracks.hip[:, 0], [0.0, 0.1, 0.2])
    assert np.array_equal(tracks.knee[1], [0.1, 0.35, 0.0])


def test_mm_units_converted(tmp_path):
    path = tmp_path / "tracks_mm.csv"
    path.write_text(
        "# units: mm\n"
        "t,hip_x,hip_y,hip_z,knee_x,knee_y,knee_z,ankle_x,ankle_y,ankle_z\n"
        "0.0,0,700,0,0,350,0,0,0,0\n"
        "0.1,0,700,0,0,350,0,0,0,0\n")
    tracks = ph.load_tracks_csv(path)
    assert tracks.hip[0, 1] == pytest.approx(0.7)


def test_save_load_round_trip(tmp_path):
    tracks = ph.synthesize_sway_tracks(0.5, 120.0, 30.0, (0.004, 0.002, 0.003),
                                       (0.4, 0.3, 0.6), seed=7, flex_mod_deg=0.7)
    path = tmp_path / "t.csv"
    ph.save_tracks_csv(tracks, path)
    back = ph.load_tracks_csv(path)
    assert back.rate_hz == pytest.approx(tracks.rate_hz, rel=1e-12)
    for a, b in ((back.hip, tracks.hip), (back.knee, tracks.knee), (back.ankle, tracks.ankle)):
        assert np.max(np.abs(a - b)) < 1e-9


def test_rigid_violation_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "# units: m\n"
        "t,hip_x,hip_y,hip_z,knee_x,knee_y,knee_z,ankle_x,ankle_y,ankle_z\n"
        "0.0,0.0,0.7,0.0,0.0,0.35,0.0,0.0,0.0,0.0\n"
        "0.1,0.0,0.8,0.0,0.0,0.35,0.0,0.0,0.0,0.0\n")
    with pytest.raises(FormatError, match="thigh length varies"):
        ph.load_tracks_csv(path)


@pytest.mark.parametrize("content,match", [
    ("# units: m\nt,hip_x\n0.0,1.0\n0.1,2.0\n", "10 columns"),
    ("0.0,0,0.7,0,0,0.35,0,0,0,oops\n" * 2, "non-numeric"),
    ("# units: m\n0.0,0,0.7,0,0,0.35,0,0,0,0\n", "at least 2 frames"),
])
def test_malformed_csv_rejected(tmp_path, content, match):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(FormatError, match=match):
        ph.load_tracks_csv(path)


# ---------------------------------------------------------------------------
# forward kinematics


def test_static_vertical_segment_identity_frame():
    n = 6
    tracks = ph.JointTracks(rate_hz=120.0,
                            hip=np.tile([0.0, 0.7, 0.0], (n, 1)),
                            knee=np.tile([0.0, 0.35, 0.0], (n, 1)),
                            ankle=np.tile([0.0, 0.0, 0.0], (n, 1)))
    thigh, shank = ph.forward_kinematics(tracks)
    for kin in (thigh, shank):
        assert np.max(np.abs(kin.R[0] - np.eye(3))) == 0.0
        for d in (kin.Rd, kin.Rdd, kin.rd, kin.rdd):
            assert np.max(np.abs(d)) == 0.0


def test_constant_rotation_rate_recovered():
    rate = 120.0
    omega = 0.5  # rad/s about world z
    t = np.arange(int(2 * rate)) / rate
    hip = np.zeros((len(t), 3))
    knee = 0.35 * np.column_stack([np.sin(omega * t), -np.cos(omega * t), np.zeros(len(t))])
    ankle = 2 * knee - hip
    tracks = ph.JointTracks(rate_hz=rate, hip=hip, knee=knee, ankle=ankle)
    thigh, _ = ph.forward_kinematics(tracks)
    mid = len(t) // 2
    W = thigh.Rd[mid] @ thigh.R[mid].T
    rate_est = np.linalg.norm(geo.unskew(W))
    assert rate_est == pytest.approx(omega, abs=1e-4)


def test_sinusoid_second_derivative_amplitude():
    rate, amp, f = 120.0, 0.004, 1.0
    tracks = ph.synthesize_sway_tracks(2.0, rate, 30.0, (amp, 0, 0), (f, 0, 0), seed=2)
    thigh, _ = ph.forward_kinematics(tracks)
    got = np.max(np.abs(thigh.rdd[5:-5, 0]))
    expected = amp * (2 * np.pi * f) ** 2
    assert got == pytest.approx(expected, rel=5e-3)


def test_sensor_position_round_trip():
    tracks = ph.synthesize_sway_tracks(1.0, 120.0, 40.0, (0.006, 0.003, 0.004),
                                       (0.4, 0.3, 0.5), seed=9, flex_mod_deg=1.0)
    thigh, shank = ph.forward_kinematics(tracks)
    p_sen = np.array([0.0, -0.14, 0.0])  # on the shank axis, 14 cm below the knee
    frac = 0.14 / tracks.shank_length_m
    for t in (0, 40, 119):
        world = shank.r[t] + shank.R[t] @ p_sen
        direct = tracks.knee[t] + frac * (tracks.ankle[t] - tracks.knee[t])
        assert np.max(np.abs(world - direct)) < 1e-9


def test_zero_length_segment_raises():
    n = 4
    tracks = ph.JointTracks(rate_hz=120.0, hip=np.zeros((n, 3)), knee=np.zeros((n, 3)),
                            ankle=np.tile([0.0, -0.35, 0.0], (n, 1)))
    with pytest.raises(DegenerateKinematicsError):
        ph.forward_kinematics(tracks)


# ---------------------------------------------------------------------------
# rendering


def test_single_sphere_central_ray_chord():
    cfg, geom = small_geometry()
    mu, r = 25.0, 0.03
    sph = sphere_phantom((ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (r, r, r)), mu),))
    img = ph.render_projection(sph, np.eye(4), np.eye(4), geom.matrices[0], geom)
    cu, cv = (cfg.det_cols - 1) // 2, (cfg.det_rows - 1) // 2
    assert img[cv, cu] == pytest.approx(2 * r * mu, abs=1e-12)


def test_miss_gives_zero_and_nonnegative():
    cfg, geom = small_geometry()
    sph = sphere_phantom((ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (0.01, 0.01, 0.01)), 30.0),))
    img = ph.render_projection(sph, np.eye(4), np.eye(4), geom.matrices[1], geom)
    assert img[0, 0] == 0.0
    assert np.all(img >= 0.0)


def march_nested_spheres_oracle(spheres, origin, direction, t_end, step_m=5e-5):
    """Brute-force integral: innermost sphere wins at each sample point."""
    ts = np.arange(0.0, t_end, step_m) + step_m / 2
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    mu = np.zeros(len(ts))
    for center, radius, value in spheres:  # listed outer -> inner
        inside = np.linalg.norm(pts - np.asarray(center), axis=1) <= radius
        mu[inside] = value
    return float(np.sum(mu) * step_m)


def test_nested_spheres_match_ray_marching_oracle():
    cfg, geom = small_geometry()
    mu_out, mu_in, r_out, r_in = 20.0, 50.0, 0.03, 0.012
    nested = sphere_phantom((
        ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (r_out, r_out, r_out)), mu_out),
        ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (r_in, r_in, r_in)), mu_in, parent=0),
    ))
    img = ph.render_projection(nested, np.eye(4), np.eye(4), geom.matrices[0], geom)
    cu, cv = (cfg.det_cols - 1) // 2, (cfg.det_rows - 1) // 2
    analytic = 2 * r_out * mu_out + 2 * r_in * (mu_in - mu_out)
    assert img[cv, cu] == pytest.approx(analytic, abs=1e-12)
    origin, d = geo.pixel_ray(geom, 0, cu + 3.0, cv - 2.0)
    oracle = march_nested_spheres_oracle(
        [((0, 0, 0), r_out, mu_out), ((0, 0, 0), r_in, mu_in)], origin, d, t_end=2.0)
    assert img[cv - 2, cu + 3] == pytest.approx(oracle, rel=1e-3)


def test_rendering_linearity_for_disjoint_solids():
    cfg, geom = small_geometry()
    a = ph.SegmentSolid(ph.Ellipsoid((0.0, 0.02, 0.0), (0.012, 0.012, 0.012)), 30.0)
    b = ph.SegmentSolid(ph.CappedCylinder((0.0, -0.03, 0.0), (0.0, 1.0, 0.0), 0.01, 0.015), 15.0)
    both = sphere_phantom((a, b))
    only_a = sphere_phantom((a,))
    only_b = sphere_phantom((b,))
    eye = np.eye(4)
    P = geom.matrices[2]
    img = ph.render_projection(both, eye, eye, P, geom)
    img_a = ph.render_projection(only_a, eye, eye, P, geom)
    img_b = ph.render_projection(only_b, eye, eye, P, geom)
    assert np.max(np.abs(img - (img_a + img_b))) < 1e-9


def test_rigid_consistency_pose_vs_matrix():
    cfg, geom = small_geometry()
    leg = ph.default_leg_phantom()
    T = (geo.make_affine(R=geo.rodrigues(np.array([0.1, 0.2, -0.15])),
                         t=np.array([0.01, -0.02, 0.015])))
    P = geom.matrices[1]
    posed = ph.render_projection(leg, T, T, P, geom)
    moved_matrix = ph.render_projection(leg, np.eye(4), np.eye(4), P @ T, geom)
    assert np.max(np.abs(posed - moved_matrix)) < 1e-6


# ---------------------------------------------------------------------------
# voxelization


def test_voxelize_empty_phantom_zero():
    spec = VolumeSpec.centered((16, 16, 16), 2.0)
    empty = ph.LegPhantom(thigh=(), shank=())
    vol = ph.voxelize(empty, (np.eye(4), np.eye(4)), spec)
    assert np.all(vol.data == 0.0)


def test_voxelized_sphere_volume_within_two_percent():
    r, mu = 0.020, 20.0
    spec = VolumeSpec.centered((96, 96, 96), 0.5)
    sph = sphere_phantom((ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (r, r, r)), mu),))
    vol = ph.voxelize(sph, (np.eye(4), np.eye(4)), spec)
    voxel_m3 = (0.5e-3) ** 3
    measured = np.count_nonzero(vol.data) * voxel_m3
    assert measured == pytest.approx(4.0 / 3.0 * np.pi * r ** 3, rel=0.02)


def test_nested_override_gives_inner_value():
    leg = ph.default_leg_phantom()
    spec = VolumeSpec.centered((64, 64, 64), 1.0, center_mm=(10.0, -175.0, 0.0))
    vert = geo.make_affine()  # shank straight below the knee
    vol = ph.voxelize(ph.LegPhantom(thigh=(), shank=leg.shank), (np.eye(4), vert), spec)
    # marrow center of the shank sits on the tibia axis
    assert 10.0 in vol.data  # marrow value visible
    assert 50.0 in vol.data  # bone around it
    idx = np.argwhere(vol.data == 10.0)
    assert len(idx) > 0


def test_phantom_validation():
    with pytest.raises(ConfigurationError):
        ph.LegPhantom(thigh=(ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (1, 1, 1)), -2.0),),
                      shank=())
    with pytest.raises(ConfigurationError):
        ph.LegPhantom(thigh=(ph.SegmentSolid(ph.Ellipsoid((0, 0, 0), (1, 1, 1)), 2.0, parent=0),),
                      shank=())


def test_stack_io_round_trip(tmp_path):
    cfg, geom = small_geometry()
    rng = np.random.default_rng(0)
    stack = rng.uniform(0, 3, (cfg.n_proj, cfg.det_rows, cfg.det_cols))
    raw = tmp_path / "stack.raw"
    ph.save_stack(stack, geom, raw)
    back, doc = ph.load_stack(raw)
    assert doc["views"] == cfg.n_proj and doc["pixel_mm"] == cfg.pixel_mm
    assert np.max(np.abs(back - stack)) < 1e-6  # float32 quantization
