import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egovol.camera import CameraModel
from egovol.kinematics import forward_keypoints, perturb_pose
from egovol.synthesis import (NO_MEASUREMENT, ExemplarRecord, SynthesisConfig, Synthesizer,
                              background_pool, check_record, composite_background,
                              generate_dataset, load_background_pool, make_record, pair_arms,
                              propose_arm, raycast_depth, render_plane, sample_exemplar,
                              visibility_fraction)
from egovol.dataset import Dataset

CAM = CameraModel()


def on_ray(cam, x, y, r):
    d = np.array([(x - cam.cx) / cam.f, (y - cam.cy) / cam.f, 1.0])
    return r * d / np.linalg.norm(d)


def test_raycast_examples(cam):
    img = raycast_depth(cam, [on_ray(cam, 100, 50, 0.5), on_ray(cam, 100, 50, 0.3)])
    assert img[50, 100] == pytest.approx(0.3, rel=1e-6)
    assert np.count_nonzero(img) == 1
    assert np.all(raycast_depth(cam, np.zeros((0, 3))) == NO_MEASUREMENT)
    img = raycast_depth(cam, [[0, 0, 0.5]])
    assert img[int(cam.cy), int(cam.cx)] == pytest.approx(0.5)
    assert np.count_nonzero(img) == 1


def test_raycast_drops_points_behind(cam):
    assert np.all(raycast_depth(cam, [[0, 0, -0.5], [0, 0, 0]]) == NO_MEASUREMENT)


def test_raycast_splat_fills_close_surfaces(cam):
    """A plane sampled at the chain spacing renders without holes at the workspace edge."""
    s = cam.z_max / (2 * cam.f)
    g = np.arange(-0.05, 0.05, s)
    xs, ys = np.meshgrid(g, g)
    for z in (0.15, 0.4, 0.7):
        pts = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)], 1)
        img = raycast_depth(cam, pts, s)
        x0, x1 = int(cam.cx + cam.f * -0.04 / z), int(cam.cx + cam.f * 0.04 / z)
        assert np.all(img[int(cam.cy) - 2:int(cam.cy) + 3, x0:x1] > 0)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_raycast_min_composition(seed):
    rng = np.random.default_rng(seed)
    cam = CameraModel(f=20, cx=8, cy=6, width=16, height=12, nu=4, nv=3, nw=5)
    a = rng.uniform([-0.3, -0.3, -0.1], [0.3, 0.3, 1.0], (rng.integers(0, 60), 3))
    b = rng.uniform([-0.3, -0.3, -0.1], [0.3, 0.3, 1.0], (rng.integers(0, 60), 3))
    spacing = None if seed % 2 else 0.05
    ab = raycast_depth(cam, np.concatenate([a, b]), spacing)
    assert np.array_equal(ab, composite_background(raycast_depth(cam, a, spacing),
                                                   raycast_depth(cam, b, spacing)))


def grid_keypoints(cam, n_inside):
    inside = [on_ray(cam, 10 + 10 * i, 100, 0.4) for i in range(n_inside)]
    outside = [[0, 0, -0.4]] * (22 - n_inside)
    return np.array(inside + outside)


def test_visibility_examples(cam):
    assert visibility_fraction(cam, grid_keypoints(cam, 22)) == 1.0
    assert visibility_fraction(cam, grid_keypoints(cam, 19)) == pytest.approx(19 / 22)
    assert visibility_fraction(cam, grid_keypoints(cam, 20)) == pytest.approx(20 / 22)
    off_image = grid_keypoints(cam, 22)
    off_image[0] = on_ray(cam, 330, 100, 0.4)
    assert visibility_fraction(cam, off_image) == pytest.approx(21 / 22)


def test_sample_exemplar_sigma_zero(chain, library, cam):
    a = sample_exemplar(chain, library, "open_palm", 0.0, cam, 1)
    b = sample_exemplar(chain, library, "open_palm", 0.0, cam, 99)
    assert a is not None and b is not None
    assert np.array_equal(a.depth, b.depth)
    check_record(cam, a)


def test_sample_exemplar_replay(chain, library, cam):
    for seed in range(5):
        a = sample_exemplar(chain, library, "pinch", 0.15, cam, seed)
        b = sample_exemplar(chain, library, "pinch", 0.15, cam, seed)
        assert (a is None) == (b is None)
        if a is not None:
            assert a.seed == seed and np.array_equal(a.depth, b.depth)


def test_rest_grasps_visible(chain, library, cam):
    for gid in library.ids:
        kp = forward_keypoints(chain, library[gid].pose("right"))
        assert visibility_fraction(cam, kp) >= 0.9, gid


def test_acceptance_rate_near_border(chain, library, cam):
    """Monte Carlo over 10^4 draws for the grasp whose rest pose sits closest to the image border."""
    def margin(gid):
        p = np.asarray([[cam.f * x / z + cam.cx, cam.f * y / z + cam.cy]
                        for x, y, z in forward_keypoints(chain, library[gid].pose("right"))])
        return min(p[:, 0].min(), cam.width - p[:, 0].max(), p[:, 1].min(), cam.height - p[:, 1].max())
    gid = min(library.ids, key=margin)
    rng = np.random.default_rng(7)
    n = 10_000
    kept = sum(propose_arm(chain, library, gid, 0.15, cam, rng) is not None for _ in range(n))
    assert 0 < kept < n


def single(cam, depth, hand, kp=None):
    kp = np.zeros((1, 22, 3)) + [0, 0, 0.4] if kp is None else kp
    return make_record(cam, depth, kp, (hand,), ("g_" + hand,))


def test_pair_arms(cam):
    zl = np.zeros((cam.height, cam.width), np.float32)
    zr = zl.copy()
    zl[:, :100] = 0.4
    zr[:, 200:] = 0.5
    merged = pair_arms(single(cam, zl, "left"), single(cam, zr, "right"), 0.02)
    assert merged.arm_count == 2 and merged.handedness == ("right", "left")
    assert np.array_equal(merged.depth, np.maximum(zl, zr))
    zr2 = zl + np.where(zl > 0, 0.01, 0).astype(np.float32)
    assert pair_arms(single(cam, zl, "left"), single(cam, zr2, "right"), 0.02) is None
    zr3 = zl + np.where(zl > 0, 0.05, 0).astype(np.float32)
    m = pair_arms(single(cam, zl, "left"), single(cam, zr3, "right"), 0.02)
    assert np.array_equal(m.depth, np.where(zl > 0, np.minimum(zl, zr3), 0))
    with pytest.raises(ValueError):
        pair_arms(single(cam, zl, "left"), single(cam, zr, "left"), 0.02)


def test_composite_background(cam):
    fore = np.zeros((cam.height, cam.width), np.float32)
    back = np.full_like(fore, 1.2)
    assert np.array_equal(composite_background(fore, back), back)
    fore[3, 4], back[3, 4] = 0.4, 0.3
    assert composite_background(fore, back)[3, 4] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        composite_background(fore, back[:-1])


def test_background_beyond_workspace(cam):
    for bg in background_pool(cam, 10, 3):
        measured = bg[bg != NO_MEASUREMENT]
        assert measured.size and measured.min() >= 0.8 - 1e-6


def test_render_plane_distance(cam):
    d = render_plane(cam, [0, 0, 1], 1.5)
    assert d[int(cam.cy), int(cam.cx)] == pytest.approx(1.5)
    assert np.all(d >= 1.5 - 1e-12)


def test_load_background_pool(cam, tmp_path):
    z = np.full((cam.height, cam.width), 1.0)
    np.save(tmp_path / "a.npy", z)
    pool = load_background_pool([str(tmp_path / "a.npy")], cam, planar=True)
    assert pool[0][int(cam.cy), int(cam.cx)] == pytest.approx(1.0)
    assert pool[0][0, 0] > 1.0
    np.save(tmp_path / "b.npy", z[:-1])
    with pytest.raises(ValueError):
        load_background_pool([str(tmp_path / "b.npy")], cam)
    with pytest.raises(ValueError):
        load_background_pool([], cam)


def test_synthesizer_records_are_valid(cam):
    synth = Synthesizer(cam, SynthesisConfig(n=30, seed=11, pair_rate=0.5))
    for i in range(30):
        r = synth.record(i)
        check_record(cam, r)
        assert r.seed == 11 + i
        for k in range(r.arm_count):
            assert visibility_fraction(cam, r.keypoints3d[k]) >= 0.9
    assert np.array_equal(synth.record(4).depth, Synthesizer(cam, synth.config).record(4).depth)


def test_check_record_detects_inconsistency(cam):
    r = single(cam, np.zeros((cam.height, cam.width), np.float32), "right",
               np.tile(on_ray(cam, 50, 60, 0.4), (1, 22, 1)))
    check_record(cam, r)
    r.keypoints2d[0, 3] += 2.0
    with pytest.raises(ValueError):
        check_record(cam, r)


def test_generate_single_arm_only(cam, tmp_path):
    out = tmp_path / "a.egov"
    generate_dataset(cam, SynthesisConfig(n=100, pair_rate=0.0, seed=5, n_backgrounds=2), out)
    ds = Dataset(out)
    assert len(ds) == 100
    assert all(r.arm_count == 1 for r in ds)


def test_generate_is_deterministic(cam, tmp_path):
    cfg = SynthesisConfig(n=12, pair_rate=0.5, seed=21, n_backgrounds=3)
    generate_dataset(cam, cfg, tmp_path / "a.egov")
    generate_dataset(cam, cfg, tmp_path / "b.egov", threads=2)
    assert (tmp_path / "a.egov").read_bytes() == (tmp_path / "b.egov").read_bytes()


def test_config_validation():
    for kw in (dict(n=-1), dict(sigma=-0.1), dict(pair_rate=1.5)):
        with pytest.raises(ValueError):
            SynthesisConfig(**kw)
    with pytest.raises(ValueError):
        Synthesizer(CAM, SynthesisConfig(n_backgrounds=0))


def test_noise_option(cam):
    clean = Synthesizer(cam, SynthesisConfig(n=1, seed=3)).record(0)
    noisy = Synthesizer(cam, SynthesisConfig(n=1, seed=3, noise_std=0.005)).record(0)
    m = clean.depth != NO_MEASUREMENT
    assert np.array_equal(m, noisy.depth != NO_MEASUREMENT)
    assert 0.003 < np.std(noisy.depth[m] - clean.depth[m]) < 0.007


def test_perturbed_pose_changes_depth(chain, library, cam):
    rng = np.random.default_rng(0)
    base = library["fist"].pose()
    assert not np.array_equal(perturb_pose(base, 0.15, rng).theta, base.theta)


def test_record_roundtrip_types(cam):
    r = Synthesizer(cam, SynthesisConfig(n=1, seed=1)).record(0)
    assert isinstance(r, ExemplarRecord)
    assert r.depth.dtype == np.float32 and r.keypoints3d.dtype == np.float32
