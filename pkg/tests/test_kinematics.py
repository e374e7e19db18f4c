import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egovol.kinematics import (AXIS_Y, CLUSTER_KEYPOINTS, KEYPOINT_NAMES, N_KEYPOINTS, PHI_LIMITS,
                               THETA_LIMITS, ArmHandPose, ObjectModel, apply, chest_mount,
                               clamp_pose, forward_keypoints, forward_kinematics, is_rigid,
                               load_grasps, mirror_pose, perturb_pose, rigid, rotation,
                               segment_transforms, translation)

rng0 = np.random.default_rng(0)


def random_pose(rng, handedness="right"):
    theta = rng.uniform(THETA_LIMITS[:, 0], THETA_LIMITS[:, 1])
    phi = rng.uniform(PHI_LIMITS[:, 0], PHI_LIMITS[:, 1])
    return ArmHandPose(theta, phi, "g", handedness=handedness)


def zero_pose(chain, handedness="right"):
    return ArmHandPose(np.zeros(chain.n_theta), np.zeros(chain.n_phi), "g", handedness=handedness)


def random_rigid(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    return rigid(R, rng.normal(size=3))


def test_keypoint_census(chain):
    assert N_KEYPOINTS == len(KEYPOINT_NAMES) == 22
    kp = forward_keypoints(chain, zero_pose(chain))
    assert kp.shape == (22, 3)
    assert len(CLUSTER_KEYPOINTS) == 7
    covered = sorted(i for s in chain.segments for i in s.keypoints)
    assert covered == list(range(22))


def test_chain_is_acyclic(chain):
    for i, s in enumerate(chain.segments):
        assert s.parent < i
    assert chain.segments[0].parent == -1


def test_rest_pose_identity_extrinsics(chain):
    """Zero angles: keypoints are the composed segment offsets applied to the local keypoints."""
    kp = forward_keypoints(chain, zero_pose(chain), np.eye(4))
    frames = []
    for s in chain.segments:
        frames.append((np.eye(4) if s.parent < 0 else frames[s.parent]) @ s.offset)
    for s, G in zip(chain.segments, frames):
        for i, u in s.keypoints.items():
            assert np.allclose(kp[i], G[:3, :3] @ u + G[:3, 3], atol=1e-12)


def test_segment_transforms_are_rigid(chain, rng):
    for _ in range(20):
        for G in segment_transforms(chain, random_pose(rng), random_rigid(rng)):
            assert is_rigid(G)


def test_rigid_segment_distances(chain, rng):
    rest = forward_kinematics(chain, zero_pose(chain), np.eye(4))[1]
    sizes = [len(s.cloud) for s in chain.segments]
    bounds = np.cumsum([0] + sizes)
    for _ in range(5):
        cloud = forward_kinematics(chain, random_pose(rng), random_rigid(rng))[1]
        for a, b in zip(bounds[:-1], bounds[1:]):
            idx = rng.choice(np.arange(a, b), size=min(40, b - a), replace=False)
            d0 = np.linalg.norm(rest[idx, None] - rest[None, idx], axis=-1)
            d1 = np.linalg.norm(cloud[idx, None] - cloud[None, idx], axis=-1)
            assert np.allclose(d0, d1, atol=1e-9)


def test_shoulder_azimuth_quarter_turn(chain):
    """Independent oracle: rotate the rest wrist about the shoulder's y axis by pi/2."""
    ext = np.eye(4)
    p0 = zero_pose(chain)
    wrist0 = forward_keypoints(chain, p0, ext)[1]
    theta = np.zeros(chain.n_theta)
    theta[0] = np.pi / 2
    wrist1 = forward_keypoints(chain, ArmHandPose(theta, p0.phi), ext)[1]
    shoulder = chain.segments[0].offset
    anchor = shoulder[:3, 3]
    axis = shoulder[:3, :3] @ AXIS_Y
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    R = np.eye(3) + K + K @ K          # Rodrigues at 90 degrees
    assert np.allclose(wrist1, anchor + R @ (wrist0 - anchor), atol=1e-12)


def test_extrinsics_compose(chain, rng):
    for _ in range(10):
        pose = random_pose(rng)
        C1, C2 = random_rigid(rng), random_rigid(rng)
        a = forward_keypoints(chain, pose, C2 @ C1)
        b = apply(C2, forward_keypoints(chain, pose, C1))
        assert np.allclose(a, b, atol=1e-9)


def test_cloud_size_pose_invariant(chain, rng):
    sizes = {len(forward_kinematics(chain, random_pose(rng))[1]) for _ in range(3)}
    assert sizes == {chain.cloud_size()}


def test_dimension_mismatch(chain):
    with pytest.raises(ValueError):
        forward_kinematics(chain, ArmHandPose(np.zeros(6), np.zeros(20)))
    with pytest.raises(ValueError):
        forward_keypoints(chain, ArmHandPose(np.zeros(7), np.zeros(19)))


def test_object_follows_palm(chain, rng):
    obj = ObjectModel.from_spec({"shape": "sphere", "dims": [0.03], "position": [0, 0.05, 0.05]})
    pose = random_pose(rng)
    kp, cloud = forward_kinematics(chain, pose, None, obj)
    G = segment_transforms(chain, pose)[chain.palm_index]
    assert np.allclose(cloud[-len(obj.cloud):], apply(G, obj.cloud))
    with pytest.raises(ValueError):
        ObjectModel.from_spec({"shape": "box", "dims": [0.1, 0, 0.1]})


def test_perturb_zero_sigma(rng):
    p = random_pose(rng)
    assert perturb_pose(p, 0.0, rng) is p


def test_perturb_deterministic_and_phi_fixed():
    p = random_pose(np.random.default_rng(5))
    a = perturb_pose(p, 0.2, np.random.default_rng(9))
    b = perturb_pose(p, 0.2, np.random.default_rng(9))
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.phi, p.phi)
    assert np.all(a.theta >= THETA_LIMITS[:, 0]) and np.all(a.theta <= THETA_LIMITS[:, 1])


def test_perturb_moments():
    """Law of large numbers: mean offset 0 +- 3 sigma / sqrt(n), variance sigma^2 +- 5 %."""
    sigma, n = 0.15, 100_000
    centre = THETA_LIMITS.mean(axis=1)        # far from every limit, so no clamping
    p = ArmHandPose(centre, np.zeros(20))
    rng = np.random.default_rng(2024)
    d = np.stack([perturb_pose(p, sigma, rng).theta for _ in range(n)]) - centre
    assert np.all(np.abs(d.mean(0)) < 3 * sigma / np.sqrt(n))
    assert np.all(np.abs(d.var(0) / sigma ** 2 - 1) < 0.05)


def test_clamp(chain):
    p = ArmHandPose(np.full(7, 10.0), np.full(20, -10.0))
    c = clamp_pose(chain, p)
    assert np.array_equal(c.theta, chain.theta_limits[:, 1])
    assert np.array_equal(c.phi, chain.phi_limits[:, 0])


def test_mirror(chain, rng):
    p = random_pose(rng)
    m = mirror_pose(p)
    assert m.handedness == "left" and mirror_pose(m).handedness == "right"
    kp = forward_keypoints(chain, p)
    km = forward_keypoints(chain, m)
    assert np.allclose(km, kp * [-1, 1, 1], atol=1e-12)
    assert np.allclose(forward_keypoints(chain, mirror_pose(m)), kp, atol=1e-9)


def test_mirror_reflects_wrist_example(chain):
    """Pick extrinsics so that the right wrist sits at (0.1, 0, 0.4)."""
    p = ArmHandPose(np.zeros(7), np.zeros(20))
    w = forward_keypoints(chain, p, np.eye(4))[1]
    ext = translation(*(np.array([0.1, 0, 0.4]) - w))
    assert np.allclose(forward_keypoints(chain, p, ext)[1], (0.1, 0, 0.4))
    mirrored_ext = np.diag([-1.0, 1, 1, 1]) @ ext @ np.diag([-1.0, 1, 1, 1])
    assert np.allclose(forward_keypoints(chain, mirror_pose(p), mirrored_ext)[1], (-0.1, 0, 0.4))


def test_chest_mount():
    assert np.allclose(chest_mount("right")[:3, 3], (0.20, -0.15, 0))
    assert np.allclose(chest_mount("left")[:3, 3], (-0.20, -0.15, 0))


def test_rotation_rigid():
    for ax in np.random.default_rng(3).normal(size=(20, 3)):
        assert is_rigid(rigid(rotation(ax, 1.3)))


def test_grasp_library(library, chain, tmp_path):
    assert len(library) >= 20
    assert len(set(library.ids)) == len(library.ids)
    for gid in library.ids:
        g = library[gid]
        assert g.phi.shape == (20,) and g.theta.shape == (7,)
        assert np.all(g.phi >= PHI_LIMITS[:, 0] - 1e-12) and np.all(g.phi <= PHI_LIMITS[:, 1] + 1e-12)
    with pytest.raises(KeyError):
        library["no_such_grasp"]
    assert library.subset(5).ids == library.ids[:5]


def test_grasp_file_override(tmp_path):
    doc = {"version": 1, "angle_unit": "deg",
           "grasps": {"only": {"phi": [10] * 20, "theta": [0, -40, 0, 60, 0, 0, 0]}}}
    path = tmp_path / "g.json"
    path.write_text(json.dumps(doc))
    lib = load_grasps(path)
    assert lib.ids == ["only"]
    assert np.allclose(lib["only"].phi, np.deg2rad(10))
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_grasps(path)


@settings(max_examples=50)
@given(st.lists(st.floats(-3, 3), min_size=7, max_size=7))
def test_clamped_angles_within_limits(theta):
    from egovol.kinematics import build_arm_chain
    ch = build_arm_chain()
    c = clamp_pose(ch, ArmHandPose(np.array(theta), np.zeros(20)))
    assert np.all(c.theta >= ch.theta_limits[:, 0]) and np.all(c.theta <= ch.theta_limits[:, 1])
