import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tripose import kinematics as kin
from tripose.kinematics import (
    Pose,
    aggregate_upper,
    body_com_world,
    contact_ik,
    extract_heading,
    fk_pose,
    forward_kinematics,
    heading_apply,
    heading_apply_inv,
    heading_compose,
    heading_identity,
    heading_inverse,
    quat_canonical,
    quat_from_yaw,
    quat_mul,
    quat_rotate,
    quat_to_rotvec,
    rest_pose,
    rotvec_to_quat,
    two_bone_ik,
)


# --- independent oracles ----------------------------------------------------

def heading_to_mat4(h):
    """4x4 homogeneous matrix oracle for a planar-translation + yaw transform."""
    c, s = np.cos(h[2]), np.sin(h[2])
    m = np.eye(4)
    m[:3, :3] = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    m[0, 3] = h[0]
    m[2, 3] = h[1]
    return m


def mat4_to_heading(m):
    return np.array([m[0, 3], m[2, 3], np.arctan2(m[0, 2], m[2, 2])])


def scipy_quat(q_wxyz):
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w])


# --- rotation representations ----------------------------------------------

def test_rotvec_quat_trivial():
    np.testing.assert_allclose(rotvec_to_quat(np.zeros(3)), [1, 0, 0, 0])
    np.testing.assert_allclose(rotvec_to_quat(np.array([np.pi, 0, 0])),
                               [0, 1, 0, 0], atol=1e-12)


def test_rotvec_quat_roundtrip(rng):
    for _ in range(1000):
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        v = v / n * rng.uniform(0.0, np.pi - 1e-6)
        np.testing.assert_allclose(quat_to_rotvec(rotvec_to_quat(v)), v, atol=1e-9)


def test_rotvec_quat_matches_scipy(rng):
    for _ in range(200):
        v = rng.normal(size=3)
        q = rotvec_to_quat(v)
        r = Rotation.from_rotvec(v)
        np.testing.assert_allclose(quat_rotate(q, np.array([0.3, -1.0, 2.0])),
                                   r.apply([0.3, -1.0, 2.0]), atol=1e-10)


def test_rotvec_to_quat_rejects_nonfinite():
    with pytest.raises(ValueError):
        rotvec_to_quat(np.array([np.nan, 0, 0]))


def test_quat_canonical_w_nonnegative(rng):
    for _ in range(100):
        q = quat_canonical(rng.normal(size=4))
        assert q[0] >= 0.0
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


# --- heading algebra ---------------------------------------------------------

def test_heading_compose_identity():
    h = np.array([1.0, 2.0, 0.3])
    np.testing.assert_allclose(heading_compose(heading_identity(), h), h)
    np.testing.assert_allclose(heading_compose(h, heading_identity()), h)


def test_heading_compose_matrix_oracle(rng):
    a = np.array([1.0, 0.0, np.pi / 2])
    b = np.array([1.0, 0.0, 0.0])
    got = heading_compose(a, b)
    want = mat4_to_heading(heading_to_mat4(a) @ heading_to_mat4(b))
    np.testing.assert_allclose(got, want, atol=1e-12)
    for _ in range(200):
        a = np.array([*rng.normal(size=2), rng.uniform(-np.pi, np.pi)])
        b = np.array([*rng.normal(size=2), rng.uniform(-np.pi, np.pi)])
        got = heading_compose(a, b)
        want = mat4_to_heading(heading_to_mat4(a) @ heading_to_mat4(b))
        np.testing.assert_allclose(got[:2], want[:2], atol=1e-9)
        assert abs(kin.wrap_angle(got[2] - want[2])) < 1e-9


def test_heading_inverse():
    np.testing.assert_allclose(heading_inverse(np.zeros(3)), np.zeros(3))
    np.testing.assert_allclose(heading_inverse(np.array([1.0, 0, 0])), [-1, 0, 0])


def test_heading_inverse_matrix_oracle(rng):
    for _ in range(200):
        h = np.array([*rng.normal(size=2), rng.uniform(-np.pi, np.pi)])
        got = heading_inverse(h)
        want = mat4_to_heading(np.linalg.inv(heading_to_mat4(h)))
        np.testing.assert_allclose(got[:2], want[:2], atol=1e-9)
        assert abs(kin.wrap_angle(got[2] - want[2])) < 1e-9
        np.testing.assert_allclose(heading_compose(h, got), np.zeros(3), atol=1e-9)


def test_heading_compose_associative(rng):
    for _ in range(200):
        a, b, c = (np.array([*rng.normal(size=2), rng.uniform(-np.pi, np.pi)])
                   for _ in range(3))
        left = heading_compose(heading_compose(a, b), c)
        right = heading_compose(a, heading_compose(b, c))
        np.testing.assert_allclose(left[:2], right[:2], atol=1e-9)
        assert abs(kin.wrap_angle(left[2] - right[2])) < 1e-9


def test_heading_apply_inv_trivial():
    p = np.array([1.0, 0.5, 2.0])
    q = quat_from_yaw(0.3)
    p2, q2 = heading_apply_inv(heading_identity(), p, q)
    np.testing.assert_allclose(p2, p)
    np.testing.assert_allclose(q2, q)
    np.testing.assert_allclose(
        heading_apply_inv(np.array([1.0, 0, 0]), np.array([1.0, 0, 0])),
        [0, 0, 0], atol=1e-12)


def test_heading_apply_roundtrip(rng):
    for _ in range(200):
        h = np.array([*rng.normal(size=2), rng.uniform(-np.pi, np.pi)])
        p = rng.normal(size=3)
        q = quat_canonical(rng.normal(size=4))
        lp, lq = heading_apply_inv(h, p, q)
        wp, wq = heading_apply(h, lp, lq)
        np.testing.assert_allclose(wp, p, atol=1e-9)
        assert kin.quat_angle_between(wq, q) < 1e-9


# --- forward kinematics -------------------------------------------------------

def test_fk_tpose(skel):
    pose = rest_pose(skel)
    pos, quat = fk_pose(skel, pose)
    # accumulate rest offsets by hand
    want = np.zeros((skel.n_joints, 3))
    want[0] = pose.root_pos
    for k in range(1, skel.n_joints):
        want[k] = want[skel.parents[k]] + skel.offsets[k]
    np.testing.assert_allclose(pos, want, atol=1e-12)
    np.testing.assert_allclose(quat, np.tile([1.0, 0, 0, 0], (skel.n_joints, 1)))


def test_fk_rejects_bad_shape(skel):
    with pytest.raises(ValueError):
        forward_kinematics(skel, np.zeros(3), kin.quat_identity(), np.zeros((3, 3)))


def test_fk_root_yaw_pi_reflects(skel):
    pose = rest_pose(skel)
    pos0, _ = fk_pose(skel, pose)
    pose.root_quat = quat_from_yaw(np.pi)
    pos1, _ = fk_pose(skel, pose)
    rp = pose.root_pos
    np.testing.assert_allclose(pos1[:, 0], 2 * rp[0] - pos0[:, 0], atol=1e-9)
    np.testing.assert_allclose(pos1[:, 2], 2 * rp[2] - pos0[:, 2], atol=1e-9)
    np.testing.assert_allclose(pos1[:, 1], pos0[:, 1], atol=1e-12)


def test_fk_three_joint_chain_matrix_oracle(skel):
    # drive the left arm chain with known 90-degree bends and verify against a
    # hand-built homogeneous-matrix chain (scipy rotations)
    pose = rest_pose(skel)
    sh, el, wr = skel.index("l_shoulder"), skel.index("l_elbow"), skel.index("l_wrist")
    rots = {sh: np.array([0, np.pi / 2, 0]), el: np.array([0, 0, np.pi / 2])}
    for j, v in rots.items():
        pose.joint_rot[j - 1] = v
    pos, quat = fk_pose(skel, pose)

    def chain_matrix(indices):
        m = np.eye(4)
        m[:3, 3] = pose.root_pos
        for k in indices:
            step = np.eye(4)
            step[:3, 3] = skel.offsets[k]
            rot = np.eye(4)
            rot[:3, :3] = Rotation.from_rotvec(rots.get(k, np.zeros(3))).as_matrix()
            m = m @ step @ rot
        return m

    chain = [skel.index(n) for n in ("spine", "chest", "l_shoulder", "l_elbow", "l_wrist")]
    m = chain_matrix(chain)
    np.testing.assert_allclose(pos[wr], m[:3, 3], atol=1e-9)
    got_rot = scipy_quat(quat[wr]).as_matrix()
    np.testing.assert_allclose(got_rot, m[:3, :3], atol=1e-9)


def test_fk_translation_equivariance(skel, rng):
    pose = rest_pose(skel)
    pose.joint_rot = rng.normal(scale=0.3, size=pose.joint_rot.shape)
    pos0, _ = fk_pose(skel, pose)
    d = np.array([0.7, -0.2, 1.5])
    pose.root_pos = pose.root_pos + d
    pos1, _ = fk_pose(skel, pose)
    np.testing.assert_allclose(pos1, pos0 + d, atol=1e-12)


def test_fk_yaw_equivariance(skel, rng):
    pose = rest_pose(skel)
    pose.joint_rot = rng.normal(scale=0.3, size=pose.joint_rot.shape)
    h0 = extract_heading(pose)
    delta = 0.8
    pose2 = pose.copy()
    pose2.root_quat = quat_canonical(quat_mul(quat_from_yaw(delta), pose.root_quat))
    h1 = extract_heading(pose2)
    want = heading_compose(np.array([0.0, 0.0, delta]), h0)
    np.testing.assert_allclose(h1[:2], want[:2], atol=1e-9)
    assert abs(kin.wrap_angle(h1[2] - want[2])) < 1e-9


# --- heading extraction -------------------------------------------------------

def test_extract_heading_tpose(skel):
    pose = rest_pose(skel)
    pose.root_pos = np.array([0.0, 0.98, 0.0])
    h = extract_heading(pose)
    np.testing.assert_allclose(h, [0, 0, 0], atol=1e-12)
    pose.root_pos = np.array([2.0, 1.1, -1.0])
    np.testing.assert_allclose(extract_heading(pose), [2, -1, 0], atol=1e-12)


def test_extract_heading_pitch_then_yaw(skel):
    pose = rest_pose(skel)
    pitch = Rotation.from_euler("x", 30, degrees=True)
    yaw = Rotation.from_euler("y", 45, degrees=True)
    r = yaw * pitch
    x, y, z, w = r.as_quat()
    pose.root_quat = quat_canonical(np.array([w, x, y, z]))
    h = extract_heading(pose)
    # oracle: project the rotated facing vector onto the ground plane
    f = r.apply([0, 0, 1])
    want = np.arctan2(f[0], f[2])
    assert abs(h[2] - want) < 1e-9
    assert abs(h[2] - np.deg2rad(45)) < 1e-6


def test_extract_heading_degenerate_fallback(skel):
    pose = rest_pose(skel)
    pose.root_quat = rotvec_to_quat(np.array([-np.pi / 2, 0, 0]))  # facing straight up
    with pytest.raises(ValueError):
        extract_heading(pose)
    h = extract_heading(pose, fallback=np.array([0.0, 0.0, 0.4]))
    assert h[2] == pytest.approx(0.4)


# --- aggregated upper-body state ----------------------------------------------

def test_aggregate_static(skel):
    pose = rest_pose(skel)
    h = extract_heading(pose)
    z = aggregate_upper(skel, pose, pose, h, dt=1 / 30)
    np.testing.assert_allclose(z.com_vel, 0, atol=1e-12)
    np.testing.assert_allclose(z.ang_mom, 0, atol=1e-12)
    np.testing.assert_allclose(z.delta_heading, 0, atol=1e-12)


def test_aggregate_rigid_translation(skel):
    dt = 1 / 30
    d = np.array([0.05, 0.0, 0.0])
    p0 = rest_pose(skel)
    p1 = rest_pose(skel)
    p1.root_pos = p0.root_pos + d
    h0 = extract_heading(p0)
    z = aggregate_upper(skel, p0, p1, h0, dt)
    np.testing.assert_allclose(z.com_vel, d / dt, atol=1e-9)
    np.testing.assert_allclose(z.ang_mom, 0, atol=1e-9)
    np.testing.assert_allclose(z.delta_heading, [d[0], 0, 0], atol=1e-9)


def test_aggregate_arm_swing_momentum_oracle(skel):
    # independent per-body momentum sum using scipy rotations and its own FK
    dt = 1 / 30
    p0 = rest_pose(skel)
    p1 = rest_pose(skel)
    sh = skel.index("l_shoulder")
    p0.joint_rot[sh - 1] = np.array([0.0, 0.0, 0.2])
    p1.joint_rot[sh - 1] = np.array([0.0, 0.0, 0.35])
    h_prev = extract_heading(p0)
    z = aggregate_upper(skel, p0, p1, h_prev, dt)

    def oracle_fk(pose):
        pos = np.zeros((skel.n_joints, 3))
        rots = [Rotation.identity()] * skel.n_joints
        pos[0] = pose.root_pos
        w, x, y, zz = pose.root_quat
        rots[0] = Rotation.from_quat([x, y, zz, w])
        for k in range(1, skel.n_joints):
            par = skel.parents[k]
            pos[k] = pos[par] + rots[par].apply(skel.offsets[k])
            rots[k] = rots[par] * Rotation.from_rotvec(pose.joint_rot[k - 1])
        return pos, rots

    pos0, rots0 = oracle_fk(p0)
    pos1, rots1 = oracle_fk(p1)
    idx = skel.upper
    masses = skel.masses[idx]
    com0 = np.array([pos0[k] + rots0[k].apply(skel.coms[k]) for k in idx])
    com1 = np.array([pos1[k] + rots1[k].apply(skel.coms[k]) for k in idx])
    vel = (com1 - com0) / dt
    centroid = (masses[:, None] * com1).sum(axis=0) / masses.sum()
    ang = np.zeros(3)
    for i, k in enumerate(idx):
        ang += masses[i] * np.cross(com1[i] - centroid, vel[i])
        omega = (rots1[k] * rots0[k].inv()).as_rotvec() / dt
        inertia_w = rots1[k].as_matrix() @ skel.inertias[k] @ rots1[k].as_matrix().T
        ang += inertia_w @ omega

    # poses share the identity heading, so world == heading frame here
    np.testing.assert_allclose(z.ang_mom, ang, atol=1e-9)
    assert np.linalg.norm(z.ang_mom) > 1e-4  # the swing actually moves momentum


def test_aggregate_rejects_bad_dt(skel):
    pose = rest_pose(skel)
    with pytest.raises(ValueError):
        aggregate_upper(skel, pose, pose, extract_heading(pose), dt=0.0)


# --- contact IK ---------------------------------------------------------------

def test_contact_ik_identity_cases(skel):
    pose = rest_pose(skel)
    pos, _ = fk_pose(skel, pose)
    ankle = skel.index("l_ankle")
    res = contact_ik(skel, pose, {"left": 1.0, "right": 0.0},
                     {"left": pos[ankle].copy()})
    np.testing.assert_allclose(res.pose.joint_rot, pose.joint_rot, atol=1e-9)
    assert res.clamped == (False, False)

    res = contact_ik(skel, pose, {"left": 0.0, "right": 0.0}, {})
    np.testing.assert_allclose(res.pose.joint_rot, pose.joint_rot, atol=1e-12)


def test_contact_ik_reaches_target(skel):
    pose = rest_pose(skel)
    # slight crouch so the chain is not singular
    pose.root_pos = pose.root_pos + np.array([0.0, -0.05, 0.0])
    pose.joint_rot[skel.index("l_knee") - 1] = np.array([0.4, 0.0, 0.0])
    pos, _ = fk_pose(skel, pose)
    ankle = skel.index("l_ankle")
    target = pos[ankle] + np.array([0.0, 0.0, 0.05])
    res = contact_ik(skel, pose, {"left": 1.0, "right": 0.0}, {"left": target})
    new_pos, _ = fk_pose(skel, res.pose)
    np.testing.assert_allclose(new_pos[ankle], target, atol=1e-6)
    # untouched right leg
    r_hip = skel.index("r_hip")
    np.testing.assert_allclose(res.pose.joint_rot[r_hip - 1:r_hip + 3],
                               pose.joint_rot[r_hip - 1:r_hip + 3], atol=1e-12)


def test_contact_ik_idempotent(skel):
    pose = rest_pose(skel)
    pose.root_pos = pose.root_pos + np.array([0.0, -0.04, 0.0])
    pos, _ = fk_pose(skel, pose)
    target = pos[skel.index("l_ankle")] + np.array([0.03, 0.0, 0.04])
    once = contact_ik(skel, pose, {"left": 1.0, "right": 0.0}, {"left": target}).pose
    twice = contact_ik(skel, once, {"left": 1.0, "right": 0.0}, {"left": target}).pose
    np.testing.assert_allclose(twice.joint_rot, once.joint_rot, atol=1e-9)


def test_contact_ik_clamps_unreachable(skel):
    pose = rest_pose(skel)
    pos, _ = fk_pose(skel, pose)
    hip = skel.index("l_hip")
    target = pos[hip] + np.array([0.0, -2.0, 1.0])  # beyond leg length
    res = contact_ik(skel, pose, {"left": 1.0, "right": 0.0}, {"left": target})
    assert res.clamped[0]
    new_pos, _ = fk_pose(skel, res.pose)
    leg = np.linalg.norm(skel.offsets[skel.index("l_knee")]) + \
        np.linalg.norm(skel.offsets[skel.index("l_ankle")])
    reach = np.linalg.norm(new_pos[skel.index("l_ankle")] - new_pos[hip])
    assert reach <= leg + 1e-9


def test_two_bone_ik_preserves_end_orientation(skel, rng):
    pose = rest_pose(skel)
    pose.joint_rot[skel.index("l_knee") - 1] = np.array([0.5, 0.0, 0.0])
    _, quat0 = fk_pose(skel, pose)
    ankle = skel.index("l_ankle")
    pos, _ = fk_pose(skel, pose)
    new_pose, _ = two_bone_ik(skel, pose, ankle, pos[ankle] + np.array([0.02, 0.01, 0.06]))
    _, quat1 = fk_pose(skel, new_pose)
    assert kin.quat_angle_between(quat0[ankle], quat1[ankle]) < 1e-8


# --- skeleton sanity ------------------------------------------------------------

def test_skeleton_invariants(skel):
    assert skel.n_joints == 19
    assert abs(skel.total_mass - 63.0) < 1e-9
    assert abs(skel.total_height - 1.75) < 1e-12
    assert len(skel.upper) == 10
    assert len(skel.lower) == 8
    assert set(skel.upper) | set(skel.lower) == set(range(1, 19))
    # feet touch the ground exactly in the rest pose
    pose = rest_pose(skel)
    pos, quat = fk_pose(skel, pose)
    for sph in skel.spheres:
        center = pos[sph.joint] + quat_rotate(quat[sph.joint], sph.offset)
        clearance = center[1] - sph.radius
        if sph.foot is not None:
            assert abs(clearance) < 1e-9
        else:
            assert clearance > 0.01


def test_body_com_total_height(skel):
    pose = rest_pose(skel)
    pos, quat = fk_pose(skel, pose)
    coms = body_com_world(skel, pos, quat)
    total_com = (skel.masses[:, None] * coms).sum(axis=0) / skel.total_mass
    assert 0.8 < total_com[1] < 1.2  # roughly mid-body
    head = skel.index("head")
    assert abs(pos[head][1] + 0.18 - skel.total_height) < 1e-9
