"""Heading-local state encodings shared by the predictor, policy and data tools.

A character state is exchanged between modules as flat float vectors, always
expressed relative to a heading frame so the networks never see absolute
world placement:

- tracker vector ``o`` (21,):  H, L, R trackers as local position (3) + local
  quaternion (4) each.
- aggregate vector ``z`` (12,): upper-body centroid position (3), velocity (3),
  angular momentum divided by the upper-body mass (3), heading delta (3).
  The heading delta is stored as a per-second rate (delta times the frame
  rate) so its numeric scale matches the other fields; consumers divide by
  ``Z_DH_SCALE`` before composing headings.
- ``g_lo`` (90,): for each of the 8 leg joints position/velocity/orientation
  rotvec (9 each = 72), foot contact labels (2), echoed ``z`` (12), root
  residual (height + tilt rotvec = 4).
- ``g_up`` (90,): the 10 upper joints, 9 values each.

This module also provides batched quaternion/FK helpers (leading time axis)
used to turn motion clips into per-frame feature arrays efficiently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import (
    Pose,
    Skeleton,
    heading_compose,
    heading_inverse,
    quat_canonical,
    quat_from_yaw,
    quat_mul,
    REST_ROOT_HEIGHT,
)

O_DIM = 21
Z_DIM = 12
G_LO_DIM = 90
G_UP_DIM = 90

# slices inside g_lo
LO_JOINTS = slice(0, 72)
LO_CONTACTS = slice(72, 74)
LO_Z = slice(74, 86)
LO_ROOT = slice(86, 90)
# slices inside z
Z_DELTA_H = slice(9, 12)
Z_DH_SCALE = 30.0   # heading deltas are stored as per-second rates


# ---------------------------------------------------------------------------
# batched quaternion helpers (leading batch axis, (..., 3) / (..., 4))
# ---------------------------------------------------------------------------

def bquat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def bquat_canonical(q):
    q = bquat_normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def bquat_mul(a, b):
    w1, x1, y1, z1 = (a[..., i] for i in range(4))
    w2, x2, y2, z2 = (b[..., i] for i in range(4))
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def bquat_conj(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def bquat_rotate(q, v):
    u = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def brotvec_to_quat(v):
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    small = angle < 1e-10
    safe = np.where(small, 1.0, angle)
    axis = v / safe
    half = 0.5 * angle
    q = np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)
    approx = np.concatenate([np.ones_like(angle), 0.5 * v], axis=-1)
    q = np.where(small, approx, q)
    return bquat_normalize(q)


def bquat_to_rotvec(q):
    q = bquat_canonical(q)
    sin_half = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(sin_half, q[..., :1])
    small = sin_half < 1e-10
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, sin_half))
    return q[..., 1:] * scale


def bquat_from_yaw(theta):
    theta = np.asarray(theta)
    half = 0.5 * theta
    zeros = np.zeros_like(half)
    return np.stack([np.cos(half), zeros, np.sin(half), zeros], axis=-1)


def byaw_of_quat(q, eps=1e-6, fallback=0.0):
    f = bquat_rotate(q, np.broadcast_to(np.array([0.0, 0.0, 1.0]), q.shape[:-1] + (3,)))
    planar = np.hypot(f[..., 0], f[..., 2])
    yaw = np.arctan2(f[..., 0], f[..., 2])
    return np.where(planar < eps, fallback, yaw)


def batch_fk(skel: Skeleton, root_pos, root_quat, joint_rot):
    """Forward kinematics over a whole clip: (N,3),(N,4),(N,J-1,3) -> (N,J,3),(N,J,4)."""
    n_frames = root_pos.shape[0]
    nj = skel.n_joints
    pos = np.zeros((n_frames, nj, 3))
    quat = np.zeros((n_frames, nj, 4))
    pos[:, 0] = root_pos
    quat[:, 0] = bquat_canonical(root_quat)
    local = brotvec_to_quat(joint_rot)
    parents = skel.parents
    offsets = skel.offsets
    for k in range(1, nj):
        p = parents[k]
        pos[:, k] = pos[:, p] + bquat_rotate(quat[:, p], offsets[k][None, :])
        quat[:, k] = bquat_canonical(bquat_mul(quat[:, p], local[:, k - 1]))
    return pos, quat


def heading_local_point(h, p):
    """Batched world->heading-frame point transform; h (...,3), p (...,3)."""
    c, s = np.cos(h[..., 2]), np.sin(h[..., 2])
    dx = p[..., 0] - h[..., 0]
    dz = p[..., 2] - h[..., 1]
    return np.stack([c * dx - s * dz, p[..., 1], s * dx + c * dz], axis=-1)


def heading_local_vec(h, v):
    c, s = np.cos(h[..., 2]), np.sin(h[..., 2])
    return np.stack([c * v[..., 0] - s * v[..., 2], v[..., 1],
                     s * v[..., 0] + c * v[..., 2]], axis=-1)


def heading_local_quat(h, q):
    return bquat_canonical(bquat_mul(bquat_from_yaw(-h[..., 2]), q))


# ---------------------------------------------------------------------------
# per-clip feature arrays
# ---------------------------------------------------------------------------

@dataclass
class ClipFeatures:
    """Ground-truth per-frame feature vectors extracted from a motion clip."""
    heading: np.ndarray       # (N, 3) heading frame per frame
    o_world: np.ndarray       # (N, 3, 7) tracker world pose (pos, quat) H/L/R
    o_in_prev: np.ndarray     # (N, 21) trackers in the previous frame's heading
    o_in_cur: np.ndarray      # (N, 21) trackers in the current frame's heading
    z: np.ndarray             # (N, 12)
    g_lo: np.ndarray          # (N, 90)
    g_up: np.ndarray          # (N, 90)
    contacts: np.ndarray      # (N, 2)
    joint_pos: np.ndarray     # (N, J, 3) world (for FK/MPJPE oracles)

    def __len__(self):
        return self.heading.shape[0]


def tracker_joint_indices(skel: Skeleton) -> list[int]:
    return [skel.index("neck"), skel.index("l_wrist"), skel.index("r_wrist")]


def upper_mass(skel: Skeleton) -> float:
    return float(skel.masses[skel.upper].sum())


def encode_trackers_local(h: np.ndarray, pos: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """(...,3,3) positions and (...,3,4) quats into a local 21-vector."""
    hq = h[..., None, :]
    p_local = heading_local_point(hq, pos)
    q_local = heading_local_quat(hq, quat)
    return np.concatenate([p_local, q_local], axis=-1).reshape(h.shape[:-1] + (O_DIM,))


def decode_trackers_local(h: np.ndarray, o_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of encode_trackers_local: local 21-vector back to world pose."""
    v = o_vec.reshape(o_vec.shape[:-1] + (3, 7))
    p_local, q_local = v[..., :3], v[..., 3:]
    hq = h[..., None, :]
    c, s = np.cos(hq[..., 2]), np.sin(hq[..., 2])
    x = hq[..., 0] + c * p_local[..., 0] + s * p_local[..., 2]
    z = hq[..., 1] - s * p_local[..., 0] + c * p_local[..., 2]
    pos = np.stack([x, p_local[..., 1], z], axis=-1)
    quat = bquat_canonical(bquat_mul(bquat_from_yaw(np.broadcast_to(hq[..., 2], q_local.shape[:-1])), q_local))
    return pos, quat


def clip_features(skel: Skeleton, fps: float, root_pos, root_quat, joint_rot,
                  contacts: np.ndarray | None = None) -> ClipFeatures:
    """Turn raw clip arrays into the per-frame training features.

    Velocities are central finite differences (one-sided at the edges).
    Contact labels default to the height+speed threshold rule.
    """
    n = root_pos.shape[0]
    dt = 1.0 / fps
    pos, quat = batch_fk(skel, root_pos, root_quat, joint_rot)

    yaw = byaw_of_quat(quat[:, 0])
    heading = np.stack([root_pos[:, 0], root_pos[:, 2], yaw], axis=-1)
    h_prev = np.vstack([heading[:1], heading[:-1]])

    vel = np.gradient(pos, dt, axis=0) if n > 1 else np.zeros_like(pos)

    # tracker world poses at neck / wrists
    tidx = tracker_joint_indices(skel)
    o_world = np.concatenate([pos[:, tidx], quat[:, tidx]], axis=-1)
    o_in_prev = encode_trackers_local(h_prev, pos[:, tidx], quat[:, tidx])
    o_in_cur = encode_trackers_local(heading, pos[:, tidx], quat[:, tidx])

    # aggregated upper-body state (backward differences, matching step semantics)
    up = skel.upper
    masses = skel.masses[up]
    m_up = masses.sum()
    com = pos[:, up] + bquat_rotate(quat[:, up], skel.coms[up][None])
    com_prev = np.vstack([com[:1], com[:-1]])
    com_vel = (com - com_prev) / dt
    centroid = (masses[None, :, None] * com).sum(axis=1) / m_up
    cent_vel = (masses[None, :, None] * com_vel).sum(axis=1) / m_up
    quat_prev = np.vstack([quat[:1], quat[:-1]])
    omega = bquat_to_rotvec(bquat_mul(quat[:, up], bquat_conj(quat_prev[:, up]))) / dt
    rot = _bquat_to_mat(quat[:, up])
    inertia_w = np.einsum("njab,jbc,njdc->njad", rot, skel.inertias[up], rot)
    ang = (masses[None, :, None] * np.cross(com - centroid[:, None], com_vel)).sum(axis=1)
    ang = ang + np.einsum("njab,njb->na", inertia_w, omega)

    dh = np.stack([_compose_delta(h_prev[i], heading[i]) for i in range(n)]) if n else np.zeros((0, 3))
    z = np.concatenate([
        heading_local_point(heading, centroid),
        heading_local_vec(heading, cent_vel),
        heading_local_vec(heading, ang) / m_up,
        dh * Z_DH_SCALE,
    ], axis=-1)

    if contacts is None:
        contacts = threshold_contacts(skel, pos, vel)

    g_lo = encode_g_lo(skel, heading, root_pos, root_quat, pos, vel, quat, contacts, z)
    g_up = encode_g_up(skel, heading, pos, vel, quat)

    return ClipFeatures(heading=heading, o_world=o_world, o_in_prev=o_in_prev,
                        o_in_cur=o_in_cur, z=z, g_lo=g_lo, g_up=g_up,
                        contacts=contacts, joint_pos=pos)


def _compose_delta(h_prev, h_cur):
    return heading_compose(heading_inverse(h_prev), h_cur)


def _bquat_to_mat(q):
    w, x, y, z = (q[..., i] for i in range(4))
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], axis=-1)
    row1 = np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], axis=-1)
    row2 = np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


CONTACT_HEIGHT = 0.05     # m, foot clearance below this counts as grounded
CONTACT_SPEED = 0.20      # m/s planar speed bound for a grounded foot


def foot_clearance(skel: Skeleton, pos: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """(N, 2) lowest contact-sphere clearance per foot (left, right)."""
    n = pos.shape[0]
    out = np.full((n, 2), np.inf)
    for sph in skel.spheres:
        if sph.foot is None:
            continue
        center = pos[:, sph.joint] + bquat_rotate(quat[:, sph.joint], sph.offset[None])
        clear = center[:, 1] - sph.radius
        col = 0 if sph.foot == "left" else 1
        out[:, col] = np.minimum(out[:, col], clear)
    return out


def threshold_contacts(skel: Skeleton, pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Contact labels from foot height and planar ankle speed thresholds."""
    # clearance from joint positions only (sphere offsets rotated by identity);
    # accurate enough for labeling since foot orientation stays near level
    clear = np.full((pos.shape[0], 2), np.inf)
    for sph in skel.spheres:
        if sph.foot is None:
            continue
        center = pos[:, sph.joint] + sph.offset[None]
        col = 0 if sph.foot == "left" else 1
        clear[:, col] = np.minimum(clear[:, col], center[:, 1] - sph.radius)
    labels = np.zeros((pos.shape[0], 2))
    for col, side in enumerate(("left", "right")):
        ankle = skel.index(f"{side[0]}_ankle")
        speed = np.hypot(vel[:, ankle, 0], vel[:, ankle, 2])
        labels[:, col] = ((clear[:, col] < CONTACT_HEIGHT) &
                          (speed < CONTACT_SPEED)).astype(float)
    return labels


def encode_g_lo(skel, heading, root_pos, root_quat, pos, vel, quat, contacts, z):
    idx = skel.lower
    hj = heading[:, None, :]
    p = heading_local_point(hj, pos[:, idx])
    v = heading_local_vec(hj, vel[:, idx])
    q = bquat_to_rotvec(heading_local_quat(hj, quat[:, idx]))
    per_joint = np.concatenate([p, v, q], axis=-1).reshape(len(heading), -1)
    tilt = bquat_to_rotvec(heading_local_quat(heading, root_quat))
    root_res = np.concatenate([root_pos[:, 1:2], tilt], axis=-1)
    return np.concatenate([per_joint, contacts, z, root_res], axis=-1)


def encode_g_up(skel, heading, pos, vel, quat):
    idx = skel.upper
    hj = heading[:, None, :]
    p = heading_local_point(hj, pos[:, idx])
    v = heading_local_vec(hj, vel[:, idx])
    q = bquat_to_rotvec(heading_local_quat(hj, quat[:, idx]))
    return np.concatenate([p, v, q], axis=-1).reshape(len(heading), -1)


def decode_pose(skel: Skeleton, g_lo: np.ndarray, g_up: np.ndarray,
                h: np.ndarray) -> Pose:
    """Reconstruct a kinematic pose from predicted state vectors.

    The root comes from the heading plus the g_lo root residual; joint local
    rotations are recovered from the heading-frame bone orientations, so the
    result is FK-consistent by construction.
    """
    root_h = float(g_lo[LO_ROOT][0])
    tilt = g_lo[LO_ROOT][1:4]
    root_quat = quat_canonical(quat_mul(quat_from_yaw(h[2]),
                                        _rotvec_to_quat1(tilt)))
    root_pos = np.array([h[0], root_h, h[1]])

    world_q = np.zeros((skel.n_joints, 4))
    world_q[0] = root_quat
    lo_q = g_lo[LO_JOINTS].reshape(8, 9)[:, 6:9]
    up_q = g_up.reshape(10, 9)[:, 6:9]
    yaw_q = quat_from_yaw(h[2])
    for i, j in enumerate(skel.upper):
        world_q[j] = quat_canonical(quat_mul(yaw_q, _rotvec_to_quat1(up_q[i])))
    for i, j in enumerate(skel.lower):
        world_q[j] = quat_canonical(quat_mul(yaw_q, _rotvec_to_quat1(lo_q[i])))

    from .kinematics import local_rots_from_bone_orients
    joint_rot = local_rots_from_bone_orients(skel, world_q)
    return Pose(root_pos=root_pos, root_quat=root_quat, joint_rot=joint_rot)


def _rotvec_to_quat1(v):
    from .kinematics import rotvec_to_quat
    return rotvec_to_quat(np.asarray(v, dtype=float))


def g_positions_world(skel: Skeleton, g_lo: np.ndarray, g_up: np.ndarray,
                      h: np.ndarray) -> np.ndarray:
    """World positions of all joints as carried in the predicted p slots."""
    out = np.zeros((skel.n_joints, 3))
    root_h = float(g_lo[LO_ROOT.start])
    out[0] = np.array([h[0], root_h, h[1]])
    lo = g_lo[LO_JOINTS].reshape(8, 9)[:, :3]
    up = g_up.reshape(10, 9)[:, :3]
    c, s = np.cos(h[2]), np.sin(h[2])

    def to_world(p):
        return np.stack([h[0] + c * p[..., 0] + s * p[..., 2], p[..., 1],
                         h[1] - s * p[..., 0] + c * p[..., 2]], axis=-1)

    for i, j in enumerate(skel.lower):
        out[j] = to_world(lo[i])
    for i, j in enumerate(skel.upper):
        out[j] = to_world(up[i])
    return out
