"""Rotation algebra, skeleton model, forward kinematics and heading-frame tools.

Conventions
-----------
- World is y-up, right-handed; meters / seconds / radians throughout.
- Quaternions are (w, x, y, z), unit norm, canonicalized to w >= 0.
- Rotation vectors are axis * angle, canonicalized to norm <= pi.
- A heading frame is a planar rigid transform stored as a length-3 array
  (p_x, p_z, theta_y): translation in the ground plane plus yaw about the
  vertical axis, with theta wrapped to (-pi, pi].
- The default character faces +z in its rest pose, so yaw 0 means "facing +z"
  and positive yaw turns the facing direction toward +x.

All functions here are pure and operate on plain numpy arrays, so they are
safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternion / rotation-vector algebra
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        return quat_identity()
    return q / n


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Unit norm with w >= 0 so q and -q map to the same representative."""
    q = quat_normalize(q)
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 3-vector v by unit quaternion q."""
    w = q[0]
    u = q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotvec_to_quat(v: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector to unit quaternion. Raises on non-finite input."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite rotation vector")
    angle = np.linalg.norm(v)
    if angle < 1e-10:
        # first-order expansion keeps the map smooth through zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to canonical rotation vector (norm <= pi)."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite quaternion")
    q = quat_canonical(q)
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-10:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(sin_half, q[0])
    return q[1:] * (angle / sin_half)


def rotvec_canonical(v: np.ndarray) -> np.ndarray:
    """Wrap so the equivalent rotation has angle <= pi."""
    return quat_to_rotvec(rotvec_to_quat(v))


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of q in [0, pi]."""
    q = quat_canonical(q)
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), q[0])


def quat_angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return quat_angle(quat_mul(a, quat_conj(b)))


def quat_from_yaw(theta: float) -> np.ndarray:
    return np.array([np.cos(0.5 * theta), 0.0, np.sin(0.5 * theta), 0.0])


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(a + t * (b - a))
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    so = np.sin(omega)
    return (np.sin((1.0 - t) * omega) / so) * a + (np.sin(t * omega) / so) * b


def quat_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.cross(a, b)
    d = float(np.dot(a, b))
    if d < -1.0 + 1e-12:
        # antiparallel: rotate pi about any axis orthogonal to a
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-8:
            axis = np.cross(a, np.array([0.0, 1.0, 0.0]))
        axis /= np.linalg.norm(axis)
        return np.concatenate(([0.0], axis))
    q = np.concatenate(([1.0 + d], c))
    return quat_normalize(q)


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return float(wrapped)


def yaw_of_quat(q: np.ndarray, eps: float = 1e-6) -> float | None:
    """Yaw of the facing direction (rotated +z projected onto the ground plane).

    Returns None when the facing direction is vertical within eps, in which
    case the caller should fall back to its previous heading.
    """
    f = quat_rotate(q, np.array([0.0, 0.0, 1.0]))
    planar = np.hypot(f[0], f[2])
    if planar < eps:
        return None
    return float(np.arctan2(f[0], f[2]))


# ---------------------------------------------------------------------------
# heading frames
# ---------------------------------------------------------------------------

def heading_identity() -> np.ndarray:
    return np.zeros(3)


def heading_make(p_x: float, p_z: float, theta_y: float) -> np.ndarray:
    return np.array([p_x, p_z, wrap_angle(theta_y)])


def heading_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Planar rigid-transform composition a then b (b expressed in a)."""
    c, s = np.cos(a[2]), np.sin(a[2])
    return np.array([
        a[0] + c * b[0] + s * b[1],
        a[1] - s * b[0] + c * b[1],
        wrap_angle(a[2] + b[2]),
    ])


def heading_inverse(h: np.ndarray) -> np.ndarray:
    c, s = np.cos(h[2]), np.sin(h[2])
    return np.array([
        -(c * h[0] - s * h[1]),
        -(s * h[0] + c * h[1]),
        wrap_angle(-h[2]),
    ])


def heading_apply(h: np.ndarray, point: np.ndarray, quat: np.ndarray | None = None):
    """Map a local-frame point (and optionally orientation) to world frame."""
    c, s = np.cos(h[2]), np.sin(h[2])
    p = np.array([
        h[0] + c * point[0] + s * point[2],
        point[1],
        h[1] - s * point[0] + c * point[2],
    ])
    if quat is None:
        return p
    return p, quat_canonical(quat_mul(quat_from_yaw(h[2]), quat))


def heading_apply_inv(h: np.ndarray, point: np.ndarray, quat: np.ndarray | None = None):
    """Map a world point (and optionally orientation) into the heading frame."""
    c, s = np.cos(h[2]), np.sin(h[2])
    dx = point[0] - h[0]
    dz = point[2] - h[1]
    p = np.array([c * dx - s * dz, point[1], s * dx + c * dz])
    if quat is None:
        return p
    return p, quat_canonical(quat_mul(quat_from_yaw(-h[2]), quat))


def heading_rotate_inv(h: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Rotate a free vector (velocity, momentum) into the heading frame."""
    c, s = np.cos(h[2]), np.sin(h[2])
    return np.array([c * vec[0] - s * vec[2], vec[1], s * vec[0] + c * vec[2]])


def heading_rotate(h: np.ndarray, vec: np.ndarray) -> np.ndarray:
    c, s = np.cos(h[2]), np.sin(h[2])
    return np.array([c * vec[0] + s * vec[2], vec[1], -s * vec[0] + c * vec[2]])


# ---------------------------------------------------------------------------
# skeleton
# ---------------------------------------------------------------------------

UPPER = "up"
LOWER = "lo"
ROOT = "root"


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: np.ndarray          # joint origin in the parent's frame (rest)
    mass: float
    com: np.ndarray             # body COM in this joint's frame
    inertia: np.ndarray         # 3x3 about the COM, joint-local axes
    group: str                  # "root" | "up" | "lo"


@dataclass(frozen=True)
class ContactSphere:
    joint: int
    offset: np.ndarray
    radius: float
    foot: str | None            # "left" | "right" | None


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[Joint, ...]
    spheres: tuple[ContactSphere, ...]
    total_height: float

    def __post_init__(self):
        for k, j in enumerate(self.joints):
            if k == 0:
                assert j.parent < 0
            else:
                assert 0 <= j.parent < k, "joints must be topologically ordered"
        groups = {j.group for j in self.joints[1:]}
        assert groups <= {UPPER, LOWER}

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([j.parent for j in self.joints])

    @property
    def offsets(self) -> np.ndarray:
        return np.stack([j.offset for j in self.joints])

    @property
    def masses(self) -> np.ndarray:
        return np.array([j.mass for j in self.joints])

    @property
    def coms(self) -> np.ndarray:
        return np.stack([j.com for j in self.joints])

    @property
    def inertias(self) -> np.ndarray:
        return np.stack([j.inertia for j in self.joints])

    @property
    def total_mass(self) -> float:
        return float(sum(j.mass for j in self.joints))

    @property
    def upper(self) -> list[int]:
        return [k for k, j in enumerate(self.joints) if j.group == UPPER]

    @property
    def lower(self) -> list[int]:
        return [k for k, j in enumerate(self.joints) if j.group == LOWER]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def foot_joints(self) -> dict[str, list[int]]:
        out = {"left": [], "right": []}
        for sph in self.spheres:
            if sph.foot is not None and sph.joint not in out[sph.foot]:
                out[sph.foot].append(sph.joint)
        return out


def _cylinder_inertia(mass: float, length: float, radius: float, axis: np.ndarray) -> np.ndarray:
    """Solid cylinder about its COM with symmetry axis `axis` (unit)."""
    i_axial = 0.5 * mass * radius * radius
    i_perp = mass * (3.0 * radius * radius + length * length) / 12.0
    axis = np.asarray(axis, dtype=float)
    a = np.outer(axis, axis)
    return i_axial * a + i_perp * (np.eye(3) - a)


_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])


def default_skeleton() -> Skeleton:
    """Canonical 19-joint humanoid, 1.75 m tall, 63 kg.

    Left is +x, up is +y, the rest pose faces +z with arms in a T.
    Mass split uses standard biomechanical segment fractions.
    """
    M = 63.0

    def J(name, parent, off, frac, com, length, radius, axis, group):
        mass = frac * M
        return Joint(name, parent, np.array(off, dtype=float), mass,
                     np.array(com, dtype=float),
                     _cylinder_inertia(mass, length, radius, axis), group)

    joints = (
        J("pelvis", -1, (0, 0, 0), 0.14, (0, 0.02, 0), 0.20, 0.12, _Y, ROOT),
        J("spine", 0, (0, 0.14, 0), 0.12, (0, 0.08, 0), 0.16, 0.11, _Y, UPPER),
        J("chest", 1, (0, 0.16, 0), 0.17, (0, 0.09, 0), 0.17, 0.12, _Y, UPPER),
        J("neck", 2, (0, 0.17, 0), 0.03, (0, 0.06, 0), 0.12, 0.05, _Y, UPPER),
        J("head", 3, (0, 0.12, 0), 0.08, (0, 0.09, 0), 0.18, 0.09, _Y, UPPER),
        J("l_shoulder", 2, (0.18, 0.12, 0), 0.030, (0.135, 0, 0), 0.27, 0.045, _X, UPPER),
        J("l_elbow", 5, (0.27, 0, 0), 0.020, (0.125, 0, 0), 0.25, 0.04, _X, UPPER),
        J("l_wrist", 6, (0.25, 0, 0), 0.008, (0.07, 0, 0), 0.14, 0.04, _X, UPPER),
        J("r_shoulder", 2, (-0.18, 0.12, 0), 0.030, (-0.135, 0, 0), 0.27, 0.045, _X, UPPER),
        J("r_elbow", 8, (-0.27, 0, 0), 0.020, (-0.125, 0, 0), 0.25, 0.04, _X, UPPER),
        J("r_wrist", 9, (-0.25, 0, 0), 0.008, (-0.07, 0, 0), 0.14, 0.04, _X, UPPER),
        J("l_hip", 0, (0.09, -0.08, 0), 0.105, (0, -0.22, 0), 0.44, 0.07, _Y, LOWER),
        J("l_knee", 11, (0, -0.44, 0), 0.050, (0, -0.20, 0), 0.40, 0.05, _Y, LOWER),
        J("l_ankle", 12, (0, -0.40, 0), 0.015, (0, -0.02, 0.05), 0.16, 0.035, _Z, LOWER),
        J("l_toe", 13, (0, -0.03, 0.13), 0.002, (0, 0, 0.04), 0.07, 0.024, _Z, LOWER),
        J("r_hip", 0, (-0.09, -0.08, 0), 0.105, (0, -0.22, 0), 0.44, 0.07, _Y, LOWER),
        J("r_knee", 15, (0, -0.44, 0), 0.050, (0, -0.20, 0), 0.40, 0.05, _Y, LOWER),
        J("r_ankle", 16, (0, -0.40, 0), 0.015, (0, -0.02, 0.05), 0.16, 0.035, _Z, LOWER),
        J("r_toe", 17, (0, -0.03, 0.13), 0.002, (0, 0, 0.04), 0.07, 0.024, _Z, LOWER),
    )
    names = [j.name for j in joints]

    def S(joint, off, radius, foot=None):
        return ContactSphere(names.index(joint), np.array(off, dtype=float), radius, foot)

    spheres = (
        # feet: heel + toe spheres touch the ground exactly in the rest pose
        S("l_ankle", (0, -0.03, -0.04), 0.03, "left"),
        S("l_toe", (0, -0.005, 0.02), 0.025, "left"),
        S("r_ankle", (0, -0.03, -0.04), 0.03, "right"),
        S("r_toe", (0, -0.005, 0.02), 0.025, "right"),
        # coarse hull for fall detection and lying on the ground
        S("pelvis", (0, 0, 0), 0.11),
        S("spine", (0, 0.08, 0), 0.11),
        S("chest", (0, 0.09, 0), 0.12),
        S("head", (0, 0.09, 0), 0.10),
        S("l_hip", (0, -0.22, 0), 0.07),
        S("r_hip", (0, -0.22, 0), 0.07),
        S("l_knee", (0, -0.20, 0), 0.055),
        S("r_knee", (0, -0.20, 0), 0.055),
        S("l_shoulder", (0.135, 0, 0), 0.05),
        S("r_shoulder", (-0.135, 0, 0), 0.05),
        S("l_elbow", (0.125, 0, 0), 0.045),
        S("r_elbow", (-0.125, 0, 0), 0.045),
        S("l_wrist", (0.07, 0, 0), 0.04),
        S("r_wrist", (-0.07, 0, 0), 0.04),
    )
    return Skeleton(joints=joints, spheres=spheres, total_height=1.75)


REST_ROOT_HEIGHT = 0.98


def rest_pose(skel: Skeleton) -> "Pose":
    return Pose(root_pos=np.array([0.0, REST_ROOT_HEIGHT, 0.0]),
                root_quat=quat_identity(),
                joint_rot=np.zeros((skel.n_joints - 1, 3)))


# ---------------------------------------------------------------------------
# poses and forward kinematics
# ---------------------------------------------------------------------------

@dataclass
class Pose:
    """A kinematic pose: root transform plus local joint rotation vectors.

    joint_pos / joint_vel are derived caches; joint_pos is kept consistent
    with forward kinematics whenever populated.
    """
    root_pos: np.ndarray
    root_quat: np.ndarray
    joint_rot: np.ndarray                 # (n_joints - 1, 3)
    joint_pos: np.ndarray | None = None   # (n_joints, 3) world
    joint_vel: np.ndarray | None = None   # (n_joints, 3) world

    def copy(self) -> "Pose":
        return Pose(self.root_pos.copy(), self.root_quat.copy(), self.joint_rot.copy(),
                    None if self.joint_pos is None else self.joint_pos.copy(),
                    None if self.joint_vel is None else self.joint_vel.copy())


def forward_kinematics(skel: Skeleton, root_pos: np.ndarray, root_quat: np.ndarray,
                       joint_rot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World position and orientation of every joint.

    joint_rot holds one rotation vector per non-root joint, in skeleton order.
    """
    n = skel.n_joints
    joint_rot = np.asarray(joint_rot, dtype=float)
    if joint_rot.shape != (n - 1, 3):
        raise ValueError(f"expected joint rotations of shape {(n - 1, 3)}, got {joint_rot.shape}")
    pos = np.zeros((n, 3))
    quat = np.zeros((n, 4))
    pos[0] = root_pos
    quat[0] = quat_canonical(root_quat)
    offsets = skel.offsets
    parents = skel.parents
    for k in range(1, n):
        p = parents[k]
        pos[k] = pos[p] + quat_rotate(quat[p], offsets[k])
        quat[k] = quat_canonical(quat_mul(quat[p], rotvec_to_quat(joint_rot[k - 1])))
    return pos, quat


def fk_pose(skel: Skeleton, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    return forward_kinematics(skel, pose.root_pos, pose.root_quat, pose.joint_rot)


def positions_from_bone_orients(skel: Skeleton, root_pos: np.ndarray,
                                quats: np.ndarray) -> np.ndarray:
    """Joint positions given world bone orientations (one quat per joint)."""
    n = skel.n_joints
    pos = np.zeros((n, 3))
    pos[0] = root_pos
    offsets = skel.offsets
    parents = skel.parents
    for k in range(1, n):
        p = parents[k]
        pos[k] = pos[p] + quat_rotate(quats[p], offsets[k])
    return pos


def local_rots_from_bone_orients(skel: Skeleton, quats: np.ndarray) -> np.ndarray:
    """Recover per-joint local rotation vectors from world bone orientations."""
    n = skel.n_joints
    out = np.zeros((n - 1, 3))
    parents = skel.parents
    for k in range(1, n):
        rel = quat_mul(quat_conj(quats[parents[k]]), quats[k])
        out[k - 1] = quat_to_rotvec(rel)
    return out


def body_com_world(skel: Skeleton, pos: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """World COM of each body given joint world transforms."""
    coms = np.empty((skel.n_joints, 3))
    for k in range(skel.n_joints):
        coms[k] = pos[k] + quat_rotate(quat[k], skel.joints[k].com)
    return coms


def extract_heading(pose: Pose, fallback: np.ndarray | None = None) -> np.ndarray:
    """Planar position + facing-direction yaw of the root.

    When the root's facing direction is vertical (gimbal-degenerate), the yaw
    of `fallback` is reused; without a fallback this raises.
    """
    yaw = yaw_of_quat(pose.root_quat)
    if yaw is None:
        if fallback is None:
            raise ValueError("degenerate heading (vertical facing) and no fallback given")
        yaw = fallback[2]
    return np.array([pose.root_pos[0], pose.root_pos[2], yaw])


# ---------------------------------------------------------------------------
# aggregated upper-body state
# ---------------------------------------------------------------------------

@dataclass
class AggregatedState:
    """Centroid summary of the upper body expressed in the current heading frame."""
    com_pos: np.ndarray
    com_vel: np.ndarray
    ang_mom: np.ndarray
    delta_heading: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.com_pos, self.com_vel, self.ang_mom, self.delta_heading])


def aggregate_upper(skel: Skeleton, pose_prev: Pose, pose_cur: Pose,
                    h_prev: np.ndarray, dt: float) -> AggregatedState:
    """Mass-weighted centroid position/velocity/angular momentum of the upper body.

    Velocities are finite differences between the two poses. The linear
    quantities are expressed in the current heading frame; delta_heading is the
    current frame relative to h_prev.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    h_cur = extract_heading(pose_cur, fallback=h_prev)

    pos0, quat0 = fk_pose(skel, pose_prev)
    pos1, quat1 = fk_pose(skel, pose_cur)
    com0 = body_com_world(skel, pos0, quat0)
    com1 = body_com_world(skel, pos1, quat1)

    idx = skel.upper
    masses = skel.masses[idx]
    total = masses.sum()
    c0 = (masses[:, None] * com0[idx]).sum(axis=0) / total
    c1 = (masses[:, None] * com1[idx]).sum(axis=0) / total
    vel = (com1[idx] - com0[idx]) / dt
    com_vel = (masses[:, None] * vel).sum(axis=0) / total

    ang = np.zeros(3)
    for m, k, v in zip(masses, idx, vel):
        r = com1[k] - c1
        ang += m * np.cross(r, v)
        # rigid-body spin term: world inertia times finite-difference omega
        dq = quat_mul(quat1[k], quat_conj(quat0[k]))
        omega = quat_to_rotvec(dq) / dt
        rot = quat_to_mat(quat1[k])
        inertia_w = rot @ skel.joints[k].inertia @ rot.T
        ang += inertia_w @ omega

    return AggregatedState(
        com_pos=heading_apply_inv(h_cur, c1),
        com_vel=heading_rotate_inv(h_cur, com_vel),
        ang_mom=heading_rotate_inv(h_cur, ang),
        delta_heading=heading_compose(heading_inverse(h_prev), h_cur),
    )


# ---------------------------------------------------------------------------
# two-bone inverse kinematics
# ---------------------------------------------------------------------------

@dataclass
class IKResult:
    pose: Pose
    clamped: tuple[bool, bool]


def _chain_indices(skel: Skeleton, end: int) -> tuple[int, int, int]:
    mid = skel.parents[end]
    top = skel.parents[mid]
    return top, mid, end


def two_bone_ik(skel: Skeleton, pose: Pose, end_joint: int, target: np.ndarray,
                keep_end_orient: bool = True) -> tuple[Pose, bool]:
    """Analytic two-bone IK moving `end_joint` to `target`.

    Solves the grandparent (swing) and parent (hinge) rotations of the chain,
    preserving the current bend axis. Targets beyond reach are clamped to the
    reachable sphere; the returned flag reports clamping.
    """
    top, mid, end = _chain_indices(skel, end_joint)
    pos, quat = fk_pose(skel, pose)

    a, b, c = pos[top], pos[mid], pos[end]
    l1 = np.linalg.norm(skel.offsets[mid])
    l2 = np.linalg.norm(skel.offsets[end])

    to_target = np.asarray(target, dtype=float) - a
    dist = np.linalg.norm(to_target)
    max_reach = l1 + l2
    min_reach = abs(l1 - l2)
    clamped = False
    if dist > max_reach:
        clamped = dist > max_reach * (1.0 + 1e-9)
        to_target = to_target * (max_reach / dist)
        dist = max_reach
    elif dist < max(min_reach, 1e-9):
        d = max(min_reach, 1e-9)
        if dist < 1e-9:
            to_target = (c - a)
            n = np.linalg.norm(to_target)
            to_target = to_target / n * d if n > 1e-9 else np.array([0.0, -d, 0.0])
        else:
            to_target = to_target * (d / dist)
        dist = d
        clamped = True

    # bend axis from the current configuration; falls back to the joint's
    # local x axis when the chain is straight
    axis = np.cross(b - a, c - b)
    if np.linalg.norm(axis) < 1e-8:
        axis = quat_rotate(quat[mid], np.array([1.0, 0.0, 0.0]))
    dir_t = to_target / dist
    # the axis must be orthogonal to the new chain direction for the
    # law-of-cosines construction below to hold exactly
    axis = axis - np.dot(axis, dir_t) * dir_t
    if np.linalg.norm(axis) < 1e-8:
        axis = np.cross(dir_t, np.array([0.0, 1.0, 0.0]))
        if np.linalg.norm(axis) < 1e-8:
            axis = np.cross(dir_t, np.array([1.0, 0.0, 0.0]))
    axis = axis / np.linalg.norm(axis)

    # top angle from the law of cosines; rotating dir_t by -alpha about the
    # bend axis keeps the mid joint on the same side as before
    cos_top = (l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist)
    cos_top = np.clip(cos_top, -1.0, 1.0)
    alpha = np.arccos(cos_top)
    rot_alpha = rotvec_to_quat(axis * (-alpha))
    dir_mid = quat_rotate(rot_alpha, dir_t)
    new_b = a + dir_mid * l1
    new_c = a + to_target

    new_pose = pose.copy()
    rots = new_pose.joint_rot

    # top joint: swing current top->mid direction onto the new one
    cur_dir = (b - a)
    cur_dir /= max(np.linalg.norm(cur_dir), 1e-12)
    swing = quat_between(cur_dir, dir_mid)
    top_quat = quat_mul(swing, quat[top])
    parent_q = quat[skel.parents[top]] if skel.parents[top] >= 0 else None
    if parent_q is None:
        raise ValueError("two_bone_ik cannot drive the root joint")
    rots[top - 1] = quat_to_rotvec(quat_mul(quat_conj(parent_q), top_quat))

    # mid joint: swing the new mid->end direction onto target
    cur_end_dir = quat_rotate(quat_mul(swing, quat[mid]), skel.offsets[end] / l2)
    want_dir = (new_c - new_b) / l2
    swing2 = quat_between(cur_end_dir, want_dir)
    mid_quat = quat_mul(swing2, quat_mul(swing, quat[mid]))
    rots[mid - 1] = quat_to_rotvec(quat_mul(quat_conj(top_quat), mid_quat))

    if keep_end_orient and end < skel.n_joints:
        rots[end - 1] = quat_to_rotvec(quat_mul(quat_conj(mid_quat), quat[end]))

    return new_pose, clamped


def contact_ik(skel: Skeleton, pose: Pose, contacts: dict[str, float],
               locked_pos: dict[str, np.ndarray]) -> IKResult:
    """Pin contacting feet to their locked world positions.

    A foot with contact label >= 0.5 has its ankle moved to locked_pos via
    hip-knee two-bone IK; the other leg is untouched. Foot world orientation
    is preserved.
    """
    out = pose.copy()
    flags = []
    for side in ("left", "right"):
        if contacts.get(side, 0.0) >= 0.5:
            if side not in locked_pos:
                raise ValueError(f"contacting {side} foot needs a locked position")
            ankle = skel.index(f"{side[0]}_ankle")
            out, clamped = two_bone_ik(skel, out, ankle, locked_pos[side])
            flags.append(clamped)
        else:
            flags.append(False)
    out.joint_pos = None
    out.joint_vel = None
    return IKResult(pose=out, clamped=(flags[0], flags[1]))
