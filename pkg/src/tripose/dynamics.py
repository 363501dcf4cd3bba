"""Articulated rigid-body simulation in generalized coordinates.

The character is a floating-base tree of bodies connected by 3-DoF ball
joints. Generalized velocities are world-frame vectors: root linear velocity,
root angular velocity, and each joint's relative angular velocity. With that
choice every body's spatial Jacobian is assembled from simple cross-product
blocks and the velocity-product (bias) accelerations have a closed form.

One `step` advances a single 1/120 s substep:

1. joint-space inertia matrix (composite, via body Jacobians) and bias forces
2. stable-PD torques with the damping term moved onto the matrix (implicit)
3. unconstrained velocity solve, then velocity-level contact impulses
   (pyramidal friction, Baumgarte penetration bias, restitution 0)
4. trapezoidal position update (exact for ballistic flight)
5. momentum projection: velocities receive a minimal correction so the total
   linear/angular momentum matches the exact external impulse budget
   (gravity + contacts) — internal torques can then never leak momentum

Determinism: everything is sequential numpy float64; identical inputs give
bit-identical trajectories on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import (
    _bquat_to_mat,
    bquat_canonical,
    bquat_conj,
    bquat_mul,
    bquat_to_rotvec,
    brotvec_to_quat,
)
from .kinematics import (
    Pose,
    Skeleton,
    quat_canonical,
    quat_mul,
    quat_rotate,
    rotvec_to_quat,
)

GRAVITY = -9.81
SIM_DT = 1.0 / 120.0
FRICTION_MU = 0.8
BAUMGARTE_BETA = 0.2
CONTACT_MARGIN = 2e-3
TORQUE_LIMIT = 300.0
PGS_ITERATIONS = 40


class SimulationDiverged(RuntimeError):
    def __init__(self, message: str, last_state: "SimState"):
        super().__init__(message)
        self.last_state = last_state


@dataclass
class PDParams:
    kp: float = 200.0
    kd: float = 20.0

    def __post_init__(self):
        if self.kp < 0.0 or self.kd < 0.0:
            raise ValueError("PD gains must be non-negative")


@dataclass
class Action:
    """Target pose for the joint PD servos: one rotation vector per joint."""
    target_rot: np.ndarray        # (n_joints-1, 3)


@dataclass
class SimState:
    root_pos: np.ndarray          # (3,)
    root_quat: np.ndarray         # (4,)
    joint_rot: np.ndarray         # (J-1, 3)
    lin_vel: np.ndarray           # (3,) world
    ang_vel: np.ndarray           # (3,) world
    joint_vel: np.ndarray         # (J-1, 3) relative angular velocity, world frame
    time: float = 0.0
    contact_flags: tuple[bool, bool] = (False, False)

    def copy(self) -> "SimState":
        return SimState(self.root_pos.copy(), self.root_quat.copy(),
                        self.joint_rot.copy(), self.lin_vel.copy(),
                        self.ang_vel.copy(), self.joint_vel.copy(),
                        self.time, self.contact_flags)

    def velocity_vector(self) -> np.ndarray:
        return np.concatenate([self.lin_vel, self.ang_vel, self.joint_vel.reshape(-1)])


def state_from_pose(pose: Pose, n_joints: int | None = None) -> SimState:
    nj = pose.joint_rot.shape[0]
    return SimState(root_pos=pose.root_pos.copy(),
                    root_quat=quat_canonical(pose.root_quat),
                    joint_rot=pose.joint_rot.copy(),
                    lin_vel=np.zeros(3), ang_vel=np.zeros(3),
                    joint_vel=np.zeros((nj, 3)))


def pose_from_state(state: SimState) -> Pose:
    return Pose(state.root_pos.copy(), state.root_quat.copy(), state.joint_rot.copy())


@dataclass
class ContactResult:
    points: np.ndarray            # (m, 3) world contact points
    bodies: np.ndarray            # (m,) body index
    impulses: np.ndarray          # (m, 3) world impulse applied at each point
    flags: tuple[bool, bool]      # per-foot contact
    converged: bool = True


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _bcross(a, b):
    """np.cross without its axis-juggling overhead; (..., 3) inputs."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _bskew(v):
    """(..., 3) -> (..., 3, 3) skew matrices."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


@dataclass
class _Kin:
    pos: np.ndarray               # (J, 3) joint world origins
    quat: np.ndarray              # (J, 4)
    rot: np.ndarray               # (J, 3, 3)
    com: np.ndarray               # (J, 3) body COM world
    inertia_w: np.ndarray         # (J, 3, 3)
    body_omega: np.ndarray        # (J, 3)
    com_vel: np.ndarray           # (J, 3)
    anchor_vel: np.ndarray        # (J, 3) velocity of each joint origin


class Simulator:
    """One simulation instance; single-threaded, deterministic.

    Independent instances can run in parallel. Instances may be handed
    between threads when not mid-step.
    """

    def __init__(self, skel: Skeleton, pd: PDParams | None = None,
                 dt: float = SIM_DT, gravity: float = GRAVITY,
                 mu: float = FRICTION_MU, torque_limit: float = TORQUE_LIMIT,
                 fixed_base: bool = False, momentum_projection: bool = True):
        self.skel = skel
        self.pd = pd or PDParams()
        self.dt = dt
        self.gravity = gravity
        self.mu = mu
        self.torque_limit = torque_limit
        self.fixed_base = fixed_base
        self.momentum_projection = momentum_projection and not fixed_base

        nj = skel.n_joints
        self.nj = nj
        self.ndof = 6 + 3 * (nj - 1)
        parents = skel.parents
        # chain[k, j] is True when joint j+1 lies on the path root -> body k
        chain = np.zeros((nj, nj - 1))
        for k in range(1, nj):
            j = k
            while j > 0:
                chain[k, j - 1] = 1.0
                j = parents[j]
        self.chain = chain
        self.masses = skel.masses
        self.total_mass = skel.total_mass
        self.spheres = list(skel.spheres)
        self._parent_list = [int(p) for p in parents]
        self._offset_list = [tuple(o) for o in skel.offsets]
        self._sphere_joints = np.array([s.joint for s in skel.spheres], dtype=int)
        self._sphere_offsets = (np.stack([s.offset for s in skel.spheres])
                                if skel.spheres else np.zeros((0, 3)))
        self._sphere_radii = np.array([s.radius for s in skel.spheres])
        self._sphere_feet = [s.foot for s in skel.spheres]
        # rest head height for the fall criterion
        from .kinematics import rest_pose, fk_pose
        rp, _ = fk_pose(skel, rest_pose(skel))
        self.rest_head_height = float(rp[skel.index("head")][1]) if "head" in skel.names else None

    # -- kinematics / dynamics quantities ------------------------------------------

    def _kinematics(self, state: SimState) -> _Kin:
        skel = self.skel
        nj = self.nj
        pos = np.empty((nj, 3))
        quat = np.empty((nj, 4))
        pos[0] = state.root_pos
        quat[0] = state.root_quat
        local = brotvec_to_quat(state.joint_rot) if nj > 1 else np.zeros((0, 4))
        parents = self._parent_list
        offsets = self._offset_list
        # scalar-float FK: cheaper than numpy ops at this size
        for k in range(1, nj):
            p = parents[k]
            pw, px, py, pz = quat[p]
            ox, oy, oz = offsets[k]
            tx = 2.0 * (py * oz - pz * oy)
            ty = 2.0 * (pz * ox - px * oz)
            tz = 2.0 * (px * oy - py * ox)
            pos[k, 0] = pos[p, 0] + ox + pw * tx + py * tz - pz * ty
            pos[k, 1] = pos[p, 1] + oy + pw * ty + pz * tx - px * tz
            pos[k, 2] = pos[p, 2] + oz + pw * tz + px * ty - py * tx
            lw, lx, ly, lz = local[k - 1]
            qw = pw * lw - px * lx - py * ly - pz * lz
            qx = pw * lx + px * lw + py * lz - pz * ly
            qy = pw * ly - px * lz + py * lw + pz * lx
            qz = pw * lz + px * ly - py * lx + pz * lw
            if qw < 0.0:
                qw, qx, qy, qz = -qw, -qx, -qy, -qz
            quat[k] = (qw, qx, qy, qz)
        rot = _bquat_to_mat(quat)
        com = pos + np.matmul(rot, skel.coms[..., None])[..., 0]
        inertia_w = np.matmul(np.matmul(rot, skel.inertias), rot.transpose(0, 2, 1))

        w_rel = state.joint_vel
        body_omega = np.tile(state.ang_vel, (nj, 1))
        if nj > 1:
            body_omega[1:] += self.chain[1:] @ w_rel

        def point_vel(points):
            v = state.lin_vel + _bcross(state.ang_vel, points - state.root_pos)
            if nj > 1:
                v += np.einsum("kj,kjc->kc", self.chain,
                               _bcross(w_rel[None, :, :],
                                       points[:, None, :] - pos[None, 1:, :]))
            return v

        com_vel = point_vel(com)
        anchor_vel = point_vel(pos)
        return _Kin(pos, quat, rot, com, inertia_w, body_omega, com_vel, anchor_vel)

    def _jacobians(self, kin: _Kin, root_pos) -> np.ndarray:
        """Body spatial Jacobians (J, 6, ndof); rows 0:3 angular, 3:6 linear at COM."""
        nj, ndof = self.nj, self.ndof
        J = np.zeros((nj, 6, ndof))
        eye = np.eye(3)
        J[:, 3:6, 0:3] = eye
        J[:, 0:3, 3:6] = eye
        J[:, 3:6, 3:6] = -_bskew(kin.com - root_pos)
        if nj > 1:
            # angular blocks: identity where the joint drives the body
            mask = self.chain
            J[:, 0:3, 6:] = (mask[:, None, :, None] * eye[None, :, None, :]) \
                .reshape(nj, 3, 3 * (nj - 1))
            lever = -_bskew(kin.com[:, None, :] - kin.pos[None, 1:, :])
            lever *= mask[:, :, None, None]
            J[:, 3:6, 6:] = lever.transpose(0, 2, 1, 3).reshape(nj, 3, 3 * (nj - 1))
        return J

    def _mass_matrix(self, kin: _Kin, J: np.ndarray) -> np.ndarray:
        SJ = np.empty_like(J)
        SJ[:, 0:3, :] = np.matmul(kin.inertia_w, J[:, 0:3, :])
        SJ[:, 3:6, :] = self.masses[:, None, None] * J[:, 3:6, :]
        flat = J.reshape(-1, self.ndof)
        return flat.T @ SJ.reshape(-1, self.ndof)

    def _bias_forces(self, state: SimState, kin: _Kin, J: np.ndarray) -> np.ndarray:
        """Generalized force of the velocity-product terms (to subtract)."""
        w0 = state.ang_vel
        a_vp = _bcross(w0, kin.com_vel - state.lin_vel)
        if self.nj > 1:
            rel = kin.com_vel[:, None, :] - kin.anchor_vel[None, 1:, :]
            a_vp += np.einsum("kj,kjc->kc", self.chain,
                              _bcross(state.joint_vel[None, :, :], rel))
        gyro = _bcross(kin.body_omega,
                       np.matmul(kin.inertia_w, kin.body_omega[..., None])[..., 0])
        f = np.concatenate([gyro, self.masses[:, None] * a_vp], axis=-1)
        return J.reshape(-1, self.ndof).T @ f.reshape(-1)

    def _gravity_force(self, kin: _Kin, J: np.ndarray) -> np.ndarray:
        f = np.zeros((self.nj, 6))
        f[:, 4] = self.masses * self.gravity
        return J.reshape(-1, self.ndof).T @ f.reshape(-1)

    # -- stable PD -------------------------------------------------------------------

    def stable_pd_torques(self, state: SimState, action: Action | None,
                          kin: _Kin | None = None) -> np.ndarray:
        """Explicit part of the stable-PD joint torques, world frame (J-1, 3).

        The position error is evaluated at the one-step-ahead joint rotation;
        the -kd*dt*qddot part is realized implicitly via the mass-matrix
        augmentation inside step(). With kp = 0 this is pure damping -kd*qdot.
        """
        if action is None:
            return np.zeros((self.nj - 1, 3))
        target = np.asarray(action.target_rot, dtype=float)
        if target.shape != (self.nj - 1, 3):
            raise ValueError(f"action needs shape {(self.nj - 1, 3)}, got {target.shape}")
        if not np.all(np.isfinite(target)):
            raise ValueError("non-finite action target")
        kin = kin or self._kinematics(state)
        kp, kd = self.pd.kp, self.pd.kd
        prot = kin.rot[self.skel.parents[1:]]          # (J-1, 3, 3)
        w_world = state.joint_vel
        w_pf = np.einsum("kba,kb->ka", prot, w_world)  # parent-frame components
        q_rel = brotvec_to_quat(state.joint_rot)
        q_pred = bquat_mul(brotvec_to_quat(self.dt * w_pf), q_rel)
        err_pf = bquat_to_rotvec(bquat_mul(brotvec_to_quat(target), bquat_conj(q_pred)))
        tau = np.einsum("kab,kb->ka", prot, kp * err_pf) - kd * w_world
        norms = np.linalg.norm(tau, axis=-1)
        over = norms > self.torque_limit
        if np.any(over):
            tau[over] *= (self.torque_limit / norms[over])[:, None]
        return tau

    # -- contacts -----------------------------------------------------------------------

    def _detect_contacts(self, kin: _Kin):
        if not self.spheres:
            return [], [], [], []
        sj = self._sphere_joints
        centers = kin.pos[sj] + np.einsum("kab,kb->ka", kin.rot[sj], self._sphere_offsets)
        clear = centers[:, 1] - self._sphere_radii
        idx = np.where(clear < CONTACT_MARGIN)[0]
        points, bodies, clearances, feet = [], [], [], []
        for i in idx:
            points.append(centers[i] - np.array([0.0, self._sphere_radii[i], 0.0]))
            bodies.append(int(sj[i]))
            clearances.append(clear[i])
            feet.append(self._sphere_feet[i])
        return points, bodies, clearances, feet

    def resolve_contacts(self, state: SimState, u_star: np.ndarray,
                         m_factor, kin: _Kin | None = None
                         ) -> tuple[np.ndarray, ContactResult]:
        """Velocity-level impulse solve against the ground plane y = 0.

        Returns the corrected velocity vector and the contact report. Normal
        impulses stay non-negative; tangential impulses respect a pyramidal
        Coulomb cone per axis (|t| <= mu * n). Projected Gauss-Seidel; if the
        residual has not converged after the iteration cap the best iterate is
        accepted and flagged.
        """
        kin = kin or self._kinematics(state)
        points, bodies, clearances, feet = self._detect_contacts(kin)
        flags = [False, False]
        if not points:
            return u_star, ContactResult(np.zeros((0, 3)), np.zeros(0, dtype=int),
                                         np.zeros((0, 3)), (False, False))
        m = len(points)
        # point Jacobians (m, 3, ndof): rows x, y, z of world point velocity
        Jc = np.zeros((m, 3, self.ndof))
        for i, (pt, body) in enumerate(zip(points, bodies)):
            Jc[i, :, 0:3] = np.eye(3)
            Jc[i, :, 3:6] = -_skew(pt - state.root_pos)
            j = body
            while j > 0:
                blk = 6 + 3 * (j - 1)
                Jc[i, :, blk:blk + 3] = -_skew(pt - kin.pos[j])
                j = self.skel.parents[j]
        if self.fixed_base:
            Jc[:, :, 0:6] = 0.0

        Jc_flat = Jc.reshape(3 * m, self.ndof)
        minv_jt = m_factor(Jc_flat.T)                  # (ndof, 3m)
        W = Jc_flat @ minv_jt                          # (3m, 3m)
        v = Jc_flat @ u_star
        lam = np.zeros(3 * m)

        # desired minimum normal velocity: push out when penetrating, allow
        # approach down to touching otherwise
        v_min = np.zeros(m)
        for i, c in enumerate(clearances):
            v_min[i] = (BAUMGARTE_BETA * (-c) / self.dt) if c < 0.0 else (-max(c, 0.0) / self.dt)

        converged = False
        w_cols = [W[:, c] for c in range(3 * m)]
        w_diag = np.diag(W)
        for _ in range(PGS_ITERATIONS):
            delta_max = 0.0
            for i in range(m):
                ny, tx, tz = 3 * i + 1, 3 * i + 0, 3 * i + 2
                # normal row
                dn = (v_min[i] - v[ny]) / w_diag[ny]
                new_n = lam[ny] + dn
                if new_n < 0.0:
                    new_n = 0.0
                dn = new_n - lam[ny]
                if dn != 0.0:
                    lam[ny] = new_n
                    v += w_cols[ny] * dn
                    delta_max = max(delta_max, abs(dn))
                bound = self.mu * lam[ny]
                for t in (tx, tz):
                    new_t = lam[t] - v[t] / w_diag[t]
                    if new_t > bound:
                        new_t = bound
                    elif new_t < -bound:
                        new_t = -bound
                    dtau = new_t - lam[t]
                    if dtau != 0.0:
                        lam[t] = new_t
                        v += w_cols[t] * dtau
                        delta_max = max(delta_max, abs(dtau))
            if delta_max < 1e-12 + 1e-10 * float(np.abs(lam).max()):
                converged = True
                break

        u_out = u_star + minv_jt @ lam
        impulses = lam.reshape(m, 3)
        for i, foot in enumerate(feet):
            if foot is not None and impulses[i, 1] > 0.0:
                flags[0 if foot == "left" else 1] = True
        return u_out, ContactResult(np.array(points), np.array(bodies, dtype=int),
                                    impulses, (flags[0], flags[1]), converged)

    # -- momentum bookkeeping ------------------------------------------------------------

    def momentum(self, state: SimState, kin: _Kin | None = None) -> np.ndarray:
        """Total [linear momentum; angular momentum about the world origin]."""
        kin = kin or self._kinematics(state)
        lin = (self.masses[:, None] * kin.com_vel).sum(axis=0)
        ang = (_bcross(kin.com, self.masses[:, None] * kin.com_vel)
               + np.matmul(kin.inertia_w, kin.body_omega[..., None])[..., 0]).sum(axis=0)
        return np.concatenate([lin, ang])

    def _momentum_rows(self, kin: _Kin, J: np.ndarray) -> np.ndarray:
        """G (6, ndof) with momentum = G @ u."""
        g_lin = (self.masses[:, None, None] * J[:, 3:6, :]).sum(axis=0)
        g_ang = np.matmul(kin.inertia_w, J[:, 0:3, :]).sum(axis=0)
        g_ang += np.matmul(_bskew(kin.com) * self.masses[:, None, None],
                           J[:, 3:6, :]).sum(axis=0)
        return np.concatenate([g_lin, g_ang], axis=0)

    # -- the step -------------------------------------------------------------------------

    def step(self, state: SimState, action: Action | None,
             external_torques: np.ndarray | None = None) -> SimState:
        """Advance one substep. Deterministic given (state, action, torques).

        external_torques: optional (J-1, 3) extra world-frame joint torques
        (e.g. tracker-correction torques); they are internal to the character.
        Raises SimulationDiverged (carrying the input state) on numerical
        blow-up.
        """
        dt = self.dt
        kin = self._kinematics(state)
        J = self._jacobians(kin, state.root_pos)
        M = self._mass_matrix(kin, J)
        rhs = self._gravity_force(kin, J) - self._bias_forces(state, kin, J)

        tau = self.stable_pd_torques(state, action, kin)
        if external_torques is not None:
            tau = tau + external_torques
        rhs[6:] += tau.reshape(-1)

        # implicit joint damping: (M + dt*Kd) qddot = rhs
        m_tilde = M.copy()
        if self.nj > 1 and action is not None:
            idx = np.arange(6, self.ndof)
            m_tilde[idx, idx] += dt * self.pd.kd
        m_tilde[np.arange(self.ndof), np.arange(self.ndof)] += 1e-12

        if self.fixed_base:
            act = np.arange(6, self.ndof)
            qdd = np.zeros(self.ndof)
            qdd[act] = np.linalg.solve(m_tilde[np.ix_(act, act)], rhs[act])

            def m_solve(B):
                out = np.zeros((self.ndof,) + B.shape[1:])
                out[act] = np.linalg.solve(m_tilde[np.ix_(act, act)], B[act])
                return out
        else:
            lu = np.linalg.inv(m_tilde)      # reused for contacts + projection

            def m_solve(B):
                return lu @ B
            qdd = m_solve(rhs)

        u_old = state.velocity_vector()
        u_star = u_old + dt * qdd
        u_new, contacts = self.resolve_contacts(state, u_star, m_solve, kin)

        # trapezoidal position update (exact ballistic flight)
        u_avg = 0.5 * (u_old + u_new)
        new_root_pos = state.root_pos + dt * u_avg[0:3]
        new_root_quat = quat_canonical(
            quat_mul(rotvec_to_quat(dt * u_avg[3:6]), state.root_quat))
        if self.nj > 1:
            prot = kin.rot[self.skel.parents[1:]]
            w_pf = np.einsum("kba,kb->ka", prot, u_avg[6:].reshape(-1, 3))
            q_rel = bquat_mul(brotvec_to_quat(dt * w_pf),
                              brotvec_to_quat(state.joint_rot))
            new_joint_rot = bquat_to_rotvec(q_rel)
        else:
            new_joint_rot = np.zeros_like(state.joint_rot)

        new_state = SimState(
            root_pos=new_root_pos, root_quat=new_root_quat, joint_rot=new_joint_rot,
            lin_vel=u_new[0:3].copy(), ang_vel=u_new[3:6].copy(),
            joint_vel=u_new[6:].reshape(-1, 3).copy(),
            time=state.time + dt, contact_flags=contacts.flags)

        if self.momentum_projection:
            # exact impulse budget: gravity + contact impulses (about the origin)
            target = self.momentum(state, kin)
            target[0:3] += dt * self.total_mass * np.array([0.0, self.gravity, 0.0])
            target[3:6] += dt * np.cross(kin.com, self.masses[:, None]
                                         * np.array([0.0, self.gravity, 0.0])).sum(axis=0)
            if len(contacts.impulses):
                target[0:3] += contacts.impulses.sum(axis=0)
                target[3:6] += np.cross(contacts.points, contacts.impulses).sum(axis=0)

            kin_new = self._kinematics(new_state)
            J_new = self._jacobians(kin_new, new_state.root_pos)
            G = self._momentum_rows(kin_new, J_new)
            residual = target - G @ u_new
            minv_gt = m_solve(G.T)
            correction = minv_gt @ np.linalg.solve(G @ minv_gt, residual)
            u_fixed = u_new + correction
            new_state.lin_vel = u_fixed[0:3]
            new_state.ang_vel = u_fixed[3:6]
            new_state.joint_vel = u_fixed[6:].reshape(-1, 3)

        bad = not (np.all(np.isfinite(new_state.root_pos))
                   and np.all(np.isfinite(new_state.joint_rot))
                   and np.all(np.isfinite(new_state.velocity_vector()))
                   and np.abs(new_state.velocity_vector()).max() < 1e6)
        if bad:
            raise SimulationDiverged("simulation diverged", state)
        return new_state

    # -- virtual forces -----------------------------------------------------------------------

    def jacobian_transpose_torques(self, state: SimState, body: int,
                                   local_point: np.ndarray, force: np.ndarray,
                                   kin: _Kin | None = None) -> np.ndarray:
        """Joint torques realizing `force` at a body point: tau_j = (x - o_j) x F.

        Only the joints on the chain from the root to `body` receive torque;
        the root's free DoFs get none, so the net external wrench on the
        character is unchanged.
        """
        if body == 0:
            raise ValueError("virtual forces cannot target the root body")
        if not (0 < body < self.nj):
            raise ValueError(f"no such body: {body}")
        kin = kin or self._kinematics(state)
        x = kin.pos[body] + quat_rotate(kin.quat[body], np.asarray(local_point, dtype=float))
        tau = np.zeros((self.nj - 1, 3))
        j = body
        while j > 0:
            tau[j - 1] = np.cross(x - kin.pos[j], force)
            j = self.skel.parents[j]
        return tau

    # -- termination --------------------------------------------------------------------------

    def has_fallen(self, state: SimState, kin: _Kin | None = None) -> bool:
        """Head below half its rest height, or any non-foot body touching ground."""
        kin = kin or self._kinematics(state)
        if self.rest_head_height is not None:
            head = self.skel.index("head")
            if kin.pos[head][1] < 0.5 * self.rest_head_height:
                return True
        for sph in self.spheres:
            if sph.foot is not None:
                continue
            center = kin.pos[sph.joint] + quat_rotate(kin.quat[sph.joint], sph.offset)
            if center[1] - sph.radius < 1e-3:
                return True
        return False
