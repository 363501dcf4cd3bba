"""The combined runtime loop: 30 Hz tracker input, 10 Hz control, 120 Hz
simulation, plus signal forecasting, tracker position correction, one-point
(head-only) input substitution, and the combined fine-tuning stage.

Normal mode: every third input frame triggers a control cycle. The predictor
rolls a nine-frame clip from the simulated character's current state (three
real input frames then six forecast frames); clip frames 3/6/9 feed the
policy as the +0.1/+0.2/+0.3 s reference; the resulting target pose is held
for twelve simulation substeps, each optionally adding tracker-correction
torques. Direct mode bypasses control/simulation entirely and plays the
predictor output kinematically with foot-contact locking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as ft
from . import neuralnet as nn
from .dataio import MotionClip, TrackerFrame, extract_trackers
from .dynamics import Action, SimState, Simulator, SimulationDiverged, state_from_pose
from .kinematics import (
    Pose,
    Skeleton,
    fk_pose,
    heading_compose,
    heading_inverse,
    quat_canonical,
    quat_mul,
    quat_rotate,
    quat_slerp,
    quat_to_rotvec,
    rest_pose,
    rotvec_to_quat,
    two_bone_ik,
    wrap_angle,
)
from .policy import (
    LOOKAHEAD,
    PolicyNet,
    RewardWeights,
    ValueNet,
    build_control_state,
    quant_from_sim,
    reference_from_clip,
    reward,
)
from .predictor import (
    PredictorNets,
    PredictorState,
    direct_mode_pose,
    predict_step,
    state_from_vectors,
)

log = logging.getLogger(__name__)

INPUT_FPS = 30.0
CONTROL_FPS = 10.0
SIM_FPS = 120.0
FRAMES_PER_CYCLE = 3
SUBSTEPS_PER_CYCLE = 12
CLIP_LEN = 9
FORECAST_LEN = 6


@dataclass
class LoopConfig:
    mode: str = "normal"               # "normal" | "direct"
    one_point: bool = False
    correction: bool = True
    forecast: bool = True
    # open question: initial heading for the per-cycle prediction comes from
    # the predictor's previous output (the quoted rule) or the simulated root
    heading_source: str = "predictor"  # "predictor" | "sim"
    fall_reset_grace: float = 0.5

    def __post_init__(self):
        assert INPUT_FPS / CONTROL_FPS == FRAMES_PER_CYCLE
        assert SIM_FPS / CONTROL_FPS == SUBSTEPS_PER_CYCLE
        if self.mode not in ("normal", "direct"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.heading_source not in ("predictor", "sim"):
            raise ValueError(f"unknown heading source {self.heading_source!r}")


@dataclass
class CorrectionParams:
    kp: float = 1000.0
    kd: float = 10.0

    def __post_init__(self):
        if self.kp < 0 or self.kd < 0:
            raise ValueError("correction gains must be non-negative")


# ---------------------------------------------------------------------------
# signal forecasting
# ---------------------------------------------------------------------------

def signal_forecast(history: list[TrackerFrame], count: int = FORECAST_LEN
                    ) -> list[TrackerFrame]:
    """Extrapolate future tracker frames from the latest inputs.

    Positions advance by the mean inter-frame offset; orientations by the
    mean inter-frame relative rotation applied repeatedly (renormalized).
    A single-frame history degenerates to a constant hold.
    """
    if not history:
        raise ValueError("signal_forecast needs at least one frame")
    last = history[-1]
    dt = 1.0 / INPUT_FPS
    if len(history) == 1:
        return [TrackerFrame(last.pos.copy(), last.quat.copy(),
                             last.time + (i + 1) * dt, last.index + i + 1)
                for i in range(count)]
    diffs = [b.pos - a.pos for a, b in zip(history[:-1], history[1:])]
    dpos = np.mean(diffs, axis=0)
    drot = np.zeros((3, 3))
    for a, b in zip(history[:-1], history[1:]):
        for k in range(3):
            rel = quat_mul(b.quat[k], np.array([a.quat[k][0], *(-a.quat[k][1:])]))
            drot[k] += quat_to_rotvec(rel)
    drot /= (len(history) - 1)
    out = []
    pos = last.pos.copy()
    quat = last.quat.copy()
    for i in range(count):
        pos = pos + dpos
        quat = np.stack([quat_canonical(quat_mul(rotvec_to_quat(drot[k]), quat[k]))
                         for k in range(3)])
        out.append(TrackerFrame(pos.copy(), quat.copy(),
                                last.time + (i + 1) * dt, last.index + i + 1))
    return out


# ---------------------------------------------------------------------------
# one-point (head-only) input
# ---------------------------------------------------------------------------

def one_point_substitute(frame: TrackerFrame, skel: Skeleton,
                         prev: PredictorState | None) -> TrackerFrame:
    """Replace the hand entries with the predictor's own next-step estimate.

    The head entry always comes from the device. Before any prediction
    exists, hands fall back to T-pose offsets placed relative to the head.
    """
    out = frame.copy()
    if prev is not None and prev.o_next is not None:
        pos, quat = ft.decode_trackers_local(prev.heading, prev.o_next.astype(float))
        out.pos[1:] = pos[1:]
        out.quat[1:] = quat[1:]
        return out
    # cold start: hands at rest-pose offsets relative to the head device
    pose = rest_pose(skel)
    jp, jq = fk_pose(skel, pose)
    tidx = ft.tracker_joint_indices(skel)
    head_yaw = ft.byaw_of_quat(frame.quat[0][None])[0]
    yaw_q = rotvec_to_quat(np.array([0.0, head_yaw, 0.0]))
    for k in (1, 2):
        offset = jp[tidx[k]] - jp[tidx[0]]
        out.pos[k] = frame.pos[0] + quat_rotate(yaw_q, offset)
        out.quat[k] = quat_canonical(quat_mul(yaw_q, jq[tidx[k]]))
    return out


# ---------------------------------------------------------------------------
# tracker position correction
# ---------------------------------------------------------------------------

def correction_torques(sim: Simulator, state: SimState,
                       hand_targets: np.ndarray,
                       params: CorrectionParams) -> np.ndarray:
    """Virtual hand forces realized as arm-chain torques (net wrench zero).

    F = kp (target - hand) - kd * hand_velocity per hand, mapped through the
    Jacobian transpose of the wrist chain.
    """
    skel = sim.skel
    kin = sim._kinematics(state)
    tau = np.zeros((skel.n_joints - 1, 3))
    for i, name in enumerate(("l_wrist", "r_wrist")):
        body = skel.index(name)
        p = kin.pos[body]
        v = kin.anchor_vel[body]
        force = params.kp * (hand_targets[i] - p) - params.kd * v
        tau += sim.jacobian_transpose_torques(state, body, np.zeros(3), force, kin)
    return tau


# ---------------------------------------------------------------------------
# simulation state -> predictor feature vectors
# ---------------------------------------------------------------------------

def g_from_sim(sim: Simulator, state: SimState, heading: np.ndarray,
               delta_h_feedback: np.ndarray | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Encode the simulated character as (g_lo, g_up) relative to `heading`."""
    skel = sim.skel
    kin = sim._kinematics(state)
    h = np.asarray(heading, dtype=float)
    pos = kin.pos[None]
    vel = kin.anchor_vel[None]
    quat = kin.quat[None]

    up = skel.upper
    masses = skel.masses[up]
    m_up = masses.sum()
    com = kin.com[up]
    com_vel = kin.com_vel[up]
    centroid = (masses[:, None] * com).sum(axis=0) / m_up
    cent_vel = (masses[:, None] * com_vel).sum(axis=0) / m_up
    ang = (masses[:, None] * np.cross(com - centroid, com_vel)).sum(axis=0)
    ang += np.einsum("kab,kb->a", kin.inertia_w[up], kin.body_omega[up])
    dh = np.zeros(3) if delta_h_feedback is None else np.asarray(delta_h_feedback)
    z = np.concatenate([
        ft.heading_local_point(h, centroid),
        ft.heading_local_vec(h, cent_vel),
        ft.heading_local_vec(h, ang) / m_up,
        dh * ft.Z_DH_SCALE,
    ])
    contacts = np.array([float(state.contact_flags[0]), float(state.contact_flags[1])])
    g_lo = ft.encode_g_lo(skel, h[None], state.root_pos[None], state.root_quat[None],
                          pos, vel, quat, contacts[None], z[None])[0]
    g_up = ft.encode_g_up(skel, h[None], pos, vel, quat)[0]
    return g_lo.astype(np.float32), g_up.astype(np.float32)


# ---------------------------------------------------------------------------
# the live system
# ---------------------------------------------------------------------------

@dataclass
class CycleDebug:
    clip_states: list
    action: np.ndarray
    degraded: bool


class TriposeSystem:
    """One live tracking session (single-threaded, deterministic per seed)."""

    def __init__(self, skel: Skeleton, nets: PredictorNets,
                 policy: PolicyNet | None = None,
                 config: LoopConfig | None = None,
                 correction: CorrectionParams | None = None,
                 sim: Simulator | None = None):
        self.skel = skel
        self.nets = nets
        self.policy = policy
        self.config = config or LoopConfig()
        self.correction = correction or CorrectionParams()
        if self.config.mode == "normal" and policy is None:
            raise ValueError("normal mode needs a control policy")
        self.sim = sim or Simulator(skel)
        self.reset()

    def reset(self, pose: Pose | None = None):
        pose = pose or rest_pose(self.skel)
        self.sim_state = state_from_pose(pose)
        self.pred_state = _initial_state_from_pose(self.nets, self.skel, pose)
        self.history: list[TrackerFrame] = []
        self.pending: list[TrackerFrame] = []
        self.held_action: Action | None = None
        self.last_delta_h = np.zeros(3)
        self.cycles = 0
        self.substeps = 0
        self.frames_seen = 0
        self.fall_resets = 0
        self.fall_grace_until = -1.0
        self.locks: dict[str, np.ndarray] = {}
        self.degraded = False

    # -- direct mode -------------------------------------------------------------

    def _direct_step(self, frame: TrackerFrame) -> Pose:
        self.pred_state = predict_step(self.nets, frame, self.pred_state)
        pose = ft.decode_pose(self.skel, self.pred_state.g_lo.astype(float),
                              self.pred_state.g_up.astype(float),
                              self.pred_state.heading)
        labels = self.pred_state.g_lo[ft.LO_CONTACTS]
        pos, _ = fk_pose(self.skel, pose)
        contacts = {}
        for i, side in enumerate(("left", "right")):
            if labels[i] >= 0.5:
                if side not in self.locks:
                    locked = pos[self.skel.index(f"{side[0]}_ankle")].copy()
                    locked[1] = min(locked[1], 0.06)
                    self.locks[side] = locked
                contacts[side] = 1.0
            else:
                self.locks.pop(side, None)
                contacts[side] = 0.0
        if any(v >= 0.5 for v in contacts.values()):
            from .kinematics import contact_ik
            pose = contact_ik(self.skel, pose, contacts, self.locks).pose
        return pose

    # -- normal mode -------------------------------------------------------------

    def control_cycle(self, frames: list[TrackerFrame]) -> tuple[Action, CycleDebug]:
        """Predict a nine-frame reference clip and ask the policy for a target.

        `frames` are the three newest real input frames. On predictor
        divergence the previous action is reused and the session is flagged
        degraded.
        """
        cfg = self.config
        if cfg.forecast:
            future = signal_forecast(frames, FORECAST_LEN)
        else:
            last = frames[-1]
            future = [last.copy() for _ in range(FORECAST_LEN)]
        clip_inputs = list(frames) + future

        if cfg.heading_source == "predictor":
            h0 = self.pred_state.heading.copy()
        else:
            from .kinematics import extract_heading
            h0 = extract_heading(pose_from_sim(self.sim_state),
                                 fallback=self.pred_state.heading)
        g_lo0, g_up0 = g_from_sim(self.sim, self.sim_state, h0, self.last_delta_h)

        state = PredictorState(g_lo=g_lo0, g_up=g_up0, heading=h0,
                               hidden=self.pred_state.hidden)
        clip_states: list[PredictorState] = []
        degraded = False
        try:
            for i, frame in enumerate(clip_inputs):
                state = predict_step(self.nets, frame, state)
                clip_states.append(state)
        except Exception:
            degraded = True
        if degraded or len(clip_states) < CLIP_LEN:
            self.degraded = True
            action = self.held_action or Action(np.zeros((self.skel.n_joints - 1, 3)))
            return action, CycleDebug([], action.target_rot, True)

        # persistent recurrent state advances by the three real frames only
        self.pred_state = clip_states[FRAMES_PER_CYCLE - 1]
        self.last_delta_h = (self.pred_state.g_lo[ft.LO_Z][ft.Z_DELTA_H].astype(float)
                             / ft.Z_DH_SCALE)

        refs = []
        for k in range(1, LOOKAHEAD + 1):
            st = clip_states[k * FRAMES_PER_CYCLE - 1]
            g_lo, g_up = _clip_frame_ik(self.skel, st,
                                        clip_inputs[k * FRAMES_PER_CYCLE - 1])
            refs.append((g_lo, g_up, st.heading))

        h_ref = self.pred_state.heading
        sim_quant = quant_from_sim(self.sim, self.sim_state)
        s = build_control_state(self.skel, sim_quant, h_ref, refs)
        mean = self.policy.act_mean(s)
        action = Action(target_rot=np.asarray(mean, dtype=float).reshape(-1, 3))
        self.held_action = action
        return action, CycleDebug(clip_states, mean, False)

    def push_frame(self, frame: TrackerFrame) -> Pose:
        """Feed one 30 Hz input frame; returns the current output pose."""
        cfg = self.config
        if cfg.one_point:
            frame = one_point_substitute(frame, self.skel, self.pred_state)
        self.frames_seen += 1
        if cfg.mode == "direct":
            return self._direct_step(frame)

        self.pending.append(frame)
        self.history.append(frame)
        if len(self.history) > FRAMES_PER_CYCLE:
            self.history = self.history[-FRAMES_PER_CYCLE:]
        if len(self.pending) == FRAMES_PER_CYCLE:
            action, _ = self.control_cycle(self.pending)
            self.pending = []
            self.cycles += 1
            self._advance_sim(action, frame)
        return pose_from_sim(self.sim_state)

    def _advance_sim(self, action: Action, newest: TrackerFrame):
        hand_targets = newest.pos[1:3]
        for _ in range(SUBSTEPS_PER_CYCLE):
            tau = None
            if self.config.correction:
                tau = correction_torques(self.sim, self.sim_state,
                                         hand_targets, self.correction)
            try:
                self.sim_state = self.sim.step(self.sim_state, action, tau)
            except SimulationDiverged:
                self._fall_reset()
                break
            self.substeps += 1
        if (self.sim.has_fallen(self.sim_state)
                and self.sim_state.time > self.fall_grace_until):
            self._fall_reset()

    def _fall_reset(self):
        """Reset the simulated character onto the predictor's pose."""
        pose = ft.decode_pose(self.skel, self.pred_state.g_lo.astype(float),
                              self.pred_state.g_up.astype(float),
                              self.pred_state.heading)
        t = self.sim_state.time
        self.sim_state = state_from_pose(pose)
        self.sim_state.time = t
        self.fall_grace_until = t + self.config.fall_reset_grace
        self.fall_resets += 1
        log.warning("fall fallback: simulation reset to predicted pose at t=%.2f", t)


def pose_from_sim(state: SimState) -> Pose:
    return Pose(state.root_pos.copy(), state.root_quat.copy(), state.joint_rot.copy())


def _initial_state_from_pose(nets, skel, pose) -> PredictorState:
    from .predictor import initial_predictor_state
    return initial_predictor_state(nets, skel, pose)


def _clip_frame_ik(skel: Skeleton, st: PredictorState,
                   frame: TrackerFrame) -> tuple[np.ndarray, np.ndarray]:
    """Pull the predicted clip's arms toward the (forecast) hand targets.

    Two-bone IK on each arm; the adjusted wrist/elbow/shoulder slots are
    written back into a copy of g_up. Head correction adjusts only the root
    height slot of g_lo toward the head tracker's height.
    """
    pose = ft.decode_pose(skel, st.g_lo.astype(float), st.g_up.astype(float), st.heading)
    for i, name in enumerate(("l_wrist", "r_wrist")):
        pose, _ = two_bone_ik(skel, pose, skel.index(name), frame.pos[1 + i])
    pos, quat = fk_pose(skel, pose)
    g_up = ft.encode_g_up(skel, st.heading[None], pos[None],
                          np.zeros((1, skel.n_joints, 3)), quat[None])[0]
    # keep the predictor's velocity estimates; IK only moved positions
    g_up = g_up.astype(np.float32)
    old = st.g_up.reshape(10, 9)
    new = g_up.reshape(10, 9)
    new[:, 3:6] = old[:, 3:6]
    g_lo = st.g_lo.copy()
    neck = skel.index("neck")
    dy = float(frame.pos[0][1] - pos[neck][1])
    g_lo[ft.LO_ROOT.start] += np.clip(dy, -0.05, 0.05)
    return g_lo, new.reshape(-1)


# ---------------------------------------------------------------------------
# offline driving of recorded streams
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    poses: list[Pose]
    joint_pos: np.ndarray            # (N, J, 3) world, per input frame
    hand_pos: np.ndarray             # (N, 2, 3)
    tracker_pos: np.ndarray          # (N, 3, 3) targets fed in
    fall_resets: int
    cycles: int
    substeps: int


def run_stream(system: TriposeSystem, frames: list[TrackerFrame]) -> RunResult:
    """Feed a recorded tracker stream; collect per-frame output poses."""
    poses = []
    joints = []
    hands = []
    targets = []
    skel = system.skel
    wrists = [skel.index("l_wrist"), skel.index("r_wrist")]
    for frame in frames:
        pose = system.push_frame(frame)
        poses.append(pose)
        pos, _ = fk_pose(skel, pose)
        joints.append(pos)
        hands.append(pos[wrists])
        targets.append(frame.pos.copy())
    return RunResult(poses=poses, joint_pos=np.stack(joints),
                     hand_pos=np.stack(hands), tracker_pos=np.stack(targets),
                     fall_resets=system.fall_resets, cycles=system.cycles,
                     substeps=system.substeps)


# ---------------------------------------------------------------------------
# combined fine-tuning
# ---------------------------------------------------------------------------

class CombinedEnv:
    """PPO environment over the full normal-mode loop on recorded trackers.

    Phase 1 disables forecasting and correction and rewards against the mocap
    reference; phase 2 enables both and rewards against the predictor's own
    output. The pose predictor stays frozen throughout.
    """

    def __init__(self, skel, nets, policy, clip: MotionClip,
                 weights: RewardWeights | None = None,
                 episode_cap: int = 100, phase: int = 1):
        self.skel = skel
        self.nets = nets
        self.clip = clip
        self.ref = reference_from_clip(clip)
        self.frames = extract_trackers(clip)
        self.weights = weights or RewardWeights()
        self.episode_cap = episode_cap
        self.phase = phase
        self.policy = policy
        self.system: TriposeSystem | None = None
        self.frame_idx = 0
        self.steps = 0
        self._pending_state = None

    def set_phase(self, phase: int):
        self.phase = phase

    def candidate_starts(self) -> np.ndarray:
        last = len(self.frames) - self.episode_cap * FRAMES_PER_CYCLE - 15
        step = FRAMES_PER_CYCLE * 2
        return np.arange(0, max(last, 1), step)

    def reset(self, frame: int) -> np.ndarray:
        cfg = LoopConfig(mode="normal",
                         correction=self.phase >= 2,
                         forecast=self.phase >= 2)
        self.system = TriposeSystem(self.skel, self.nets, self.policy, cfg)
        self.frame_idx = int(frame)
        pose = self.ref.poses[self.frame_idx]
        self.system.reset(pose)
        st = state_from_pose(pose)
        q = self.ref.quants[self.frame_idx]
        st.lin_vel = q.joint_vel[0].copy()
        from .policy import _angular_velocities_from_ref
        st.ang_vel, st.joint_vel = _angular_velocities_from_ref(self.ref, self.frame_idx)
        self.system.sim_state = st
        self.system.pred_state = state_from_vectors(
            self.nets, self.ref.feats.g_lo[self.frame_idx],
            self.ref.feats.g_up[self.frame_idx], self.ref.feats.heading[self.frame_idx])
        self.steps = 0
        return self._observe()

    def _next_frames(self):
        f = self.frame_idx
        return [self.frames[min(f + i, len(self.frames) - 1)] for i in range(1, 4)]

    def _observe(self) -> np.ndarray:
        frames = self._next_frames()
        action, debug = self.system.control_cycle(frames)
        self._pending = (frames, action, debug)
        # observation = the control state the policy just saw; rebuild it
        refs = []
        for k in range(1, LOOKAHEAD + 1):
            if debug.clip_states:
                st = debug.clip_states[k * FRAMES_PER_CYCLE - 1]
                refs.append((st.g_lo, st.g_up, st.heading))
            else:
                g_lo, g_up = g_from_sim(self.system.sim, self.system.sim_state,
                                        self.system.pred_state.heading)
                refs.append((g_lo, g_up, self.system.pred_state.heading))
        return build_control_state(self.skel, quant_from_sim(self.system.sim,
                                                             self.system.sim_state),
                                   self.system.pred_state.heading, refs)

    def step(self, action_vec: np.ndarray):
        frames, _, debug = self._pending
        action = Action(target_rot=np.asarray(action_vec, dtype=float).reshape(-1, 3))
        self.system.held_action = action
        self.system._advance_sim(action, frames[-1])
        self.system.cycles += 1
        self.frame_idx += FRAMES_PER_CYCLE
        self.steps += 1

        f = min(self.frame_idx + FRAMES_PER_CYCLE, len(self.frames) - 1)
        sim_q = quant_from_sim(self.system.sim, self.system.sim_state)
        if self.phase >= 2 and debug.clip_states:
            ref_q, contacts = _quant_from_prediction(self.skel, self.nets,
                                                     debug.clip_states[FRAMES_PER_CYCLE - 1])
        else:
            ref_q = self.ref.quants[f]
            contacts = self.ref.contacts[f]
        r = reward(sim_q, ref_q, contacts, self.weights)
        fell = self.system.sim.has_fallen(self.system.sim_state)
        out_of_clip = self.frame_idx >= len(self.frames) - 4 * FRAMES_PER_CYCLE
        done = fell or out_of_clip or self.steps >= self.episode_cap
        return self._observe() if not done else np.zeros(1, dtype=np.float32), r, done, {}


def _quant_from_prediction(skel, nets, st: PredictorState):
    """Reward reference quantities from a predictor output state."""
    from .policy import BodyQuant
    pose = ft.decode_pose(skel, st.g_lo.astype(float), st.g_up.astype(float), st.heading)
    pos, quat = fk_pose(skel, pose)
    # velocities from the predicted v slots (heading-local -> world)
    vel = np.zeros((skel.n_joints, 3))
    lo = st.g_lo[:72].reshape(8, 9)
    up = st.g_up.reshape(10, 9)
    h = st.heading
    c, s = np.cos(h[2]), np.sin(h[2])

    def to_world_vec(v):
        return np.array([c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]])

    for i, j in enumerate(skel.lower):
        vel[j] = to_world_vec(lo[i, 3:6])
    for i, j in enumerate(skel.upper):
        vel[j] = to_world_vec(up[i, 3:6])
    masses = skel.masses
    coms = pos + ft.bquat_rotate(quat, skel.coms)
    com = (masses[:, None] * coms).sum(axis=0) / masses.sum()
    la, ra = skel.index("l_ankle"), skel.index("r_ankle")
    clear = np.maximum(ft.foot_clearance(skel, pos[None], quat[None])[0], 0.0)
    local_omega = np.zeros((skel.n_joints - 1, 3))
    quant = BodyQuant(joint_pos=pos, joint_quat=quat, joint_vel=vel,
                      local_rot=pose.joint_rot, local_omega=local_omega,
                      com=com, foot_pos=pos[[la, ra]], foot_vel=vel[[la, ra]],
                      foot_height=clear)
    labels = st.g_lo[ft.LO_CONTACTS].astype(float)
    return quant, labels


@dataclass
class CombinedResult:
    history: list
    phase_switch: int | None


def finetune_combined(skel, nets: PredictorNets, policy: PolicyNet, value: ValueNet,
                      clip: MotionClip, iterations: int, seed: int,
                      cfg=None, plateau_window: int = 20,
                      plateau_improvement: float = 0.01,
                      episode_cap: int = 60) -> CombinedResult:
    """Two-phase PPO over the full loop; the pose predictor stays frozen.

    Phase 2 starts once the `plateau_window`-iteration mean reward improves
    by less than `plateau_improvement` relative, enabling forecasting and
    correction and switching the reward reference to the predictor output.
    """
    from .policy import PPOConfig, collect_rollouts, ppo_update, InitDistribution
    from .neuralnet import Adam
    cfg = cfg or PPOConfig(batch_steps=600, episode_cap=episode_cap)
    env = CombinedEnv(skel, nets, policy, clip, episode_cap=episode_cap, phase=1)
    rng = nn.make_rng(seed)
    dist = InitDistribution.uniform(env.candidate_starts())
    opt_p = Adam(policy.parameters(), lr=cfg.lr_policy)
    opt_v = Adam(value.parameters(), lr=cfg.lr_value)
    g_before = nets.checksum()
    history = []
    switch_at = None
    rewards = []
    for it in range(iterations):
        batch = collect_rollouts(policy, value, env, dist, cfg.batch_steps, rng)
        stats = ppo_update(policy, value, batch, cfg, rng, opt_p, opt_v)
        history.append(stats)
        rewards.append(stats.mean_reward)
        if switch_at is None and len(rewards) >= 2 * plateau_window:
            recent = np.mean(rewards[-plateau_window:])
            older = np.mean(rewards[-2 * plateau_window:-plateau_window])
            if recent - older < plateau_improvement * max(abs(older), 1e-9):
                switch_at = it
                env.set_phase(2)
    assert nets.checksum() == g_before, "the pose predictor must stay frozen"
    return CombinedResult(history=history, phase_switch=switch_at)
