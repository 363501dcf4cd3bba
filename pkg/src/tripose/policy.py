"""Full-body tracking control policy: reward suite, PPO training with
adaptive state initialization, and the behavior-cloning warm start.

The policy maps a control state (current simulation state plus three future
reference states, all expressed relative to one reference heading frame) to a
target pose for the PD servos. Training imitates reference motion: the reward
is exp(sum of weighted non-positive terms), 1 exactly at perfect tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from . import neuralnet as nn
from .dataio import MotionClip
from .dynamics import Action, SimState, Simulator, SimulationDiverged, state_from_pose
from .features import G_LO_DIM, G_UP_DIM
from .kinematics import Pose, Skeleton
from .neuralnet import MLP, Adam, GaussianHead, Tensor, clip_grad_norm

CONTROL_DT = 0.1
SUBSTEPS = 12                 # 120 Hz simulation under a 10 Hz policy
GAMMA = 0.99
GAE_LAMBDA = 0.95
CLIP_RATIO = 0.2
LR_POLICY = 1e-5
LR_VALUE = 1e-4
PPO_EPOCHS = 5
MINIBATCH = 256
EPISODE_CAP = 300
BATCH_STEPS = 4000
INIT_TEMPERATURE = 5.0
INIT_REFRESH = 100

BODY_FEAT = 9                 # p, v, q-rotvec per body
REF_FEAT = G_LO_DIM + G_UP_DIM + 3   # one reference state + its relative heading
LOOKAHEAD = 3


def control_state_dim(skel: Skeleton) -> int:
    return BODY_FEAT * skel.n_joints + LOOKAHEAD * REF_FEAT


def action_dim(skel: Skeleton) -> int:
    return 3 * (skel.n_joints - 1)


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

@dataclass
class RewardWeights:
    pose: float = 5.0
    orient: float = 10.0
    pos: float = 10.0
    balance: float = 10.0
    contact: float = 10.0
    foot: float = 10.0
    foot_eps: float = 0.03    # height above which a foot counts as lifted


@dataclass
class BodyQuant:
    """Per-frame physical quantities a reward comparison needs."""
    joint_pos: np.ndarray       # (J, 3) world joint positions
    joint_quat: np.ndarray      # (J, 4) world bone orientations
    joint_vel: np.ndarray       # (J, 3) world joint linear velocities
    local_rot: np.ndarray       # (J-1, 3) joint rotation vectors
    local_omega: np.ndarray     # (J-1, 3) relative angular velocity, parent frame
    com: np.ndarray             # (3,) whole-body COM
    foot_pos: np.ndarray        # (2, 3) ankle positions (left, right)
    foot_vel: np.ndarray        # (2, 3)
    foot_height: np.ndarray     # (2,) contact-sphere clearance, >= 0


def balance_weights(ref: BodyQuant, eps: float) -> np.ndarray:
    """Per-foot balance weights; a moving or lifted (reference) foot weighs more.

    Always sums to 1; the all-static case splits evenly.
    """
    raw = np.array([
        np.hypot(ref.foot_vel[i, 0], ref.foot_vel[i, 2])
        + 5.0 * max(0.0, ref.foot_height[i] - eps)
        for i in range(2)
    ])
    total = raw.sum()
    if total <= 0.0:
        return np.array([0.5, 0.5])
    return raw / total


def reward_terms(sim: BodyQuant, ref: BodyQuant, contacts: np.ndarray,
                 weights: RewardWeights) -> dict[str, float]:
    """The six non-positive tracking residuals (before weighting)."""
    nj = sim.local_rot.shape[0]
    # local pose: rotation angle of the relative quaternion + angular speed
    from .features import bquat_mul, bquat_conj, brotvec_to_quat, bquat_canonical
    q_sim = brotvec_to_quat(sim.local_rot)
    q_ref = brotvec_to_quat(ref.local_rot)
    rel = bquat_canonical(bquat_mul(q_ref, bquat_conj(q_sim)))
    angles = 2.0 * np.arctan2(np.linalg.norm(rel[:, 1:], axis=-1), rel[:, 0])
    omega_err = np.linalg.norm(ref.local_omega - sim.local_omega, axis=-1)
    r_pose = -float(np.mean(angles + 0.1 * omega_err))

    # global bone orientations / positions (internal joints)
    qg_rel = bquat_canonical(bquat_mul(ref.joint_quat[1:], bquat_conj(sim.joint_quat[1:])))
    g_angles = 2.0 * np.arctan2(np.linalg.norm(qg_rel[:, 1:], axis=-1), qg_rel[:, 0])
    r_orient = -float(np.mean(g_angles))
    r_pos = -float(np.mean(np.linalg.norm(ref.joint_pos[1:] - sim.joint_pos[1:], axis=-1)))

    w = balance_weights(ref, weights.foot_eps)
    r_balance = 0.0
    for i in range(2):
        d_sim = sim.com - sim.foot_pos[i]
        d_ref = ref.com - ref.foot_pos[i]
        r_balance -= w[i] * (np.linalg.norm(d_ref - d_sim)
                             + np.linalg.norm(ref.foot_vel[i] - sim.foot_vel[i]))
    r_contact = -float(sum(contacts[i] * np.linalg.norm(ref.foot_pos[i] - sim.foot_pos[i])
                           for i in range(2)))
    r_foot = -float(sum(abs(ref.foot_height[i] - sim.foot_height[i]) for i in range(2)))
    return {"pose": r_pose, "orient": r_orient, "pos": r_pos,
            "balance": float(r_balance), "contact": r_contact, "foot": r_foot}


def reward(sim: BodyQuant, ref: BodyQuant, contacts: np.ndarray,
           weights: RewardWeights | None = None) -> float:
    """R = exp(sum of weighted residuals), in (0, 1], and 1 iff all zero."""
    weights = weights or RewardWeights()
    t = reward_terms(sim, ref, contacts, weights)
    exponent = (weights.pose * t["pose"] + weights.orient * t["orient"]
                + weights.pos * t["pos"] + weights.balance * t["balance"]
                + weights.contact * t["contact"] + weights.foot * t["foot"])
    return float(np.exp(exponent))


# ---------------------------------------------------------------------------
# body quantities from simulation and reference clips
# ---------------------------------------------------------------------------

def quant_from_sim(sim: Simulator, state: SimState) -> BodyQuant:
    kin = sim._kinematics(state)
    skel = sim.skel
    prot = kin.rot[skel.parents[1:]]
    local_omega = np.einsum("kba,kb->ka", prot, state.joint_vel)
    masses = skel.masses
    com = (masses[:, None] * kin.com).sum(axis=0) / masses.sum()
    l_ankle, r_ankle = skel.index("l_ankle"), skel.index("r_ankle")
    foot_pos = kin.pos[[l_ankle, r_ankle]]
    foot_vel = kin.anchor_vel[[l_ankle, r_ankle]]
    clear = _foot_clearance_from_kin(sim, kin)
    return BodyQuant(joint_pos=kin.pos, joint_quat=kin.quat, joint_vel=kin.anchor_vel,
                     local_rot=state.joint_rot.copy(), local_omega=local_omega,
                     com=com, foot_pos=foot_pos, foot_vel=foot_vel,
                     foot_height=clear)


def _foot_clearance_from_kin(sim: Simulator, kin) -> np.ndarray:
    clear = np.full(2, np.inf)
    for sph in sim.spheres:
        if sph.foot is None:
            continue
        center = kin.pos[sph.joint] + kin.rot[sph.joint] @ sph.offset
        col = 0 if sph.foot == "left" else 1
        clear[col] = min(clear[col], center[1] - sph.radius)
    return np.maximum(clear, 0.0)


@dataclass
class ReferenceClip:
    """Precomputed reference quantities of a motion clip at its native rate."""
    skel: Skeleton
    fps: float
    quants: list[BodyQuant]
    contacts: np.ndarray          # (N, 2)
    feats: ft.ClipFeatures
    poses: list[Pose]

    def __len__(self):
        return len(self.quants)


def reference_from_clip(clip: MotionClip) -> ReferenceClip:
    skel = clip.skeleton
    feats = ft.clip_features(skel, clip.fps, clip.root_pos, clip.root_quat,
                             clip.joint_rot, clip.contacts)
    pos, quat = ft.batch_fk(skel, clip.root_pos, clip.root_quat, clip.joint_rot)
    dt = 1.0 / clip.fps
    vel = np.gradient(pos, dt, axis=0) if len(clip) > 1 else np.zeros_like(pos)
    local_q = ft.brotvec_to_quat(clip.joint_rot)
    n = len(clip)
    omega = np.zeros((n, skel.n_joints - 1, 3))
    if n > 1:
        rel = ft.bquat_mul(local_q[1:], ft.bquat_conj(local_q[:-1]))
        step_omega = ft.bquat_to_rotvec(rel) / dt
        omega[:-1] = step_omega
        omega[1:] = 0.5 * (omega[1:] + step_omega)
    masses = skel.masses
    coms = pos + ft.bquat_rotate(quat, skel.coms[None])
    com = (masses[None, :, None] * coms).sum(axis=1) / masses.sum()
    l_ankle, r_ankle = skel.index("l_ankle"), skel.index("r_ankle")
    clear = np.maximum(ft.foot_clearance(skel, pos, quat), 0.0)
    quants = []
    contacts = clip.contacts if clip.contacts is not None else feats.contacts
    for i in range(n):
        quants.append(BodyQuant(
            joint_pos=pos[i], joint_quat=quat[i], joint_vel=vel[i],
            local_rot=clip.joint_rot[i], local_omega=omega[i], com=com[i],
            foot_pos=pos[i][[l_ankle, r_ankle]], foot_vel=vel[i][[l_ankle, r_ankle]],
            foot_height=clear[i]))
    return ReferenceClip(skel=skel, fps=clip.fps, quants=quants,
                         contacts=np.asarray(contacts, dtype=float),
                         feats=feats, poses=[clip.pose(i) for i in range(n)])


def build_control_state(skel: Skeleton, sim_quant: BodyQuant, h_ref: np.ndarray,
                        refs: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> np.ndarray:
    """Flatten the policy input: sim bodies relative to the reference heading
    plus the upcoming reference states (their vectors + relative headings).

    Each entry of refs is (g_lo, g_up, heading_of_that_state).
    """
    from .kinematics import heading_compose, heading_inverse
    hj = np.asarray(h_ref, dtype=float)
    p = ft.heading_local_point(hj[None], sim_quant.joint_pos)
    v = ft.heading_local_vec(hj[None], sim_quant.joint_vel)
    q = ft.bquat_to_rotvec(ft.heading_local_quat(hj[None], sim_quant.joint_quat))
    parts = [np.concatenate([p, v, q], axis=-1).reshape(-1)]
    for g_lo, g_up, h_state in refs:
        rel = heading_compose(heading_inverse(hj), np.asarray(h_state, dtype=float))
        parts.append(g_lo)
        parts.append(g_up)
        parts.append(rel)
    return np.concatenate(parts).astype(np.float32)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

POLICY_DROPOUT = [0.1, 0.1, 0.05, 0.02]   # warm-start only


class PolicyNet:
    """Four fully connected layers (two 256-unit hidden layers), ReLU."""

    def __init__(self, state_dim: int, act_dim: int, seed: int = 0,
                 hidden: tuple[int, ...] = (256, 256, 256), init_std: float = 0.1):
        rng = nn.make_rng(seed)
        self.mlp = MLP([state_dim] + list(hidden) + [act_dim], rng)
        self.head = GaussianHead(act_dim, init_std=init_std)
        self.state_dim = state_dim
        self.act_dim = act_dim
        self.dropout_active = False

    def forward(self, states: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        x = Tensor(np.asarray(states, dtype=np.float32))
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.state_dim:
            raise ValueError(f"state dim {x.shape[-1]} != {self.state_dim}")
        rates = POLICY_DROPOUT if (training and self.dropout_active) else None
        rates = rates[:len(self.mlp.layers)] if rates else None
        return self.mlp(x, dropout_rates=rates, training=training, rng=rng)

    def act_mean(self, state: np.ndarray) -> np.ndarray:
        with nn.no_grad():
            return self.forward(state).data[0]

    def sample(self, state: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        mean = self.act_mean(state)
        return nn.gaussian_sample_logprob(self.head, mean, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = self.mlp.parameters("pi")
        out.update(self.head.parameters("pi"))
        return out


class ValueNet:
    """Two 256-unit hidden layers."""

    def __init__(self, state_dim: int, seed: int = 1, hidden: tuple[int, ...] = (256, 256)):
        rng = nn.make_rng(seed)
        self.mlp = MLP([state_dim] + list(hidden) + [1], rng)
        self.state_dim = state_dim

    def forward(self, states: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(states, dtype=np.float32))
        if x.ndim == 1:
            x = x.reshape(1, -1)
        return self.mlp(x)

    def predict(self, states: np.ndarray) -> np.ndarray:
        with nn.no_grad():
            return self.forward(states).data[:, 0]

    def parameters(self) -> dict[str, Tensor]:
        return self.mlp.parameters("v")


# ---------------------------------------------------------------------------
# adaptive state initialization
# ---------------------------------------------------------------------------

@dataclass
class InitDistribution:
    candidates: np.ndarray      # indices into the reference timeline
    probs: np.ndarray

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.candidates, p=self.probs))

    @staticmethod
    def uniform(candidates) -> "InitDistribution":
        c = np.asarray(candidates, dtype=int)
        return InitDistribution(c, np.full(len(c), 1.0 / len(c)))


def update_init_distribution(values: np.ndarray, candidates,
                             temperature: float = INIT_TEMPERATURE) -> InitDistribution:
    """P(s) proportional to exp(-V(s)/T): low-value states start more often."""
    v = np.asarray(values, dtype=np.float64)
    logits = -v / temperature
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return InitDistribution(np.asarray(candidates, dtype=int), p)


# ---------------------------------------------------------------------------
# tracking environment (policy pretraining: reference straight from mocap)
# ---------------------------------------------------------------------------

class TrackingEnv:
    """PD-actuated character tracking a reference clip at 10 Hz control.

    The reference heading is taken from the reference motion (pretraining
    setting); episodes end on a fall, clip end, or the step cap.
    """

    def __init__(self, sim: Simulator, ref: ReferenceClip,
                 weights: RewardWeights | None = None,
                 episode_cap: int = EPISODE_CAP):
        self.sim = sim
        self.ref = ref
        self.weights = weights or RewardWeights()
        self.episode_cap = episode_cap
        self.frames_per_step = int(round(ref.fps * CONTROL_DT))
        self.state: SimState | None = None
        self.frame = 0
        self.steps = 0

    def candidate_starts(self) -> np.ndarray:
        last = len(self.ref) - (LOOKAHEAD + 1) * self.frames_per_step - 1
        return np.arange(0, max(last, 1), self.frames_per_step)

    def reset(self, frame: int) -> np.ndarray:
        self.frame = int(frame)
        self.steps = 0
        pose = self.ref.poses[self.frame]
        st = state_from_pose(pose)
        q = self.ref.quants[self.frame]
        st.lin_vel = q.joint_vel[0].copy()
        # root/joint angular velocities from the reference finite differences
        st.ang_vel, st.joint_vel = _angular_velocities_from_ref(self.ref, self.frame)
        self.state = st
        return self._observe()

    def _ref_tuple(self, frame):
        f = min(frame, len(self.ref) - 1)
        feats = self.ref.feats
        return (feats.g_lo[f].astype(np.float32), feats.g_up[f].astype(np.float32),
                feats.heading[f])

    def _observe(self) -> np.ndarray:
        h_ref = self.ref.feats.heading[min(self.frame, len(self.ref) - 1)]
        refs = [self._ref_tuple(self.frame + k * self.frames_per_step)
                for k in (1, 2, 3)]
        return build_control_state(self.sim.skel, quant_from_sim(self.sim, self.state),
                                   h_ref, refs)

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        act = Action(target_rot=np.asarray(action, dtype=float).reshape(-1, 3))
        diverged = False
        try:
            for _ in range(SUBSTEPS):
                self.state = self.sim.step(self.state, act)
        except SimulationDiverged:
            diverged = True
        self.frame += self.frames_per_step
        self.steps += 1
        done = diverged
        r = 0.0
        if not diverged:
            f = min(self.frame, len(self.ref) - 1)
            sim_q = quant_from_sim(self.sim, self.state)
            r = reward(sim_q, self.ref.quants[f], self.ref.contacts[f], self.weights)
            fallen = self.sim.has_fallen(self.state)
            out_of_clip = self.frame >= len(self.ref) - LOOKAHEAD * self.frames_per_step
            done = fallen or out_of_clip or self.steps >= self.episode_cap
        return (self._observe() if not diverged else np.zeros(control_state_dim(self.sim.skel), dtype=np.float32),
                r, done, {"diverged": diverged, "frame": self.frame})


def _angular_velocities_from_ref(ref: ReferenceClip, frame: int):
    f0 = max(frame - 1, 0)
    f1 = frame
    dt = (f1 - f0) / ref.fps
    from .kinematics import quat_mul, quat_conj, quat_to_rotvec
    if dt == 0.0:
        return np.zeros(3), np.zeros((ref.skel.n_joints - 1, 3))
    q0 = ref.quants[f0]
    q1 = ref.quants[f1]
    ang = quat_to_rotvec(quat_mul(q1.joint_quat[0], quat_conj(q0.joint_quat[0]))) / dt
    # relative angular velocities in world coordinates
    jv = np.zeros((ref.skel.n_joints - 1, 3))
    parents = ref.skel.parents
    omega = {0: ang}
    for k in range(1, ref.skel.n_joints):
        w_abs = ft.bquat_to_rotvec(ft.bquat_mul(q1.joint_quat[k][None],
                                                ft.bquat_conj(q0.joint_quat[k][None])))[0] / dt
        jv[k - 1] = w_abs - omega[parents[k]]
        omega[k] = w_abs
    return ang, jv


# ---------------------------------------------------------------------------
# rollout collection + PPO
# ---------------------------------------------------------------------------

@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    episode_returns: list[float]
    episode_lengths: list[int]

    def __len__(self):
        return len(self.states)


@dataclass
class PPOConfig:
    gamma: float = GAMMA
    lam: float = GAE_LAMBDA
    clip_ratio: float = CLIP_RATIO
    lr_policy: float = LR_POLICY
    lr_value: float = LR_VALUE
    epochs: int = PPO_EPOCHS
    minibatch: int = MINIBATCH
    grad_clip: float = 1.0
    batch_steps: int = BATCH_STEPS
    episode_cap: int = EPISODE_CAP
    init_temperature: float = INIT_TEMPERATURE
    init_refresh: int = INIT_REFRESH


def collect_rollouts(policy: PolicyNet, value: ValueNet, env,
                     init_dist: InitDistribution, budget: int,
                     rng: np.random.Generator,
                     action_source=None) -> TransitionBatch:
    """Gather at least `budget` control steps of experience.

    Episodes start from states sampled from init_dist and run until the
    environment reports done (fall, cap, or end of reference). A scripted
    `action_source(env) -> action` replaces the policy when given (used by
    replay sanity checks).
    """
    states, actions, lps, rewards, values, dones = [], [], [], [], [], []
    ep_returns, ep_lengths = [], []
    total = 0
    while total < budget:
        s = env.reset(init_dist.sample(rng))
        ep_ret, ep_len = 0.0, 0
        done = False
        while not done:
            if action_source is not None:
                a = action_source(env)
                lp = policy.head.log_prob_np(policy.act_mean(s), a)
            else:
                a, lp = policy.sample(s, rng)
            v = float(value.predict(s[None])[0])
            s2, r, done, info = env.step(a)
            states.append(s)
            actions.append(a)
            lps.append(lp)
            rewards.append(r)
            values.append(v)
            dones.append(done)
            ep_ret += r
            ep_len += 1
            total += 1
            s = s2
        ep_returns.append(ep_ret)
        ep_lengths.append(ep_len)
    return TransitionBatch(
        states=np.asarray(states, dtype=np.float32),
        actions=np.asarray(actions, dtype=np.float32),
        log_probs=np.asarray(lps, dtype=np.float64),
        rewards=np.asarray(rewards, dtype=np.float64),
        values=np.asarray(values, dtype=np.float64),
        dones=np.asarray(dones, dtype=bool),
        episode_returns=ep_returns, episode_lengths=ep_lengths)


def empty_batch(state_dim: int, act_dim: int) -> TransitionBatch:
    return TransitionBatch(np.zeros((0, state_dim), np.float32),
                           np.zeros((0, act_dim), np.float32),
                           np.zeros(0), np.zeros(0), np.zeros(0),
                           np.zeros(0, dtype=bool), [], [])


def compute_gae(batch: TransitionBatch, gamma: float, lam: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    Episodes are delimited by done flags; terminal bootstrap value is zero
    (episodes end on failure or at the cap/clip end).
    """
    n = len(batch)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        next_value = 0.0 if batch.dones[t] else (batch.values[t + 1] if t + 1 < n else 0.0)
        delta = batch.rewards[t] + gamma * next_value - batch.values[t]
        last = delta + gamma * lam * (0.0 if batch.dones[t] else last)
        adv[t] = last
    returns = adv + batch.values
    return adv, returns


@dataclass
class PPOStats:
    policy_loss: float
    value_loss: float
    kl: float
    clip_fraction: float
    mean_reward: float
    mean_episode_len: float


def ppo_update(policy: PolicyNet, value: ValueNet, batch: TransitionBatch,
               cfg: PPOConfig, rng: np.random.Generator,
               opt_policy: Adam | None = None, opt_value: Adam | None = None
               ) -> PPOStats:
    """Clipped-surrogate update plus value regression.

    On a NaN loss the update aborts and both networks keep their previous
    weights.
    """
    if len(batch) == 0:
        return PPOStats(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    adv, returns = compute_gae(batch, cfg.gamma, cfg.lam)
    adv_std = adv.std()
    adv_n = (adv - adv.mean()) / (adv_std + 1e-8)

    p_params = policy.parameters()
    v_params = value.parameters()
    opt_policy = opt_policy or Adam(p_params, lr=cfg.lr_policy)
    opt_value = opt_value or Adam(v_params, lr=cfg.lr_value)
    snapshot_p = {k: p.data.copy() for k, p in p_params.items()}
    snapshot_v = {k: p.data.copy() for k, p in v_params.items()}

    kls, clip_fracs, p_losses, v_losses = [], [], [], []
    n = len(batch)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            mean = policy.forward(batch.states[idx])
            lp = policy.head.log_prob(mean, batch.actions[idx])
            ratio = (lp - Tensor(batch.log_probs[idx].astype(np.float32))).exp()
            a = Tensor(adv_n[idx].astype(np.float32))
            surr = nn.minimum(ratio * a,
                              ratio.clip(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * a)
            p_loss = -surr.mean()
            opt_policy.zero_grad()
            p_loss.backward()
            clip_grad_norm(p_params, cfg.grad_clip)
            pl = p_loss.item()

            v_pred = value.forward(batch.states[idx]).reshape(len(idx))
            diff = v_pred - Tensor(returns[idx].astype(np.float32))
            v_loss = (diff * diff).mean()
            opt_value.zero_grad()
            v_loss.backward()
            clip_grad_norm(v_params, cfg.grad_clip)
            vl = v_loss.item()

            if not (np.isfinite(pl) and np.isfinite(vl)):
                nn.assign_params(p_params, snapshot_p)
                nn.assign_params(v_params, snapshot_v)
                return PPOStats(float("nan"), float("nan"), 0.0, 0.0,
                                float(batch.rewards.mean()),
                                float(np.mean(batch.episode_lengths)))
            opt_policy.step()
            opt_value.step()

            with nn.no_grad():
                lp_new = policy.head.log_prob(policy.forward(batch.states[idx]),
                                              batch.actions[idx]).data
            kls.append(float(np.mean(batch.log_probs[idx] - lp_new)))
            ratio_np = np.exp(lp_new - batch.log_probs[idx])
            clip_fracs.append(float(np.mean(np.abs(ratio_np - 1.0) > cfg.clip_ratio)))
            p_losses.append(pl)
            v_losses.append(vl)

    return PPOStats(policy_loss=float(np.mean(p_losses)),
                    value_loss=float(np.mean(v_losses)),
                    kl=float(np.mean(kls)),
                    clip_fraction=float(np.mean(clip_fracs)),
                    mean_reward=float(batch.rewards.mean()),
                    mean_episode_len=float(np.mean(batch.episode_lengths)))


def train_ppo(policy: PolicyNet, value: ValueNet, env, iterations: int,
              seed: int, cfg: PPOConfig | None = None,
              stats_writer=None) -> list[PPOStats]:
    """The full loop: rollouts, PPO updates, periodic init-distribution refresh."""
    cfg = cfg or PPOConfig()
    rng = nn.make_rng(seed)
    candidates = env.candidate_starts()
    dist = InitDistribution.uniform(candidates)
    opt_p = Adam(policy.parameters(), lr=cfg.lr_policy)
    opt_v = Adam(value.parameters(), lr=cfg.lr_value)
    history = []
    for it in range(iterations):
        batch = collect_rollouts(policy, value, env, dist, cfg.batch_steps, rng)
        stats = ppo_update(policy, value, batch, cfg, rng, opt_p, opt_v)
        history.append(stats)
        if stats_writer is not None:
            stats_writer(it, stats)
        if (it + 1) % cfg.init_refresh == 0:
            values = np.array([float(value.predict(env.reset(c)[None])[0])
                               for c in candidates])
            dist = update_init_distribution(values, candidates, cfg.init_temperature)
    return history


def write_training_stats(path, history: list[PPOStats]):
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "meanReward", "meanEpisodeLen",
                    "klDivergence", "clipFraction"])
        for i, s in enumerate(history):
            w.writerow([i, f"{s.mean_reward:.6f}", f"{s.mean_episode_len:.2f}",
                        f"{s.kl:.6f}", f"{s.clip_fraction:.4f}"])


# ---------------------------------------------------------------------------
# behavior-cloning warm start
# ---------------------------------------------------------------------------

def warm_start(policy: PolicyNet, env: TrackingEnv, epochs: int, seed: int,
               lr: float = 1e-3, batch_size: int = 256) -> list[float]:
    """Supervised jump-start: regress the policy toward the reference's own
    next-control-step pose along perfect-tracking states.

    Dropout (0.1, 0.1, 0.05, 0.02 before the four layers) is active here only;
    it is switched off again for the subsequent reinforcement learning.
    """
    ref = env.ref
    fps_step = env.frames_per_step
    frames = np.arange(0, len(ref) - (LOOKAHEAD + 1) * fps_step, fps_step)
    states, targets = [], []
    for f in frames:
        h_ref = ref.feats.heading[f]
        refs = [(ref.feats.g_lo[f + k * fps_step].astype(np.float32),
                 ref.feats.g_up[f + k * fps_step].astype(np.float32),
                 ref.feats.heading[f + k * fps_step]) for k in (1, 2, 3)]
        states.append(build_control_state(ref.skel, ref.quants[f], h_ref, refs))
        targets.append(ref.poses[f + fps_step].joint_rot.reshape(-1))
    states = np.asarray(states, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)

    params = policy.parameters()
    opt = Adam(params, lr=lr)
    rng = nn.make_rng(seed)
    policy.dropout_active = True
    losses = []
    try:
        for _ in range(epochs):
            order = rng.permutation(len(states))
            total, nb = 0.0, 0
            for s in range(0, len(states), batch_size):
                idx = order[s:s + batch_size]
                mean = policy.forward(states[idx], training=True, rng=rng)
                diff = mean - Tensor(targets[idx])
                loss = (diff * diff).mean()
                opt.zero_grad()
                loss.backward()
                clip_grad_norm(params, 1.0)
                opt.step()
                total += loss.item()
                nb += 1
            losses.append(total / max(nb, 1))
    finally:
        policy.dropout_active = False
    return losses


# ---------------------------------------------------------------------------
# miniature pendulum tracking task (training-stack self test)
# ---------------------------------------------------------------------------

class PendulumTrackingEnv:
    """1-DoF pendulum driven by the articulated simulator, tracking a sine.

    Uses the same reward shape (exp of the weighted pose residual) and the
    same control timescale as the full task, so it exercises the complete
    PPO stack end to end at toy scale.
    """

    def __init__(self, episode_cap: int = 60, amplitude: float = 0.6,
                 period: float = 2.0):
        from .dynamics import PDParams
        from .kinematics import Joint, Skeleton
        inertia = np.diag([0.02, 0.01, 0.02])
        joints = (
            Joint("base", -1, np.zeros(3), 1.0, np.zeros(3), np.eye(3) * 0.01, "root"),
            Joint("bob", 0, np.zeros(3), 2.0, np.array([0.0, -0.5, 0.0]), inertia, "up"),
        )
        skel = Skeleton(joints=joints, spheres=(), total_height=1.0)
        self.sim = Simulator(skel, pd=PDParams(kp=60.0, kd=5.0), gravity=0.0,
                             fixed_base=True)
        self.episode_cap = episode_cap
        self.amplitude = amplitude
        self.period = period
        self.state: SimState | None = None
        self.t = 0.0
        self.steps = 0

    @property
    def state_dim(self):
        return 5   # q, qd, and the next three reference targets

    def candidate_starts(self) -> np.ndarray:
        return np.arange(0, int(round(self.period / CONTROL_DT)))

    def _target(self, t: float) -> float:
        return self.amplitude * np.sin(2.0 * np.pi * t / self.period)

    def reset(self, phase_idx: int) -> np.ndarray:
        self.t = float(phase_idx) * CONTROL_DT
        self.steps = 0
        q0 = self._target(self.t)
        self.state = SimState(root_pos=np.zeros(3), root_quat=np.array([1.0, 0, 0, 0]),
                              joint_rot=np.array([[q0, 0.0, 0.0]]),
                              lin_vel=np.zeros(3), ang_vel=np.zeros(3),
                              joint_vel=np.zeros((1, 3)))
        return self._observe()

    def _observe(self) -> np.ndarray:
        q = self.state.joint_rot[0, 0]
        qd = self.state.joint_vel[0, 0]
        lookahead = [self._target(self.t + k * CONTROL_DT) for k in (1, 2, 3)]
        return np.array([q, qd, *lookahead], dtype=np.float32)

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        target = float(np.asarray(action).reshape(-1)[0])
        act = Action(target_rot=np.array([[target, 0.0, 0.0]]))
        for _ in range(SUBSTEPS):
            self.state = self.sim.step(self.state, act)
        self.t += CONTROL_DT
        self.steps += 1
        err = abs(self.state.joint_rot[0, 0] - self._target(self.t))
        werr = abs(self.state.joint_vel[0, 0]
                   - 2.0 * np.pi / self.period * self.amplitude
                   * np.cos(2.0 * np.pi * self.t / self.period))
        r = float(np.exp(5.0 * -(err + 0.1 * werr)))
        done = self.steps >= self.episode_cap
        return self._observe(), r, done, {}
