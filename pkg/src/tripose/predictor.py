"""Decoupled full-body pose predictor.

Three recurrent sub-networks cooperate, all operating in heading-local
coordinates (see features.py for the vector layouts):

- signal net: tracker input -> aggregated upper-body state estimate
- lower net: aggregated state + previous lower state -> lower body, foot
  contacts, root residual, and the next-step aggregated state
- upper net: tracker input (in the updated heading) + previous upper state
  -> upper body and the next-step tracker input

One prediction step, given tracker input o, previous state and heading:

    z~      = sig(local(o, h_prev))
    g_lo, z* = lo(z~, g_lo_prev)
    h        = h_prev * delta_h          (delta_h taken from g_lo)
    g_up, o* = up(local(o, h), g_up_prev)

Training is two-stage: each sub-net pretrains with teacher forcing on window
datasets, then the whole predictor fine-tunes autoregressively with the upper
net frozen. The next-step predictions (z*, o*) let the system forecast its
own input, which enables head-only (one-point) tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from . import neuralnet as nn
from .dataio import TrackerFrame, Window
from .features import G_LO_DIM, G_UP_DIM, LO_CONTACTS, LO_Z, O_DIM, Z_DIM
from .kinematics import (
    Pose,
    Skeleton,
    contact_ik,
    fk_pose,
    heading_compose,
)
from .neuralnet import Adam, Dense, GRUCell, Tensor, clip_grad_norm, concat, narrow

SIG_HIDDEN = 64
LO_HIDDEN = 128
UP_HIDDEN = 128
GRU_LAYERS = 3
DROP_ENC = 0.1
DROP_DEC = 0.05
WINDOW = 60
BATCH = 32
LEARNING_RATE = 5e-4


class PredictionDiverged(RuntimeError):
    pass


@dataclass
class PredictorConfig:
    w_heading: float = 1.0
    w_fk: float = 0.5
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH
    grad_clip: float = 1.0
    # fraction of fine-tuning epochs over which scheduled sampling ramps from
    # fully teacher-forced to fully autoregressive feedback
    sampling_ramp: float = 0.3


class SubNet:
    """Dense encoder -> stacked GRU layers -> dense decoder."""

    def __init__(self, name: str, in_size: int, hidden: int, out_size: int,
                 rng: np.random.Generator):
        self.name = name
        self.enc = Dense(in_size, hidden, rng)
        self.grus = [GRUCell(hidden, hidden, rng) for _ in range(GRU_LAYERS)]
        self.dec = Dense(hidden, out_size, rng)
        self.hidden = hidden

    def initial_state(self, batch: int) -> list[Tensor]:
        return [g.initial_state(batch) for g in self.grus]

    def forward(self, x: Tensor, state: list[Tensor], training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
        h = self.enc(x).relu()
        h = nn.dropout(h, DROP_ENC, training, rng)
        new_state = []
        for cell, s in zip(self.grus, state):
            h = cell.step(h, s)
            new_state.append(h)
        h = nn.dropout(h, DROP_DEC, training, rng)
        return self.dec(h), new_state

    def parameters(self) -> dict[str, Tensor]:
        out = self.enc.parameters(f"{self.name}.enc")
        for i, g in enumerate(self.grus):
            out.update(g.parameters(f"{self.name}.gru{i}"))
        out.update(self.dec.parameters(f"{self.name}.dec"))
        return out


class PredictorNets:
    """The three sub-predictors plus their I/O conventions."""

    def __init__(self, seed: int = 0):
        rng = nn.make_rng(seed)
        self.sig = SubNet("sig", O_DIM, SIG_HIDDEN, Z_DIM, rng)
        self.lo = SubNet("lo", Z_DIM + G_LO_DIM, LO_HIDDEN, G_LO_DIM + Z_DIM, rng)
        self.up = SubNet("up", O_DIM + G_UP_DIM, UP_HIDDEN, G_UP_DIM + O_DIM, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.sig.parameters(), **self.lo.parameters(), **self.up.parameters()}

    def initial_hidden(self, batch: int = 1) -> dict[str, list[Tensor]]:
        return {"sig": self.sig.initial_state(batch),
                "lo": self.lo.initial_state(batch),
                "up": self.up.initial_state(batch)}

    def save(self, path):
        nn.save_params(path, self.parameters())

    def load(self, path):
        nn.assign_params(self.parameters(), nn.load_params(path))

    def checksum(self, which: str | None = None) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            if which is None or name.startswith(which + "."):
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.digest()

    # -- sub-net calls with output splitting/squashing -------------------------

    def sig_step(self, o_local: Tensor, state, training=False, rng=None):
        z, state = self.sig.forward(o_local, state, training, rng)
        return z, state

    def lo_step(self, z_tilde: Tensor, g_lo_prev: Tensor, state, training=False, rng=None):
        raw, state = self.lo.forward(concat([z_tilde, g_lo_prev]), state, training, rng)
        g_lo = _squash_contacts(narrow(raw, 0, G_LO_DIM))
        z_next = narrow(raw, G_LO_DIM, Z_DIM)
        return g_lo, z_next, state

    def up_step(self, o_local: Tensor, g_up_prev: Tensor, state, training=False, rng=None):
        raw, state = self.up.forward(concat([o_local, g_up_prev]), state, training, rng)
        return narrow(raw, 0, G_UP_DIM), narrow(raw, G_UP_DIM, O_DIM), state


def _squash_contacts(g_lo: Tensor) -> Tensor:
    """Contact label slots pass through a logistic; everything else is linear."""
    return concat([
        narrow(g_lo, 0, LO_CONTACTS.start),
        narrow(g_lo, LO_CONTACTS.start, 2).sigmoid(),
        narrow(g_lo, LO_CONTACTS.stop, G_LO_DIM - LO_CONTACTS.stop),
    ])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class PredictorState:
    """Per-session autoregressive state owned by a single caller."""
    g_lo: np.ndarray
    g_up: np.ndarray
    heading: np.ndarray
    hidden: dict[str, list[Tensor]]
    o_next: np.ndarray | None = None     # last predicted next-step tracker input


def initial_predictor_state(nets: PredictorNets, skel: Skeleton, pose: Pose,
                            heading: np.ndarray | None = None) -> PredictorState:
    """Build the recurrent state for a session starting from a static pose."""
    from .kinematics import extract_heading
    h = extract_heading(pose) if heading is None else heading
    feats = ft.clip_features(skel, 30.0, pose.root_pos[None], pose.root_quat[None],
                             pose.joint_rot[None])
    return PredictorState(g_lo=feats.g_lo[0].astype(np.float32),
                          g_up=feats.g_up[0].astype(np.float32),
                          heading=h.copy(), hidden=nets.initial_hidden(1))


def state_from_vectors(nets: PredictorNets, g_lo: np.ndarray, g_up: np.ndarray,
                       heading: np.ndarray) -> PredictorState:
    """Session state from known feature vectors (e.g. ground truth or sim)."""
    return PredictorState(g_lo=g_lo.astype(np.float32), g_up=g_up.astype(np.float32),
                          heading=np.asarray(heading, dtype=float).copy(),
                          hidden=nets.initial_hidden(1))


def predict_step(nets: PredictorNets, o: TrackerFrame, state: PredictorState
                 ) -> PredictorState:
    """One autoregressive prediction step (inference mode, no gradients)."""
    with nn.no_grad():
        o_prev_local = ft.encode_trackers_local(state.heading, o.pos, o.quat)
        x = Tensor(o_prev_local[None].astype(np.float32))
        z_tilde, hid_sig = nets.sig_step(x, state.hidden["sig"])
        g_lo, z_next, hid_lo = nets.lo_step(z_tilde, Tensor(state.g_lo[None]),
                                            state.hidden["lo"])
        g_lo_np = g_lo.data[0]
        if not np.all(np.isfinite(g_lo_np)):
            raise PredictionDiverged("lower-body prediction diverged")
        delta_h = g_lo_np[LO_Z][ft.Z_DELTA_H].astype(float) / ft.Z_DH_SCALE
        heading = heading_compose(state.heading, delta_h)
        o_cur_local = ft.encode_trackers_local(heading, o.pos, o.quat)
        g_up, o_next, hid_up = nets.up_step(Tensor(o_cur_local[None].astype(np.float32)),
                                            Tensor(state.g_up[None]), state.hidden["up"])
        g_up_np = g_up.data[0]
        o_next_np = o_next.data[0]
        if not (np.all(np.isfinite(g_up_np)) and np.all(np.isfinite(o_next_np))):
            raise PredictionDiverged("upper-body prediction diverged")
    return PredictorState(g_lo=g_lo_np, g_up=g_up_np, heading=heading,
                          hidden={"sig": hid_sig, "lo": hid_lo, "up": hid_up},
                          o_next=o_next_np)


def rollout(nets: PredictorNets, frames: list[TrackerFrame],
            state: PredictorState) -> list[PredictorState]:
    """Run predict_step along a tracker stream; headings accumulate by
    composition of the per-step deltas."""
    if not frames:
        raise ValueError("rollout needs at least one frame")
    out = []
    for frame in frames:
        state = predict_step(nets, frame, state)
        out.append(state)
    return out


def direct_mode_pose(nets: PredictorNets, skel: Skeleton,
                     frames: list[TrackerFrame], state: PredictorState,
                     contact_lock: bool = True) -> list[Pose]:
    """Drive the character kinematically from predictions.

    Feet with predicted contact label >= 0.5 are pinned (via two-bone IK) to
    the world position latched when the contact started.
    """
    poses = []
    locks: dict[str, np.ndarray] = {}
    for st in rollout(nets, frames, state):
        pose = ft.decode_pose(skel, st.g_lo.astype(float), st.g_up.astype(float),
                              st.heading)
        labels = st.g_lo[LO_CONTACTS]
        if contact_lock:
            pos, _ = fk_pose(skel, pose)
            contacts = {}
            for i, side in enumerate(("left", "right")):
                if labels[i] >= 0.5:
                    ankle = skel.index(f"{side[0]}_ankle")
                    if side not in locks:
                        locked = pos[ankle].copy()
                        locked[1] = min(locked[1], 0.06)   # never lock in the air
                        locks[side] = locked
                    contacts[side] = 1.0
                else:
                    locks.pop(side, None)
                    contacts[side] = 0.0
            if any(v >= 0.5 for v in contacts.values()):
                pose = contact_ik(skel, pose, contacts, locks).pose
        pose.joint_pos = None
        poses.append(pose)
    return poses


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Mean over all entries of the squared difference, times the last-dim
    size (so each vector-valued sample contributes its squared norm)."""
    d = pred - Tensor(truth.astype(pred.data.dtype))
    return (d * d).mean() * float(pred.shape[-1])


def heading_loss(delta_seq: list[Tensor], h0: np.ndarray, truth_heading: np.ndarray,
                 ) -> Tensor:
    """Accumulated-heading error: planar MSE plus (sin, cos) yaw MSE.

    delta_seq holds per-step (dx, dz, dtheta) predictions (B, 3); truth is
    (B, T, 3). The sin/cos form keeps the loss smooth across angle wraps.
    """
    dtype = delta_seq[0].data.dtype
    bsz = delta_seq[0].shape[0]
    px = Tensor(h0[:, 0].astype(dtype))
    pz = Tensor(h0[:, 1].astype(dtype))
    theta = Tensor(h0[:, 2].astype(dtype))
    terms = []
    inv_scale = 1.0 / ft.Z_DH_SCALE
    for t, d in enumerate(delta_seq):
        c, s = theta.cos(), theta.sin()
        dx, dz, dth = (narrow(d, i, 1).reshape(bsz) * inv_scale for i in range(3))
        px = px + c * dx + s * dz
        pz = pz - s * dx + c * dz
        theta = theta + dth
        tx = truth_heading[:, t, 0].astype(dtype)
        tz = truth_heading[:, t, 1].astype(dtype)
        tth = truth_heading[:, t, 2].astype(dtype)
        dpx = px - Tensor(tx)
        dpz = pz - Tensor(tz)
        dsin = theta.sin() - Tensor(np.sin(tth))
        dcos = theta.cos() - Tensor(np.cos(tth))
        terms.append((dpx * dpx + dpz * dpz + dsin * dsin + dcos * dcos).mean())
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _rotate_const_by_rotvec(r: Tensor, v: np.ndarray) -> Tensor:
    """Rodrigues rotation of a constant vector by a batched rotvec tensor."""
    dtype = r.data.dtype
    eps = 1e-8
    sq = (r * r).sum(axis=-1, keepdims=True)
    theta = (sq + eps).sqrt()
    k = r / theta
    cos_t, sin_t = theta.cos(), theta.sin()
    vt = Tensor(np.asarray(v, dtype=dtype))
    kx, ky, kz = (narrow(k, i, 1) for i in range(3))
    vx, vy, vz = (float(v[0]), float(v[1]), float(v[2]))
    cross = concat([ky * vz - kz * vy, kz * vx - kx * vz, kx * vy - ky * vx])
    kdotv = kx * vx + ky * vy + kz * vz
    return vt * cos_t + cross * sin_t + k * (kdotv * (1.0 - cos_t))


def fk_loss(skel: Skeleton, group: list[int], q_pred: Tensor, p_pred: Tensor,
            root_height: Tensor, root_tilt: Tensor) -> Tensor:
    """FK-consistency: positions implied by the predicted orientations vs the
    predicted position slots, averaged over the group's joints.

    q_pred/p_pred are (N, J_g*3) heading-local; the root transform comes in as
    (N, 1) height and (N, 3) tilt rotvec.
    """
    n = q_pred.shape[0]
    col = {j: i for i, j in enumerate(group)}
    zeros = Tensor(np.zeros((n, 1), dtype=q_pred.data.dtype))
    root_pos = concat([zeros, root_height, zeros])
    parents = skel.parents
    positions: dict[int, Tensor] = {}
    total = None
    for i, j in enumerate(group):
        par = parents[j]
        if par in col:
            base = positions[par]
            rot = narrow(q_pred, 3 * col[par], 3)
        else:
            base = root_pos
            rot = root_tilt
        pos = base + _rotate_const_by_rotvec(rot, skel.offsets[j])
        positions[j] = pos
        d = pos - narrow(p_pred, 3 * i, 3)
        term = (d * d).sum(axis=-1).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(group))


def _slice_joint_cols(dim_per_joint=9):
    # g vectors store [p(3), v(3), q(3)] per joint
    return None


def split_g(g: Tensor, n_joints: int) -> tuple[Tensor, Tensor, Tensor]:
    """(N, J*9...) -> positions (N, J*3), velocities, orientations."""
    ps, vs, qs = [], [], []
    for j in range(n_joints):
        base = 9 * j
        ps.append(narrow(g, base, 3))
        vs.append(narrow(g, base + 3, 3))
        qs.append(narrow(g, base + 6, 3))
    return concat(ps), concat(vs), concat(qs)


def loss_sig(z_pred: list[Tensor], z_truth: np.ndarray, h0: np.ndarray,
             heading_truth: np.ndarray, cfg: PredictorConfig) -> Tensor:
    """Aggregated-state MSE plus the accumulated-heading loss."""
    if len(z_pred) != z_truth.shape[1]:
        raise ValueError("prediction/truth length mismatch")
    stacked = concat([z.reshape(z.shape[0], 1, Z_DIM) for z in z_pred], axis=1)
    total = mse(stacked, z_truth)
    deltas = [narrow(z, ft.Z_DELTA_H.start, 3) for z in z_pred]
    return total + cfg.w_heading * heading_loss(deltas, h0, heading_truth)


def loss_lo(skel: Skeleton, g_pred: list[Tensor], z_next_pred: list[Tensor],
            g_truth: np.ndarray, z_next_truth: np.ndarray, h0: np.ndarray,
            heading_truth: np.ndarray, cfg: PredictorConfig) -> Tensor:
    """Lower-body loss: state MSE + next-aggregate MSE + heading + FK terms."""
    if len(g_pred) != g_truth.shape[1]:
        raise ValueError("prediction/truth length mismatch")
    bsz, T = g_truth.shape[0], g_truth.shape[1]
    g_stack = concat([g.reshape(bsz, 1, G_LO_DIM) for g in g_pred], axis=1)
    z_stack = concat([z.reshape(bsz, 1, Z_DIM) for z in z_next_pred], axis=1)
    total = mse(g_stack, g_truth) + mse(z_stack, z_next_truth)

    deltas = [narrow(narrow(g, LO_Z.start, Z_DIM), ft.Z_DELTA_H.start, 3) for g in g_pred]
    total = total + cfg.w_heading * heading_loss(deltas, h0, heading_truth)

    flat = g_stack.reshape(bsz * T, G_LO_DIM)
    joints = narrow(flat, 0, 72)
    p_pred, _, q_pred = split_g(joints, 8)
    height = narrow(flat, ft.LO_ROOT.start, 1)
    tilt = narrow(flat, ft.LO_ROOT.start + 1, 3)
    total = total + cfg.w_fk * fk_loss(skel, skel.lower, q_pred, p_pred, height, tilt)
    return total


def loss_up(skel: Skeleton, g_pred: list[Tensor], o_next_pred: list[Tensor],
            g_truth: np.ndarray, o_next_truth: np.ndarray,
            root_height: np.ndarray, root_tilt: np.ndarray,
            cfg: PredictorConfig) -> Tensor:
    """Upper-body loss: state MSE + next-tracker MSE + FK term.

    The root transform (from the lower body or ground truth) anchors the FK.
    """
    if len(g_pred) != g_truth.shape[1]:
        raise ValueError("prediction/truth length mismatch")
    bsz, T = g_truth.shape[0], g_truth.shape[1]
    g_stack = concat([g.reshape(bsz, 1, G_UP_DIM) for g in g_pred], axis=1)
    o_stack = concat([o.reshape(bsz, 1, O_DIM) for o in o_next_pred], axis=1)
    total = mse(g_stack, g_truth) + mse(o_stack, o_next_truth)

    flat = g_stack.reshape(bsz * T, G_UP_DIM)
    p_pred, _, q_pred = split_g(flat, 10)
    height = Tensor(root_height.reshape(-1, 1).astype(flat.data.dtype))
    tilt = Tensor(root_tilt.reshape(-1, 3).astype(flat.data.dtype))
    total = total + cfg.w_fk * fk_loss(skel, skel.upper, q_pred, p_pred, height, tilt)
    return total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stack_windows(windows: list[Window]) -> dict[str, np.ndarray]:
    def f(name):
        return np.stack([getattr(w, name) for w in windows]).astype(np.float32)
    return {name: f(name) for name in
            ("o_in_prev", "o_in_cur", "o_next", "z", "z_next", "g_lo", "g_up",
             "heading", "h0", "g_lo_prev", "g_up_prev")}


@dataclass
class TrainResult:
    curve: list[dict]
    final_loss: float


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def pretrain_subnet(nets: PredictorNets, which: str, skel: Skeleton,
                    windows: list[Window], epochs: int, seed: int,
                    cfg: PredictorConfig | None = None) -> TrainResult:
    """Teacher-forced pretraining of one sub-net on ground-truth windows."""
    if which not in ("sig", "lo", "up"):
        raise ValueError(f"unknown sub-net {which!r}")
    cfg = cfg or PredictorConfig()
    data = _stack_windows(windows)
    rng = nn.make_rng(seed)
    sub = getattr(nets, which)
    params = sub.parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    curve = []
    final = float("nan")
    for epoch in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _epoch_batches(len(windows), cfg.batch_size, rng):
            loss = _subnet_batch_loss(nets, which, skel, data, idx, cfg, rng, training=True)
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            val = loss.item()
            if not np.isfinite(val):
                raise PredictionDiverged(f"{which} pretraining diverged at epoch {epoch}")
            epoch_loss += val
            n_batches += 1
        final = epoch_loss / max(n_batches, 1)
        curve.append({"epoch": epoch, f"loss_{which}": final})
    return TrainResult(curve=curve, final_loss=final)


def _subnet_batch_loss(nets, which, skel, data, idx, cfg, rng, training):
    T = data["z"].shape[1]
    bsz = len(idx)
    if which == "sig":
        state = nets.sig.initial_state(bsz)
        preds = []
        for t in range(T):
            z, state = nets.sig_step(Tensor(data["o_in_prev"][idx, t]), state,
                                     training, rng)
            preds.append(z)
        return loss_sig(preds, data["z"][idx], data["h0"][idx],
                        data["heading"][idx], cfg)
    if which == "lo":
        state = nets.lo.initial_state(bsz)
        g_preds, z_preds = [], []
        for t in range(T):
            g_prev = data["g_lo_prev"][idx] if t == 0 else data["g_lo"][idx, t - 1]
            g, z_next, state = nets.lo_step(Tensor(data["z"][idx, t]),
                                            Tensor(g_prev), state, training, rng)
            g_preds.append(g)
            z_preds.append(z_next)
        return loss_lo(skel, g_preds, z_preds, data["g_lo"][idx],
                       data["z_next"][idx], data["h0"][idx],
                       data["heading"][idx], cfg)
    state = nets.up.initial_state(bsz)
    g_preds, o_preds = [], []
    for t in range(T):
        g_prev = data["g_up_prev"][idx] if t == 0 else data["g_up"][idx, t - 1]
        g, o_next, state = nets.up_step(Tensor(data["o_in_cur"][idx, t]),
                                        Tensor(g_prev), state, training, rng)
        g_preds.append(g)
        o_preds.append(o_next)
    root_h = data["g_lo"][idx][:, :, ft.LO_ROOT.start]
    root_tilt = data["g_lo"][idx][:, :, ft.LO_ROOT.start + 1: ft.LO_ROOT.stop]
    return loss_up(skel, g_preds, o_preds, data["g_up"][idx], data["o_next"][idx],
                   root_h, root_tilt, cfg)


# -- differentiable heading-local tracker encoding for fine-tuning --------------

def _encode_trackers_tensor(h_px: Tensor, h_pz: Tensor, h_theta: Tensor,
                            o_world: np.ndarray) -> Tensor:
    """Tensor version of encode_trackers_local for a (B, 3, 7) world input."""
    dtype = h_px.data.dtype
    bsz = h_px.shape[0]
    c = h_theta.cos().reshape(bsz, 1)
    s = h_theta.sin().reshape(bsz, 1)
    px = h_px.reshape(bsz, 1)
    pz = h_pz.reshape(bsz, 1)
    half = (h_theta * 0.5)
    yw = half.cos().reshape(bsz, 1)
    yy = (half.sin() * -1.0).reshape(bsz, 1)   # quat of yaw(-theta)
    parts = []
    for k in range(3):
        wpos = o_world[:, k, 0:3].astype(dtype)
        wq = o_world[:, k, 3:7].astype(dtype)
        dx = Tensor(wpos[:, 0:1]) - px
        dz = Tensor(wpos[:, 2:3]) - pz
        lx = c * dx - s * dz
        lz = s * dx + c * dz
        ly = Tensor(wpos[:, 1:2])
        # quaternion multiply (yw, 0, yy, 0) * (qw, qx, qy, qz)
        qw, qx, qy, qz = (Tensor(wq[:, i:i + 1]) for i in range(4))
        rw = yw * qw - yy * qy
        rx = yw * qx + yy * qz
        ry = yw * qy + yy * qw
        rz = yw * qz - yy * qx
        parts.extend([lx, ly, lz, rw, rx, ry, rz])
    return concat(parts)


def finetune_joint(nets: PredictorNets, skel: Skeleton, windows: list[Window],
                   epochs: int, seed: int,
                   cfg: PredictorConfig | None = None) -> TrainResult:
    """Autoregressive fine-tuning of sig+lo with the upper net frozen.

    Scheduled sampling: feedback inputs (previous state, heading) switch from
    ground truth to the net's own predictions with a probability that ramps to
    1 over the first `cfg.sampling_ramp` fraction of epochs. The combined
    loss is loss_sig + loss_lo + loss_up; the upper net's parameters receive
    no updates (checksum-identical before/after).
    """
    cfg = cfg or PredictorConfig()
    data = _stack_windows(windows)
    # world-frame tracker poses are needed to re-localize under predicted
    # headings; recover them from o_in_prev + true previous heading
    o_world = _recover_world_trackers(data)
    rng = nn.make_rng(seed)
    params = {**nets.sig.parameters(), **nets.lo.parameters()}
    opt = Adam(params, lr=cfg.learning_rate)
    T = data["z"].shape[1]
    curve = []
    final = float("nan")
    ramp_epochs = max(1, int(np.ceil(cfg.sampling_ramp * epochs)))
    for epoch in range(epochs):
        p_auto = min(1.0, (epoch + 1) / ramp_epochs)
        epoch_loss = 0.0
        n_batches = 0
        for idx in _epoch_batches(len(windows), cfg.batch_size, rng):
            bsz = len(idx)
            sig_state = nets.sig.initial_state(bsz)
            lo_state = nets.lo.initial_state(bsz)
            up_state = nets.up.initial_state(bsz)
            h_px = Tensor(data["h0"][idx, 0])
            h_pz = Tensor(data["h0"][idx, 1])
            h_th = Tensor(data["h0"][idx, 2])
            g_lo_prev = Tensor(data["g_lo_prev"][idx])
            g_up_prev = Tensor(data["g_up_prev"][idx])
            z_preds, g_lo_preds, z_next_preds = [], [], []
            g_up_preds, o_next_preds = [], []
            for t in range(T):
                z_t, sig_state = nets.sig_step(
                    _encode_trackers_tensor(h_px, h_pz, h_th, o_world[idx, t]),
                    sig_state, True, rng)
                g_lo, z_next, lo_state = nets.lo_step(z_t, g_lo_prev, lo_state, True, rng)
                # heading update from the predicted delta
                dh = narrow(g_lo, LO_Z.start + ft.Z_DELTA_H.start, 3)
                c, s = h_th.cos(), h_th.sin()
                dx, dz, dth = (narrow(dh, i, 1).reshape(bsz) * (1.0 / ft.Z_DH_SCALE)
                               for i in range(3))
                h_px = h_px + c * dx + s * dz
                h_pz = h_pz - s * dx + c * dz
                h_th = h_th + dth
                g_up, o_next, up_state = nets.up_step(
                    _encode_trackers_tensor(h_px, h_pz, h_th, o_world[idx, t]),
                    g_up_prev, up_state, True, rng)
                z_preds.append(z_t)
                g_lo_preds.append(g_lo)
                z_next_preds.append(z_next)
                g_up_preds.append(g_up)
                o_next_preds.append(o_next)
                # scheduled sampling of the feedback path
                if rng.random() < p_auto:
                    g_lo_prev, g_up_prev = g_lo, g_up
                else:
                    g_lo_prev = Tensor(data["g_lo"][idx, t])
                    g_up_prev = Tensor(data["g_up"][idx, t])
                    h_px = Tensor(data["heading"][idx, t, 0])
                    h_pz = Tensor(data["heading"][idx, t, 1])
                    h_th = Tensor(_unwrap_to(data["heading"][idx, t, 2], h_th.data))

            total = loss_sig(z_preds, data["z"][idx], data["h0"][idx],
                             data["heading"][idx], cfg)
            total = total + loss_lo(skel, g_lo_preds, z_next_preds, data["g_lo"][idx],
                                    data["z_next"][idx], data["h0"][idx],
                                    data["heading"][idx], cfg)
            root_h = data["g_lo"][idx][:, :, ft.LO_ROOT.start]
            root_tilt = data["g_lo"][idx][:, :, ft.LO_ROOT.start + 1: ft.LO_ROOT.stop]
            total = total + loss_up(skel, g_up_preds, o_next_preds, data["g_up"][idx],
                                    data["o_next"][idx], root_h, root_tilt, cfg)
            opt.zero_grad()
            for p in nets.up.parameters().values():
                p.zero_grad()
            total.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            val = total.item()
            if not np.isfinite(val):
                raise PredictionDiverged(f"fine-tuning diverged at epoch {epoch}")
            epoch_loss += val
            n_batches += 1
        final = epoch_loss / max(n_batches, 1)
        curve.append({"epoch": epoch, "loss_total": final, "p_auto": p_auto})
    return TrainResult(curve=curve, final_loss=final)


def _unwrap_to(target_theta: np.ndarray, near: np.ndarray) -> np.ndarray:
    """Shift ground-truth yaw by 2*pi multiples to stay near the running value."""
    delta = target_theta - near
    return (target_theta - np.round(delta / (2 * np.pi)) * 2 * np.pi).astype(near.dtype)


def _recover_world_trackers(data: dict[str, np.ndarray]) -> np.ndarray:
    """(N, T, 3, 7) world tracker poses from the prev-heading-local encoding."""
    n, T = data["o_in_prev"].shape[:2]
    out = np.zeros((n, T, 3, 7))
    for i in range(n):
        for t in range(T):
            h_prev = data["h0"][i] if t == 0 else data["heading"][i, t - 1]
            pos, quat = ft.decode_trackers_local(h_prev.astype(float),
                                                 data["o_in_prev"][i, t].astype(float))
            out[i, t, :, 0:3] = pos
            out[i, t, :, 3:7] = quat
    return out


def write_loss_curves(path, entries: list[dict]):
    """CSV with columns epoch, loss_sig, loss_lo, loss_up, loss_total.

    Entries are curve dicts from TrainResult; absent streams stay empty.
    """
    import csv
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "loss_sig", "loss_lo",
                                          "loss_up", "loss_total"],
                           restval="", extrasaction="ignore")
        w.writeheader()
        for entry in entries:
            w.writerow(entry)
