"""Motion clip file format, dataset windowing, synthetic gait generation,
tracker extraction, T-pose calibration and rotation-copy retargeting.

Motion files are UTF-8 JSON with a top-level ``skeleton`` object, ``fps``,
and a ``frames`` list; numbers keep full float precision so a save/load
round trip is lossless. An optional ``contacts`` array carries per-frame
foot contact labels when the source knows them (e.g. the gait generator).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from .kinematics import (
    ContactSphere,
    Joint,
    Pose,
    Skeleton,
    default_skeleton,
    fk_pose,
    quat_canonical,
    quat_conj,
    quat_from_yaw,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_slerp,
    quat_to_rotvec,
    rest_pose,
    rotvec_to_quat,
    two_bone_ik,
    wrap_angle,
)

INPUT_FPS = 30.0


class MotionParseError(ValueError):
    """Malformed motion file."""


class SchemaError(ValueError):
    """Structurally valid file that does not match the expected skeleton/fields."""


class CalibrationError(RuntimeError):
    """Device stream too unstable to calibrate from."""


@dataclass
class TrackerFrame:
    """World pose of the three trackers, in H (head), L, R order."""
    pos: np.ndarray           # (3, 3)
    quat: np.ndarray          # (3, 4)
    time: float = 0.0
    index: int = 0

    def copy(self) -> "TrackerFrame":
        return TrackerFrame(self.pos.copy(), self.quat.copy(), self.time, self.index)


@dataclass
class MotionClip:
    skeleton: Skeleton
    fps: float
    root_pos: np.ndarray      # (N, 3)
    root_quat: np.ndarray     # (N, 4)
    joint_rot: np.ndarray     # (N, J-1, 3)
    contacts: np.ndarray | None = None   # (N, 2) optional ground-truth labels

    def __len__(self):
        return self.root_pos.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.fps

    def pose(self, i: int) -> Pose:
        return Pose(self.root_pos[i].copy(), self.root_quat[i].copy(),
                    self.joint_rot[i].copy())

    def slice(self, start: int, stop: int) -> "MotionClip":
        return MotionClip(self.skeleton, self.fps,
                          self.root_pos[start:stop].copy(),
                          self.root_quat[start:stop].copy(),
                          self.joint_rot[start:stop].copy(),
                          None if self.contacts is None else self.contacts[start:stop].copy())


@dataclass
class CalibrationOffsets:
    """Rigid offsets from each device frame to its body joint (H->neck, L/R->wrists)."""
    pos: np.ndarray           # (3, 3)
    quat: np.ndarray          # (3, 4)

    @staticmethod
    def identity() -> "CalibrationOffsets":
        q = np.tile(np.array([1.0, 0, 0, 0]), (3, 1))
        return CalibrationOffsets(pos=np.zeros((3, 3)), quat=q)


# ---------------------------------------------------------------------------
# motion file format
# ---------------------------------------------------------------------------

def _skeleton_to_dict(skel: Skeleton) -> dict:
    return {
        "total_height": skel.total_height,
        "joints": [
            {"name": j.name, "parent": j.parent, "offset": j.offset.tolist(),
             "mass": j.mass, "com": j.com.tolist(),
             "inertia": j.inertia.reshape(-1).tolist(), "group": j.group}
            for j in skel.joints
        ],
        "spheres": [
            {"joint": s.joint, "offset": s.offset.tolist(), "radius": s.radius,
             "foot": s.foot}
            for s in skel.spheres
        ],
    }


def _skeleton_from_dict(d: dict) -> Skeleton:
    try:
        joints = tuple(
            Joint(j["name"], j["parent"], np.array(j["offset"], dtype=float),
                  j["mass"], np.array(j["com"], dtype=float),
                  np.array(j["inertia"], dtype=float).reshape(3, 3), j["group"])
            for j in d["joints"]
        )
        spheres = tuple(
            ContactSphere(s["joint"], np.array(s["offset"], dtype=float),
                          s["radius"], s["foot"])
            for s in d["spheres"]
        )
        return Skeleton(joints=joints, spheres=spheres, total_height=d["total_height"])
    except (KeyError, TypeError) as e:
        raise SchemaError(f"bad skeleton record: {e}") from e


def save_motion(clip: MotionClip, path):
    doc = {
        "skeleton": _skeleton_to_dict(clip.skeleton),
        "fps": clip.fps,
        "frames": [
            {"root_pos": clip.root_pos[i].tolist(),
             "root_quat": clip.root_quat[i].tolist(),
             "joint_rot": clip.joint_rot[i].tolist()}
            for i in range(len(clip))
        ],
    }
    if clip.contacts is not None:
        doc["contacts"] = clip.contacts.tolist()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_motion(path) -> MotionClip:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise MotionParseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    for section in ("skeleton", "fps", "frames"):
        if section not in doc:
            raise MotionParseError(f"{path}: missing section '{section}'")
    skel = _skeleton_from_dict(doc["skeleton"])
    frames = doc["frames"]
    n = len(frames)
    nj = skel.n_joints
    root_pos = np.zeros((n, 3))
    root_quat = np.zeros((n, 4))
    joint_rot = np.zeros((n, nj - 1, 3))
    for i, fr in enumerate(frames):
        try:
            root_pos[i] = fr["root_pos"]
            root_quat[i] = fr["root_quat"]
            rot = np.array(fr["joint_rot"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise MotionParseError(f"{path}: bad frame {i}: {e}") from e
        if rot.shape != (nj - 1, 3):
            raise SchemaError(
                f"{path}: frame {i} has joint_rot shape {rot.shape}, "
                f"expected {(nj - 1, 3)}")
        joint_rot[i] = rot
    contacts = None
    if "contacts" in doc:
        contacts = np.array(doc["contacts"], dtype=float)
        if contacts.shape != (n, 2):
            raise SchemaError(f"{path}: contacts shape {contacts.shape} != {(n, 2)}")
    if n:
        norms = np.linalg.norm(root_quat, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SchemaError(f"{path}: non-unit root quaternions")
    return MotionClip(skel, float(doc["fps"]), root_pos, root_quat, joint_rot, contacts)


def save_manifest(path, entries: list[dict]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"clips": entries}, f, indent=2)


def load_manifest(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "clips" not in doc:
        raise MotionParseError(f"{path}: missing 'clips'")
    return doc["clips"]


# ---------------------------------------------------------------------------
# tracker extraction and calibration
# ---------------------------------------------------------------------------

def extract_trackers(clip: MotionClip,
                     offsets: CalibrationOffsets | None = None) -> list[TrackerFrame]:
    """Per-frame tracker poses at the neck and wrists.

    With calibration offsets given, the returned poses emulate the devices
    (joint pose composed with the inverse offset); otherwise they are the
    joint poses themselves.
    """
    skel = clip.skeleton
    try:
        tidx = ft.tracker_joint_indices(skel)
    except ValueError as e:
        raise SchemaError(f"skeleton lacks tracker joints: {e}") from e
    pos, quat = ft.batch_fk(skel, clip.root_pos, clip.root_quat, clip.joint_rot)
    frames = []
    for i in range(len(clip)):
        p = pos[i, tidx].copy()
        q = quat[i, tidx].copy()
        if offsets is not None:
            for k in range(3):
                dev_q = quat_canonical(quat_mul(q[k], quat_conj(offsets.quat[k])))
                p[k] = p[k] - quat_rotate(dev_q, offsets.pos[k])
                q[k] = dev_q
        frames.append(TrackerFrame(pos=p, quat=q, time=i / clip.fps, index=i))
    return frames


def apply_calibration(frame: TrackerFrame, offsets: CalibrationOffsets) -> TrackerFrame:
    """Map raw device poses to body-joint poses (the predictor's input space)."""
    pos = np.zeros((3, 3))
    quat = np.zeros((3, 4))
    for k in range(3):
        pos[k] = frame.pos[k] + quat_rotate(frame.quat[k], offsets.pos[k])
        quat[k] = quat_canonical(quat_mul(frame.quat[k], offsets.quat[k]))
    return TrackerFrame(pos, quat, frame.time, frame.index)


def calibrate_tpose(device_frames: list[TrackerFrame], skel: Skeleton,
                    max_speed: float = 0.02) -> CalibrationOffsets:
    """Recover device-to-joint offsets from a still T-pose.

    The skeleton's rest pose is aligned to the user via the head device's
    planar position and yaw, so the headset is assumed to sit level and
    directly above the root during the T-pose: any planar/yaw offset of the
    head device is absorbed into the world alignment (which downstream
    consumers never observe). Offsets are averaged over the window.
    """
    if len(device_frames) < 10:
        raise CalibrationError("need at least 10 T-pose frames")
    pos = np.stack([f.pos for f in device_frames])
    times = np.array([f.time for f in device_frames])
    if np.any(np.diff(times) <= 0):
        raise CalibrationError("non-monotone timestamps")
    # drift over the window (half-mean displacement), robust to sensor jitter
    half = len(device_frames) // 2
    drift = np.linalg.norm(pos[half:].mean(axis=0) - pos[:half].mean(axis=0), axis=-1)
    span = times[half:].mean() - times[:half].mean()
    speed = float(drift.max() / max(span, 1e-9))
    if speed > max_speed:
        raise CalibrationError(
            f"devices drifting at {speed:.3f} m/s during calibration window")

    tidx = ft.tracker_joint_indices(skel)
    pos_sum = np.zeros((3, 3))
    quat_acc = np.zeros((3, 4))
    for f in device_frames:
        head_yaw = ft.byaw_of_quat(f.quat[0][None])[0]
        body = rest_pose(skel)
        body.root_pos = np.array([f.pos[0][0], body.root_pos[1], f.pos[0][2]])
        body.root_quat = quat_from_yaw(head_yaw)
        jp, jq = fk_pose(skel, body)
        for k in range(3):
            dev_q = f.quat[k]
            off_q = quat_canonical(quat_mul(quat_conj(dev_q), jq[tidx[k]]))
            off_p = quat_rotate(quat_conj(dev_q), jp[tidx[k]] - f.pos[k])
            pos_sum[k] += off_p
            if np.dot(quat_acc[k], off_q) < 0:
                off_q = -off_q
            quat_acc[k] += off_q
    n = len(device_frames)
    return CalibrationOffsets(pos=pos_sum / n,
                              quat=np.stack([quat_canonical(quat_normalize(q))
                                             for q in quat_acc]))


# ---------------------------------------------------------------------------
# retargeting and resampling
# ---------------------------------------------------------------------------

def _leg_length(skel: Skeleton) -> float:
    hip = skel.index("l_hip")
    knee = skel.index("l_knee")
    ankle = skel.index("l_ankle")
    return (abs(skel.offsets[hip][1]) + np.linalg.norm(skel.offsets[knee])
            + np.linalg.norm(skel.offsets[ankle]))


def retarget_copy(source: MotionClip, target_skel: Skeleton) -> MotionClip:
    """Retarget by copying joint rotations by name; root height scales with leg length."""
    src_names = source.skeleton.names
    dst_names = target_skel.names
    missing = [n for n in dst_names[1:] if n not in src_names]
    if missing:
        raise SchemaError(f"retarget correspondence missing joints: {missing}")
    scale = _leg_length(target_skel) / _leg_length(source.skeleton)
    n = len(source)
    joint_rot = np.zeros((n, target_skel.n_joints - 1, 3))
    for k, name in enumerate(dst_names[1:]):
        src_k = src_names.index(name)
        joint_rot[:, k] = source.joint_rot[:, src_k - 1]
    root_pos = source.root_pos.copy()
    root_pos[:, 1] *= scale
    return MotionClip(target_skel, source.fps, root_pos,
                      source.root_quat.copy(), joint_rot,
                      None if source.contacts is None else source.contacts.copy())


def resample(clip: MotionClip, fps: float = INPUT_FPS) -> MotionClip:
    """Linear positions, spherical joint/root rotations onto a new frame rate."""
    if abs(clip.fps - fps) < 1e-9 or len(clip) < 2:
        return clip
    n_out = max(2, int(round(len(clip) * fps / clip.fps)))
    src_t = np.arange(len(clip)) / clip.fps
    dst_t = np.minimum(np.arange(n_out) / fps, src_t[-1])
    root_pos = np.stack([np.interp(dst_t, src_t, clip.root_pos[:, c]) for c in range(3)], axis=-1)
    idx = np.minimum(np.searchsorted(src_t, dst_t, side="right") - 1, len(clip) - 2)
    frac = (dst_t - src_t[idx]) * clip.fps
    root_quat = np.stack([quat_slerp(clip.root_quat[i], clip.root_quat[i + 1], f)
                          for i, f in zip(idx, frac)])
    local = ft.brotvec_to_quat(clip.joint_rot)
    joint_rot = np.zeros((n_out, clip.joint_rot.shape[1], 3))
    for j in range(clip.joint_rot.shape[1]):
        joint_rot[:, j] = np.stack([
            quat_to_rotvec(quat_slerp(local[i, j], local[i + 1, j], f))
            for i, f in zip(idx, frac)])
    contacts = None
    if clip.contacts is not None:
        contacts = np.stack([np.interp(dst_t, src_t, clip.contacts[:, c]) for c in range(2)], axis=-1)
        contacts = (contacts >= 0.5).astype(float)
    return MotionClip(clip.skeleton, fps, root_pos, root_quat, joint_rot, contacts)


# ---------------------------------------------------------------------------
# training windows
# ---------------------------------------------------------------------------

@dataclass
class Window:
    """One teacher-forcing training window of length T (all ground truth)."""
    o_in_prev: np.ndarray   # (T, 21) trackers in previous-frame heading
    o_in_cur: np.ndarray    # (T, 21) trackers in current-frame heading
    o_next: np.ndarray      # (T, 21) next-frame tracker input (in cur heading of t+1's prev = cur h)
    z: np.ndarray           # (T, 12)
    z_next: np.ndarray      # (T, 12)
    g_lo: np.ndarray        # (T, 90)
    g_up: np.ndarray        # (T, 90)
    heading: np.ndarray     # (T, 3)
    h0: np.ndarray          # (3,) heading before the first frame
    g_lo_prev: np.ndarray   # (90,) state before the first frame
    g_up_prev: np.ndarray   # (90,)


def clip_to_features(clip: MotionClip) -> ft.ClipFeatures:
    return ft.clip_features(clip.skeleton, clip.fps, clip.root_pos,
                            clip.root_quat, clip.joint_rot, clip.contacts)


def make_windows(clips: list[MotionClip], T: int = 60, stride: int = 30) -> list[Window]:
    """Slice clips into training windows with teacher-forcing targets.

    Clips shorter than T are skipped with a warning. Windows never cross clip
    boundaries; next-step targets at a clip's final frame repeat that frame.
    """
    windows: list[Window] = []
    for ci, clip in enumerate(clips):
        n = len(clip)
        if n < T:
            warnings.warn(f"clip {ci} has {n} < {T} frames; skipped")
            continue
        feats = clip_to_features(clip)
        last = n - 1
        nxt = np.minimum(np.arange(n) + 1, last)
        z_next = feats.z[nxt]
        # o*^{t+1} is expressed in h^t, which is exactly o_in_prev of frame t+1
        o_next = feats.o_in_prev[nxt]
        for s in range(0, n - T + 1, stride):
            e = s + T
            h0 = feats.heading[s - 1] if s > 0 else feats.heading[s]
            g_lo_prev = feats.g_lo[s - 1] if s > 0 else feats.g_lo[s]
            g_up_prev = feats.g_up[s - 1] if s > 0 else feats.g_up[s]
            windows.append(Window(
                o_in_prev=feats.o_in_prev[s:e], o_in_cur=feats.o_in_cur[s:e],
                o_next=o_next[s:e], z=feats.z[s:e], z_next=z_next[s:e],
                g_lo=feats.g_lo[s:e], g_up=feats.g_up[s:e],
                heading=feats.heading[s:e], h0=h0,
                g_lo_prev=g_lo_prev, g_up_prev=g_up_prev))
    return windows


# ---------------------------------------------------------------------------
# synthetic gait generator
# ---------------------------------------------------------------------------

def synth_gait(speed: float, turn_rate: float = 0.0, arm_swing: float = 0.4,
               duration: float = 10.0, seed: int = 0,
               skel: Skeleton | None = None) -> MotionClip:
    """Procedural walk (or stand, for near-zero speed) with planted feet.

    The legs are solved with two-bone IK against an explicit footstep plan, so
    stance feet are pinned: contact phases have exactly zero planar foot
    speed. Standing segments keep both feet planted and wave the arms.
    """
    if not (0.0 <= speed <= 1.5):
        raise ValueError("speed must be in [0, 1.5] m/s")
    if duration <= 0.0 or duration > 600.0:
        raise ValueError("duration must be in (0, 600] s")
    skel = skel or default_skeleton()
    rng = np.random.Generator(np.random.Philox(seed))
    fps = INPUT_FPS
    dt = 1.0 / fps
    n = int(round(duration * fps))

    standing = speed < 0.05
    pelvis_h = 0.96 if standing else 0.92
    hip_half = abs(skel.offsets[skel.index("l_hip")][0])
    ankle_rest = 0.06

    # heading trajectory
    yaws = np.cumsum(np.full(n, turn_rate * dt)) - turn_rate * dt
    fwd = np.stack([np.sin(yaws), np.zeros(n), np.cos(yaws)], axis=-1)
    base = np.cumsum(speed * dt * fwd, axis=0) - speed * dt * fwd[0]

    # footstep plan; step timing shortens with speed so targets stay in reach,
    # and all phase arithmetic is in integer frames so labels are exact
    step_time = min(0.55, max(0.3, 0.5 - 0.15 * speed))
    cycle_frames = max(6, int(round(2 * step_time * fps)))
    stance_frames = int(round(0.62 * cycle_frames))
    swing_frames = cycle_frames - stance_frames
    cycle = cycle_frames * dt
    duty_time = stance_frames * dt
    lift = 0.05 + 0.03 * min(speed, 1.0)
    anchors = {}
    anchor_yaw = {}
    contacts = np.zeros((n, 2))
    foot_targets = np.zeros((n, 2, 3))
    foot_yaws = np.zeros((n, 2))

    def left_dir(i):
        return np.array([np.cos(yaws[i]), 0.0, -np.sin(yaws[i])])

    def plant(side, i, ahead):
        i = min(max(i, 0), n - 1)
        sign = 1.0 if side == "left" else -1.0
        return base[i] + ahead * fwd[i] + sign * hip_half * left_dir(i) \
            + np.array([0.0, ankle_rest, 0.0])

    ahead_plant = 0.5 * duty_time * speed
    for col, side in enumerate(("left", "right")):
        off = 0 if side == "left" else cycle_frames // 2
        # start mid-cycle consistently: anchor where this foot would have planted
        elapsed = (off % cycle_frames) * dt if off % cycle_frames < stance_frames else 0.0
        anchors[side] = plant(side, 0, ahead_plant - elapsed * speed)
        anchor_yaw[side] = yaws[0]
        for i in range(n):
            k = (i + off) % cycle_frames
            if standing or k < stance_frames:
                contacts[i, col] = 1.0
                foot_targets[i, col] = anchors[side]
                foot_yaws[i, col] = anchor_yaw[side]
            else:
                sw = (k - stance_frames + 1) / swing_frames   # hits 1.0 exactly
                land_i = i + (swing_frames - (k - stance_frames + 1))
                target = plant(side, land_i, ahead_plant)
                # smootherstep: zero velocity and acceleration at both ends, so
                # lift-off/touchdown frames stay below the contact speed bound
                blend = sw * sw * sw * (sw * (6.0 * sw - 15.0) + 10.0)
                p = anchors[side] * (1.0 - blend) + target * blend
                p[1] = ankle_rest + lift * np.sin(np.pi * sw)
                foot_targets[i, col] = p
                foot_yaws[i, col] = anchor_yaw[side] * (1.0 - blend) + yaws[min(land_i, n - 1)] * blend
                if sw >= 1.0:
                    # the landing frame is already planted: label it contact
                    contacts[i, col] = 1.0
                    anchors[side] = target
                    anchor_yaw[side] = yaws[min(land_i, n - 1)]

    # body trajectory
    root_pos = np.zeros((n, 3))
    root_quat = np.zeros((n, 4))
    joint_rot = np.zeros((n, skel.n_joints - 1, 3))
    sway = 0.01 if standing else 0.012
    arm_freq = 2.0 * np.pi / cycle
    wave_freq = 2.0 * np.pi * 0.4
    jitter = rng.uniform(0.0, 2.0 * np.pi, size=4)

    l_sh = skel.index("l_shoulder") - 1
    r_sh = skel.index("r_shoulder") - 1
    l_el = skel.index("l_elbow") - 1
    r_el = skel.index("r_elbow") - 1
    spine = skel.index("spine") - 1
    l_ankle = skel.index("l_ankle")
    r_ankle = skel.index("r_ankle")

    for i in range(n):
        t = i * dt
        bob = 0.0 if standing else 0.012 * np.sin(2 * arm_freq * t)
        root_pos[i] = base[i] + np.array([0.0, pelvis_h + bob, 0.0])
        root_pos[i] += 0.5 * sway * np.sin(arm_freq * t + jitter[0]) * left_dir(i)
        root_quat[i] = quat_from_yaw(yaws[i])

        if standing:
            # arm waving: lift + wave with a little elbow action
            a = arm_swing * np.sin(wave_freq * t + jitter[1])
            b = arm_swing * 0.7 * np.sin(wave_freq * 1.3 * t + jitter[2])
            joint_rot[i, l_sh] = np.array([0.0, 0.0, -0.5 - 0.5 * a])
            joint_rot[i, r_sh] = np.array([0.0, 0.0, 0.5 + 0.5 * b])
            joint_rot[i, l_el] = np.array([0.0, 0.6 + 0.4 * np.sin(wave_freq * t + jitter[3]), 0.0])
            joint_rot[i, r_el] = np.array([0.0, -0.6 - 0.4 * np.sin(wave_freq * 1.1 * t), 0.0])
        else:
            swing = arm_swing * np.sin(arm_freq * t)
            joint_rot[i, l_sh] = np.array([swing, 0.0, 0.0])
            joint_rot[i, r_sh] = np.array([-swing, 0.0, 0.0])
            joint_rot[i, l_el] = np.array([0.3 * max(0.0, swing), 0.0, 0.0])
            joint_rot[i, r_el] = np.array([0.3 * max(0.0, -swing), 0.0, 0.0])
            joint_rot[i, spine] = np.array([0.0, 0.1 * np.sin(arm_freq * t), 0.0])

        # legs via IK to the planned foot targets
        pose = Pose(root_pos[i], root_quat[i], joint_rot[i])
        for col, (side, ankle) in enumerate((("left", l_ankle), ("right", r_ankle))):
            pose, _ = two_bone_ik(skel, pose, ankle, foot_targets[i, col])
            # keep the foot level, yaw latched to its plant orientation
            _, quats = fk_pose(skel, pose)
            knee_q = quats[skel.parents[ankle]]
            pose.joint_rot[ankle - 1] = quat_to_rotvec(
                quat_mul(quat_conj(knee_q), quat_from_yaw(foot_yaws[i, col])))
        joint_rot[i] = pose.joint_rot

    return MotionClip(skel, fps, root_pos, root_quat, joint_rot, contacts)
