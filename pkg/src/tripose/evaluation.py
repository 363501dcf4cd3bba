"""Tracking-quality metrics: foot skate, per-joint position error, tracker
positional error, and the delay-removed alignment used to discount the
system's intentional control latency.

All length metrics report centimeters; foot skate reports cm/s.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from .kinematics import Skeleton

CONTACT_HEIGHT = ft.CONTACT_HEIGHT
CONTACT_SPEED = ft.CONTACT_SPEED


@dataclass
class MetricReport:
    metric: str
    mean: float
    std: float
    n: int
    mode: str = ""
    delay_removed: bool = False
    contact_source: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("a metric report needs at least one sample")
        if self.std < 0:
            raise ValueError("negative standard deviation")

    def row(self) -> list:
        return [self.metric, self.mode, str(self.delay_removed).lower(),
                self.contact_source, f"{self.mean:.4f}", f"{self.std:.4f}", self.n]


@dataclass
class UndefinedMetric:
    """Reported (never raised) when a metric has no eligible samples."""
    metric: str
    reason: str


def write_reports_csv(path, reports: list[MetricReport]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "mode", "delay_removed", "contact_source",
                    "mean", "std", "n"])
        for r in reports:
            w.writerow(r.row())


def write_reports_json(path, reports: list[MetricReport]):
    doc = [{"metric": r.metric, "mode": r.mode, "delay_removed": r.delay_removed,
            "contact_source": r.contact_source, "mean": round(r.mean, 4),
            "std": round(r.std, 4), "n": r.n} for r in reports]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


# ---------------------------------------------------------------------------
# foot skate
# ---------------------------------------------------------------------------

def foot_skate(skel: Skeleton, joint_pos: np.ndarray, fps: float,
               labels: np.ndarray | None = None,
               contact_source: str = "heightThreshold",
               mode: str = "") -> MetricReport | UndefinedMetric:
    """Mean planar ankle speed (cm/s) while a foot is in contact.

    Speed is the frame-to-frame displacement between consecutive in-contact
    frames, so a cleanly planted foot scores exactly zero and lift-off /
    touchdown transitions are not smeared into the contact phase.

    contact_source "predictedLabels" uses the provided labels (>= 0.5);
    "heightThreshold" re-derives contact from foot clearance and planar speed
    using the shared dataset thresholds.
    """
    n = joint_pos.shape[0]
    ankles = [skel.index("l_ankle"), skel.index("r_ankle")]
    pos = joint_pos[:, ankles]                       # (N, 2, 3)
    disp = np.diff(pos, axis=0)
    planar = np.hypot(disp[..., 0], disp[..., 2]) * fps    # (N-1, 2) pair speeds

    if contact_source == "predictedLabels":
        if labels is None:
            raise ValueError("predictedLabels source needs labels")
        contact = np.asarray(labels) >= 0.5
    elif contact_source == "heightThreshold":
        clear = np.full((n, 2), np.inf)
        for sph in skel.spheres:
            if sph.foot is None:
                continue
            col = 0 if sph.foot == "left" else 1
            centers = joint_pos[:, sph.joint] + sph.offset[None]
            clear[:, col] = np.minimum(clear[:, col], centers[:, 1] - sph.radius)
        speed_at = np.vstack([planar[:1], planar]) if n > 1 else np.zeros((n, 2))
        contact = (clear < CONTACT_HEIGHT) & (speed_at < CONTACT_SPEED)
    else:
        raise ValueError(f"unknown contact source {contact_source!r}")

    if n < 2:
        return UndefinedMetric("foot_skate", "not enough frames")
    pair_contact = contact[1:] & contact[:-1]
    if not np.any(pair_contact):
        return UndefinedMetric("foot_skate", "no contact frames")
    samples = planar[pair_contact] * 100.0
    per_foot = {side: float(planar[:, i][pair_contact[:, i]].mean() * 100.0)
                if np.any(pair_contact[:, i]) else None
                for i, side in enumerate(("left", "right"))}
    return MetricReport("foot_skate", mean=float(samples.mean()),
                        std=float(samples.std()), n=int(samples.size),
                        mode=mode, contact_source=contact_source,
                        extra={"per_foot": per_foot})


# ---------------------------------------------------------------------------
# MPJPE
# ---------------------------------------------------------------------------

def mpjpe(skel: Skeleton, pred_pos: np.ndarray, ref_pos: np.ndarray,
          group: str = "full", mode: str = "",
          delay_removed: bool = False) -> MetricReport:
    """Mean per-joint position error (cm) over global joint positions.

    Groups: "upper" / "lower" per the skeleton's body halves; "full" covers
    every non-root joint (so full is the size-weighted mean of the halves).
    """
    if pred_pos.shape != ref_pos.shape:
        raise ValueError(f"frame/joint mismatch: {pred_pos.shape} vs {ref_pos.shape}")
    if group == "full":
        idx = skel.upper + skel.lower
    elif group == "upper":
        idx = skel.upper
    elif group == "lower":
        idx = skel.lower
    else:
        raise ValueError(f"unknown joint group {group!r}")
    err = np.linalg.norm(pred_pos[:, idx] - ref_pos[:, idx], axis=-1) * 100.0
    return MetricReport(f"mpjpe_{group}", mean=float(err.mean()),
                        std=float(err.std()), n=int(err.size), mode=mode,
                        delay_removed=delay_removed)


def delay_shift(motion: np.ndarray, seconds: float = 0.1, fps: float = 30.0
                ) -> np.ndarray:
    """Shift a generated motion forward in time by dropping its first frames.

    seconds*fps must be integral; pairing shift(pred) with an untouched
    reference (truncated to the common length) removes a known output delay.
    """
    frames = seconds * fps
    k = int(round(frames))
    if abs(frames - k) > 1e-9:
        raise ValueError(f"shift of {seconds}s at {fps}fps is not a whole frame count")
    if k == 0:
        return motion
    return motion[k:]


def align_delay(pred: np.ndarray, ref: np.ndarray, seconds: float = 0.1,
                fps: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    """delay_shift the prediction and truncate both to the common length."""
    shifted = delay_shift(pred, seconds, fps)
    n = min(len(shifted), len(ref))
    return shifted[:n], ref[:n]


# ---------------------------------------------------------------------------
# tracker positional error
# ---------------------------------------------------------------------------

def tracker_positional_error(hand_pos: np.ndarray, targets: np.ndarray,
                             delay_removed: bool = False, fps: float = 30.0,
                             mode: str = "") -> MetricReport:
    """Mean +- std distance (cm) between simulated hands and tracker targets.

    hand_pos/targets are (N, 2, 3); with delay_removed the generated stream is
    shifted forward 0.1 s first.
    """
    if hand_pos.shape[1:] != targets.shape[1:]:
        raise ValueError("hand/target layout mismatch")
    if delay_removed:
        hand_pos, targets = align_delay(hand_pos, targets, 0.1, fps)
    else:
        n = min(len(hand_pos), len(targets))
        hand_pos, targets = hand_pos[:n], targets[:n]
    err = np.linalg.norm(hand_pos - targets, axis=-1) * 100.0
    return MetricReport("tracker_positional_error", mean=float(err.mean()),
                        std=float(err.std()), n=int(err.size), mode=mode,
                        delay_removed=delay_removed)
