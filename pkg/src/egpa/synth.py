"""Parametric synthetic exercise clips for running the pipeline without external data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import rotation_matrix
from .errors import ValidationError
from .ingestion import LabeledSample, Provenance
from .skeleton import KINECT_V2_JOINTS, AssessmentLabels, MotionSequence, SkeletonTopology, kinect_v2_topology

# Rest pose for the Kinect v2 body model; y up, x to the subject's left, z forward.
_KINECT_REST = {
    0: (0.0, 1.00, 0.0), 1: (0.0, 1.25, 0.0), 20: (0.0, 1.45, 0.0), 2: (0.0, 1.52, 0.0), 3: (0.0, 1.66, 0.0),
    4: (0.18, 1.42, 0.0), 5: (0.20, 1.14, 0.0), 6: (0.21, 0.90, 0.0), 7: (0.21, 0.82, 0.0),
    21: (0.21, 0.74, 0.0), 22: (0.24, 0.85, 0.03),
    12: (0.09, 0.95, 0.0), 13: (0.10, 0.52, 0.0), 14: (0.10, 0.10, 0.0), 15: (0.10, 0.04, 0.11),
}
for _l, _r in ((4, 8), (5, 9), (6, 10), (7, 11), (21, 23), (22, 24), (12, 16), (13, 17), (14, 18), (15, 19)):
    _x, _y, _z = _KINECT_REST[_l]
    _KINECT_REST[_r] = (-_x, _y, _z)

EXERCISES = ("shoulder_abduction", "shoulder_flexion", "trunk_flexion", "deep_squat")
_X, _Z = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])


@dataclass
class SynthConfig:
    n_subjects: int = 8
    n_clips: int = 40
    n_frames: int = 100
    n_exercises: int = 4
    frame_rate: float = 30.0
    cycles: float = 2.0
    noise: float = 0.003
    body_scale: float = 0.1
    pose_jitter: float = 0.008
    amplitude_spread: float = 0.05
    speed_spread: float = 0.1
    error_fraction: float = 0.25
    score_range: tuple = (0.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_clips < 1 or self.n_frames < 2:
            raise ValidationError("subject, clip and frame counts must be positive (frames >= 2)")
        if not 1 <= self.n_exercises <= len(EXERCISES):
            raise ValidationError(f"n_exercises must be in [1, {len(EXERCISES)}]")
        if not 0 <= self.error_fraction <= 1:
            raise ValidationError("error_fraction must be in [0, 1]")


def _rotate_subtree(pos, joints, pivot, axis, angles):
    """Rotate ``joints`` about ``pos[:, pivot]`` by per-frame ``angles``."""
    out = np.array(pos)
    piv = out[:, pivot]
    for t, a in enumerate(angles):
        if a == 0:
            continue
        R = rotation_matrix(axis, a)
        out[t, joints] = piv[t] + (out[t, joints] - piv[t]) @ R.T
    return out


def _kinect_clip(topo, exercise, phase, rest, lean):
    """Positions for one of the four Kinect exercises; ``phase`` is the excursion in [0, 1] per frame."""
    T = len(phase)
    pos = np.broadcast_to(rest, (T,) + rest.shape).copy()
    left_arm, right_arm = topo.subtree(5, 4), topo.subtree(9, 8)
    deg = math.pi / 180
    if exercise == "shoulder_abduction":
        pos = _rotate_subtree(pos, left_arm, 4, _Z, 80 * deg * phase)
        pos = _rotate_subtree(pos, right_arm, 8, _Z, -80 * deg * phase)
    elif exercise == "shoulder_flexion":
        pos = _rotate_subtree(pos, left_arm, 4, _X, -90 * deg * phase)
        pos = _rotate_subtree(pos, right_arm, 8, _X, -90 * deg * phase)
    elif exercise == "trunk_flexion":
        pos = _rotate_subtree(pos, left_arm, 4, _X, -30 * deg * phase)
        pos = _rotate_subtree(pos, right_arm, 8, _X, -30 * deg * phase)
        pos = _rotate_subtree(pos, topo.subtree(1, 0), 0, _X, 45 * deg * phase)
    elif exercise == "deep_squat":
        pos = _rotate_subtree(pos, left_arm, 4, _X, -70 * deg * phase)
        pos = _rotate_subtree(pos, right_arm, 8, _X, -70 * deg * phase)
        for hip, knee in ((12, 13), (16, 17)):
            pos = _rotate_subtree(pos, topo.subtree(knee, hip), hip, _X, -60 * deg * phase)
            ankle = topo.subtree(knee + 1, knee)
            pos = _rotate_subtree(pos, ankle, knee, _X, 100 * deg * phase)
        feet = pos[:, [14, 18]].mean(axis=1) - rest[[14, 18]].mean(axis=0)
        pos -= feet[:, None, :]
    if lean:
        pos = _rotate_subtree(pos, topo.subtree(20, 1), 1, _Z, np.full(T, lean))
    return pos


def _generic_rest(topo: SkeletonTopology) -> np.ndarray:
    depth = topo.hop_distances(0)
    rest = np.zeros((topo.joint_count, 3))
    for d in range(depth.max() + 1):
        layer = np.flatnonzero(depth == d)
        for k, j in enumerate(layer):
            rest[j] = (0.15 * (k - (len(layer) - 1) / 2), 1.6 - 0.2 * d, 0.0)
    return rest


def _generic_clip(topo, exercise_index, phase, rest):
    T = len(phase)
    pos = np.broadcast_to(rest, (T,) + rest.shape).copy()
    if not topo.edges:
        return pos + 0.05 * phase[:, None, None] * _X
    u, v = topo.edges[exercise_index % len(topo.edges)]
    depth = topo.hop_distances(0)
    parent, child = (u, v) if depth[u] <= depth[v] else (v, u)
    axis = _Z if exercise_index % 2 == 0 else _X
    return _rotate_subtree(pos, topo.subtree(child, parent), parent, axis, (60 * math.pi / 180) * phase)


def synthesize(config: Optional[SynthConfig] = None, topology: Optional[SkeletonTopology] = None) -> list:
    """Generate labelled clips; subject ``s`` performs exercises round-robin."""
    cfg = config or SynthConfig()
    topo = topology or kinect_v2_topology()
    kinect = topo.joint_names == KINECT_V2_JOINTS
    if kinect:
        base_rest = np.array([_KINECT_REST[j] for j in range(25)])
        n_ex = cfg.n_exercises
        names = EXERCISES[:n_ex]
    else:
        base_rest = _generic_rest(topo)
        n_ex = max(1, min(cfg.n_exercises, len(topo.edges)))
        names = tuple(f"exercise{k}" for k in range(n_ex))
    lo, hi = cfg.score_range
    span = hi - lo
    samples = []
    subj_rng = [np.random.default_rng([cfg.seed, 0, s]) for s in range(cfg.n_subjects)]
    subj = []
    for s, rng in enumerate(subj_rng):
        scale = rng.uniform(1 - cfg.body_scale, 1 + cfg.body_scale)
        jitter = rng.normal(0, cfg.pose_jitter, size=base_rest.shape)
        offset = np.array([rng.uniform(-0.02, 0.02), 0.0, rng.uniform(-0.02, 0.02)])
        amp = rng.uniform(1 - cfg.amplitude_spread, 1 + cfg.amplitude_spread)
        speed = rng.uniform(1 - cfg.speed_spread, 1 + cfg.speed_spread)
        subj.append((scale * base_rest + jitter + offset, amp, speed))
    for c in range(cfg.n_clips):
        s = c % cfg.n_subjects
        rep = c // cfg.n_subjects
        ex = (s + rep) % n_ex
        rng = np.random.default_rng([cfg.seed, 1, c])
        rest, amp, speed = subj[s]
        t = np.arange(cfg.n_frames) / cfg.n_frames
        phase0 = rng.uniform(0, 0.05)
        excursion = 0.5 * (1 - np.cos(2 * math.pi * (cfg.cycles * speed * t + phase0)))
        amp_c = amp * rng.uniform(1 - cfg.amplitude_spread, 1 + cfg.amplitude_spread)
        is_error = rng.uniform() < cfg.error_fraction
        etype, lean = "none", 0.0
        if is_error:
            if rng.uniform() < 0.5:
                etype = "rom"
                amp_c *= rng.uniform(0.4, 0.7)
            else:
                etype = "alignment"
                lean = rng.choice([-1, 1]) * rng.uniform(10, 20) * math.pi / 180
        phase = amp_c * excursion
        if kinect:
            pos = _kinect_clip(topo, names[ex], phase, rest, lean)
        else:
            pos = _generic_clip(topo, ex, phase, rest)
            if lean:
                pos = pos + np.sin(lean) * 0.1 * _X
        pos = pos + rng.normal(0, cfg.noise, size=pos.shape)
        if is_error:
            score = lo + span * rng.uniform(0.3, 0.7)
        else:
            score = lo + span * rng.uniform(0.85, 1.0)
        seq = MotionSequence(pos, cfg.frame_rate, f"S{s + 1:02d}", names[ex])
        labels = AssessmentLabels(ex, is_error, etype, float(score))
        sid = f"S{s + 1:02d}_{names[ex]}_{rep:02d}"
        samples.append(LabeledSample(sid, seq, labels, Provenance(), f"{rep:02d}"))
    return samples
