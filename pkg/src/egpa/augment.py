"""Error-guided pose augmentation: parametrized movement-error injectors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .ingestion import LabeledSample, Provenance
from .skeleton import AssessmentLabels, MotionSequence, SkeletonTopology, bone_lengths

log = logging.getLogger(__name__)

KINDS = ("rom", "compensatory", "temporal", "alignment", "weight")
# Parameter value at which each injector is the identity.
IDENTITY_PARAM = {"rom": 1.0, "compensatory": 0.0, "temporal": 1.0, "alignment": 0.0, "weight": 0.0}


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ErrorSpec:
    kind: str
    param_min: float
    param_max: float
    target_joints: tuple = ()
    secondary_joints: tuple = ()
    coupling: Optional[tuple] = None
    axis: Optional[tuple] = None
    pivot_joint: Optional[int] = None
    max_weight_shift: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "target_joints", tuple(int(j) for j in self.target_joints))
        object.__setattr__(self, "secondary_joints", tuple(int(j) for j in self.secondary_joints))
        if self.kind not in KINDS:
            raise ValidationError(f"unknown error kind {self.kind!r}")
        lo, hi = float(self.param_min), float(self.param_max)
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise ValidationError(f"{self.kind}: need param_min <= param_max, got ({lo}, {hi})")
        if self.kind == "rom" and not (0 < lo and hi <= 1):
            raise ValidationError("rom: alpha bounds must lie in (0, 1]")
        if self.kind == "temporal" and lo <= 0:
            raise ValidationError("temporal: gamma bounds must be positive")
        if self.kind == "weight" and max(abs(lo), abs(hi)) > self.max_weight_shift:
            raise ValidationError(f"weight: |delta| exceeds {self.max_weight_shift} m")
        if self.kind == "compensatory":
            c = np.eye(3) if self.coupling is None else np.asarray(self.coupling, dtype=float)
            if c.shape != (3, 3):
                raise ValidationError("compensatory: coupling must be 3x3")
            object.__setattr__(self, "coupling", tuple(map(tuple, c)))
            if len(self.target_joints) != 1 or not self.secondary_joints:
                raise ValidationError("compensatory: one target joint and >= 1 secondary joint")
            if self.target_joints[0] in self.secondary_joints:
                raise ValidationError("compensatory: target joint listed as compensating joint")
        elif self.coupling is not None:
            raise ValidationError(f"{self.kind}: coupling only applies to compensatory errors")
        if self.kind in ("alignment", "weight"):
            if self.axis is None:
                raise ValidationError(f"{self.kind}: axis required")
            ax = np.asarray(self.axis, dtype=float)
            if ax.shape != (3,) or abs(np.linalg.norm(ax) - 1.0) > 1e-9:
                raise ValidationError(f"{self.kind}: axis must be a unit 3-vector")
            object.__setattr__(self, "axis", tuple(ax))
        if self.kind == "alignment" and (self.pivot_joint is None or not self.target_joints):
            raise ValidationError("alignment: pivot_joint and a joint chain required")
        if self.kind == "weight" and len(self.target_joints) != 1:
            raise ValidationError("weight: exactly one root joint in target_joints")
        if self.kind == "rom" and not self.target_joints:
            raise ValidationError("rom: target joints required")

    def severity(self, theta: float) -> float:
        """Map a parameter to [0, 1]: 0 at the mildest end of the range, 1 at the most severe."""
        dist = _distance_from_identity(self.kind, theta)
        lo = _distance_from_identity(self.kind, self.param_min)
        hi = _distance_from_identity(self.kind, self.param_max)
        mild, severe = min(lo, hi), max(lo, hi)
        if severe - mild <= 0:
            return 1.0
        return float(np.clip((dist - mild) / (severe - mild), 0.0, 1.0))

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown ErrorSpec fields: {sorted(unknown)}")
        for key in ("target_joints", "secondary_joints"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "param_min": float(self.param_min), "param_max": float(self.param_max)}
        for key in ("target_joints", "secondary_joints"):
            if getattr(self, key):
                out[key] = [int(j) for j in getattr(self, key)]
        if self.coupling is not None:
            out["coupling"] = [[float(x) for x in r] for r in np.asarray(self.coupling)]
        if self.axis is not None:
            out["axis"] = [float(x) for x in self.axis]
        if self.pivot_joint is not None:
            out["pivot_joint"] = int(self.pivot_joint)
        if self.max_weight_shift != 0.3:
            out["max_weight_shift"] = float(self.max_weight_shift)
        return out


def _distance_from_identity(kind, theta):
    if kind == "temporal":
        return abs(math.log(theta))
    return abs(theta - IDENTITY_PARAM[kind])


@dataclass(frozen=True)
class SeverityDraw:
    spec: ErrorSpec
    value: float
    rng_seed: Optional[int] = None


def sample_severity(spec: ErrorSpec, rng: np.random.Generator, rng_seed=None) -> SeverityDraw:
    if spec.param_min == spec.param_max:
        return SeverityDraw(spec, float(spec.param_min), rng_seed)
    return SeverityDraw(spec, float(rng.uniform(spec.param_min, spec.param_max)), rng_seed)


def _joint_list(seq, joints) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(joints, dtype=int))
    if idx.size == 0:
        raise ParameterError("joint list is empty")
    if np.any(idx < 0) or np.any(idx >= seq.n_joints):
        raise ParameterError(f"joint index out of range for {seq.n_joints} joints")
    return idx


def inject_rom_error(seq: MotionSequence, targets, alpha: float) -> MotionSequence:
    """Scale target-joint displacement from frame 0 by ``alpha``."""
    if not 0 < alpha <= 1:
        raise ParameterError(f"alpha must be in (0, 1], got {alpha}")
    idx = _joint_list(seq, targets)
    if alpha == 1:
        return seq
    pos = np.array(seq.positions)
    p0 = pos[0, idx]
    pos[:, idx] = p0 + alpha * (pos[:, idx] - p0)
    return seq.replace(positions=pos)


def inject_compensation(seq: MotionSequence, target_j: int, comp_k, beta: float,
                        coupling=None) -> MotionSequence:
    """Add ``beta * coupling @ (p_j(t) - p_j(0))`` to each compensating joint."""
    comp = _joint_list(seq, comp_k)
    _joint_list(seq, target_j)
    if int(target_j) in comp.tolist():
        raise ParameterError("target joint cannot also be a compensating joint")
    phi = np.eye(3) if coupling is None else np.asarray(coupling, dtype=float)
    if phi.shape != (3, 3):
        raise ParameterError("coupling must be a 3x3 matrix")
    if beta == 0:
        return seq
    pos = np.array(seq.positions)
    disp = pos[:, target_j] - pos[0, target_j]
    shift = beta * disp @ phi.T
    pos[:, comp] += shift[:, None, :]
    return seq.replace(positions=pos)


def _nlerp(q0, q1, w):
    sign = np.where(np.sum(q0 * q1, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    q = (1 - w) * q0 + w * sign * q1
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def temporal_frame_count(n_frames: int, gamma: float) -> int:
    return max(2, round_half_up(n_frames / gamma))


def inject_temporal_error(seq: MotionSequence, gamma: float) -> MotionSequence:
    """Resample the motion at speed ``gamma`` (>1 rushed, <1 slowed); frame rate is kept."""
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if gamma == 1:
        return seq
    T = seq.n_frames
    t_new = np.arange(temporal_frame_count(T, gamma)) * gamma
    s = np.clip(t_new, 0, T - 1)
    lo = np.minimum(np.floor(s).astype(int), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    w = (s - lo)[:, None, None]
    pos = seq.positions
    new_pos = (1 - w) * pos[lo] + w * pos[hi]
    new_q = None
    if seq.orientations is not None:
        new_q = _nlerp(seq.orientations[lo], seq.orientations[hi], w)
    return seq.replace(positions=new_pos, orientations=new_q)


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=float)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def _quat_mul(a, b):
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def inject_alignment_error(seq: MotionSequence, chain, pivot_joint: int, angle: float, axis,
                           topology: Optional[SkeletonTopology] = None) -> MotionSequence:
    """Rigidly rotate ``chain`` about the per-frame pivot position.

    With a topology given, the chain must be a connected subtree hanging off a
    neighbour of the pivot.
    """
    idx = _joint_list(seq, chain)
    _joint_list(seq, pivot_joint)
    if int(pivot_joint) in idx.tolist():
        raise ParameterError("pivot joint cannot be part of the rotated chain")
    ax = np.asarray(axis, dtype=float)
    if ax.shape != (3,) or abs(np.linalg.norm(ax) - 1) > 1e-9:
        raise ParameterError("axis must be a unit 3-vector")
    if topology is not None:
        nbrs = topology.neighbors()
        roots = [j for j in idx.tolist() if j in nbrs[pivot_joint]]
        if len(roots) != 1 or sorted(topology.subtree(roots[0], pivot_joint)) != sorted(set(idx.tolist())):
            raise ParameterError("chain must be the full subtree below one child of the pivot")
    if angle == 0:
        return seq
    R = rotation_matrix(ax, angle)
    pos = np.array(seq.positions)
    piv = pos[:, pivot_joint][:, None, :]
    pos[:, idx] = piv + (pos[:, idx] - piv) @ R.T
    new_q = None
    if seq.orientations is not None:
        r = np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * ax])
        new_q = np.array(seq.orientations)
        new_q[:, idx] = _quat_mul(np.broadcast_to(r, new_q[:, idx].shape), new_q[:, idx])
    return seq.replace(positions=pos, orientations=new_q)


def inject_weight_shift(seq: MotionSequence, axis, delta: float, root_joint: int,
                        topology: SkeletonTopology) -> MotionSequence:
    """Translate joint i by ``delta * axis / (1 + hops(root, i))``."""
    ax = np.asarray(axis, dtype=float)
    if ax.shape != (3,) or abs(np.linalg.norm(ax) - 1) > 1e-9:
        raise ParameterError("axis must be a unit 3-vector")
    if seq.n_joints != topology.joint_count:
        raise ParameterError("sequence and topology joint counts differ")
    if delta == 0:
        return seq
    w = 1.0 / (1.0 + topology.hop_distances(root_joint))
    pos = np.array(seq.positions) + delta * w[None, :, None] * ax
    return seq.replace(positions=pos)


def apply_spec(seq: MotionSequence, spec: ErrorSpec, theta: float,
               topology: SkeletonTopology) -> MotionSequence:
    if spec.kind == "rom":
        return inject_rom_error(seq, spec.target_joints, theta)
    if spec.kind == "compensatory":
        return inject_compensation(seq, spec.target_joints[0], spec.secondary_joints, theta, spec.coupling)
    if spec.kind == "temporal":
        return inject_temporal_error(seq, theta)
    if spec.kind == "alignment":
        return inject_alignment_error(seq, spec.target_joints, spec.pivot_joint, theta, spec.axis, topology)
    return inject_weight_shift(seq, spec.axis, theta, spec.target_joints[0], topology)


def restore_bone_lengths(augmented: MotionSequence, original: MotionSequence,
                         topology: SkeletonTopology, root: int = 0) -> MotionSequence:
    """Re-place joints outward from ``root`` along the augmented bone directions at original lengths."""
    if augmented.n_frames != original.n_frames:
        raise ValidationError("bone repair needs matching frame counts")
    pos = np.array(augmented.positions)
    ref = original.positions
    out = np.array(pos)
    order = topology.hop_distances(root)
    nbrs = topology.neighbors()
    for u in np.argsort(order, kind="stable"):
        for v in nbrs[u]:
            if order[v] != order[u] + 1:
                continue
            d = pos[:, v] - pos[:, u]
            n = np.linalg.norm(d, axis=-1, keepdims=True)
            length = np.linalg.norm(ref[:, v] - ref[:, u], axis=-1, keepdims=True)
            unit = np.divide(d, n, out=np.zeros_like(d), where=n > 1e-12)
            out[:, v] = out[:, u] + unit * length
    return augmented.replace(positions=out)


@dataclass
class PlausibilityReport:
    passed: bool
    worst_frame: int = -1
    worst_edge: Optional[tuple] = None
    worst_deviation: float = 0.0
    violations: int = 0

    def __bool__(self):
        return self.passed


def plausibility_check(original: MotionSequence, augmented: MotionSequence,
                       topology: SkeletonTopology, tol_fraction: float = 0.05,
                       time_scale: Optional[float] = None) -> PlausibilityReport:
    """Compare same-frame (or time-mapped) bone lengths; fail beyond ``tol_fraction`` relative deviation."""
    if original.n_joints != augmented.n_joints:
        return PlausibilityReport(False, violations=1, worst_deviation=float("inf"))
    if not topology.edges:
        return PlausibilityReport(True)
    L0 = bone_lengths(original, topology)
    L1 = bone_lengths(augmented, topology)
    T0, T1 = L0.shape[0], L1.shape[0]
    if T0 != T1 or time_scale is not None:
        if time_scale is None:
            time_scale = (T0 - 1) / (T1 - 1)
        s = np.clip(np.arange(T1) * time_scale, 0, T0 - 1)
        lo = np.floor(s).astype(int)
        hi = np.minimum(lo + 1, T0 - 1)
        w = (s - lo)[:, None]
        L0 = (1 - w) * L0[lo] + w * L0[hi]
    diff = np.abs(L1 - L0)
    dev = np.where(L0 > 1e-12, diff / np.maximum(L0, 1e-12), diff)
    dev = np.where(np.isfinite(dev), dev, np.inf)
    t, e = np.unravel_index(np.argmax(dev), dev.shape)
    worst = float(dev[t, e])
    n_bad = int(np.sum(dev > tol_fraction))
    return PlausibilityReport(n_bad == 0, int(t), topology.edges[e], worst, n_bad)


@dataclass
class AugmentConfig:
    tol_fraction: float = 0.05
    max_retries: int = 5
    repair_bones: bool = True
    repair_root: int = 0
    score_range: tuple = (0.0, 10.0)
    # Quality penalty as a fraction of the score span, from mildest to most severe draw.
    quality_penalty: tuple = (0.2, 0.5)


@dataclass
class SkipRecord:
    index: int
    source_id: str
    reason: str


@dataclass
class AugmentResult:
    samples: list = field(default_factory=list)
    skips: list = field(default_factory=list)


def augment_one(sample: LabeledSample, spec: ErrorSpec, theta: float, topology: SkeletonTopology,
                config: AugmentConfig):
    """Inject one error; returns (sequence, plausibility report)."""
    seq = apply_spec(sample.sequence, spec, theta, topology)
    if config.repair_bones and spec.kind != "temporal":
        seq = restore_bone_lengths(seq, sample.sequence, topology, config.repair_root)
    time_scale = theta if spec.kind == "temporal" else None
    return seq, plausibility_check(sample.sequence, seq, topology, config.tol_fraction, time_scale)


def augmented_quality(score: float, severity: float, config: AugmentConfig) -> float:
    lo, hi = config.score_range
    p0, p1 = config.quality_penalty
    return float(max(lo, score - (hi - lo) * (p0 + (p1 - p0) * severity)))


def generate_augmented_dataset(samples: Sequence[LabeledSample], specs: Sequence[ErrorSpec],
                               ratio: float, seed: int, topology: SkeletonTopology,
                               config: Optional[AugmentConfig] = None) -> AugmentResult:
    """Emit ``round(ratio * len(samples))`` error-injected copies of the correct originals.

    Output ``i`` uses source ``i mod n_correct`` and its own generator seeded by
    ``(seed, i)``, so results do not depend on evaluation order.
    """
    config = config or AugmentConfig()
    if not ratio > 0:
        raise ValidationError(f"ratio must be positive, got {ratio}")
    if not specs:
        raise ValidationError("at least one ErrorSpec required")
    sources = [s for s in samples if s.provenance.kind == "original" and not s.labels.has_error]
    n_out = round_half_up(ratio * len(samples))
    if n_out and not sources:
        raise ValidationError("no error-free original samples to augment")
    result = AugmentResult()
    for i in range(n_out):
        src = sources[i % len(sources)]
        rng = np.random.default_rng([seed, i])
        last = None
        for _attempt in range(config.max_retries + 1):
            spec_idx = int(rng.integers(len(specs)))
            spec = specs[spec_idx]
            theta = sample_severity(spec, rng).value
            seq, report = augment_one(src, spec, theta, topology, config)
            if report.passed:
                sev = spec.severity(theta)
                labels = AssessmentLabels(
                    src.labels.exercise_class, True, spec.kind,
                    augmented_quality(src.labels.quality_score, sev, config),
                )
                prov = Provenance("augmented", spec.kind, theta, sev, src.sample_id, spec_idx)
                result.samples.append(LabeledSample(f"{src.sample_id}~aug{i:05d}", seq, labels, prov,
                                                    src.repetition))
                break
            last = (spec.kind, theta, report)
        else:
            kind, theta, rep = last
            reason = (f"plausibility failed after {config.max_retries + 1} attempts; last {kind} "
                      f"theta={theta:.6g} edge={rep.worst_edge} frame={rep.worst_frame} "
                      f"deviation={rep.worst_deviation:.4g}")
            log.info("skipping augmentation %d of %s: %s", i, src.sample_id, reason)
            result.skips.append(SkipRecord(i, src.sample_id, reason))
    return result


def default_specs(topology: SkeletonTopology) -> list:
    """Default error patterns for the 25-joint Kinect v2 body model."""
    if topology.joint_count != 25:
        raise ValidationError("default specs are defined for the 25-joint body model")
    right_arm = topology.subtree(9, 8)   # elbow and below
    left_arm = topology.subtree(5, 4)
    upper_body = topology.subtree(20, 1)
    deg = math.pi / 180
    return [
        ErrorSpec("rom", 0.3, 0.9, target_joints=tuple(right_arm + left_arm)),
        ErrorSpec("compensatory", 0.1, 0.5, target_joints=(10,), secondary_joints=(20, 2, 3)),
        ErrorSpec("temporal", 1.3, 2.0),
        ErrorSpec("temporal", 0.5, 1 / 1.3),
        ErrorSpec("alignment", 5 * deg, 25 * deg, target_joints=tuple(upper_body), pivot_joint=1,
                  axis=(0.0, 0.0, 1.0)),
        ErrorSpec("weight", 0.03, 0.12, target_joints=(0,), axis=(1.0, 0.0, 0.0)),
    ]


def load_specs(path) -> list:
    import yaml

    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"spec file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML ({exc})") from None
    if isinstance(data, dict):
        data = data.get("specs", [])
    if not isinstance(data, list) or not data:
        raise ValidationError(f"{path}: expected a non-empty list of error specs")
    return [ErrorSpec.from_dict(d) for d in data]


def save_specs(specs, path) -> None:
    import yaml

    with open(path, "w") as fh:
        yaml.safe_dump({"specs": [s.to_dict() for s in specs]}, fh, sort_keys=False)
