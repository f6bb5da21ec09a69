"""Skeleton graph, motion sequences and adjacency normalization."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

ERROR_TYPES = ("none", "rom", "compensatory", "temporal", "alignment", "weight")

# Kinect v2 body model, 25 joints.
KINECT_V2_JOINTS = (
    "SpineBase", "SpineMid", "Neck", "Head",
    "ShoulderLeft", "ElbowLeft", "WristLeft", "HandLeft",
    "ShoulderRight", "ElbowRight", "WristRight", "HandRight",
    "HipLeft", "KneeLeft", "AnkleLeft", "FootLeft",
    "HipRight", "KneeRight", "AnkleRight", "FootRight",
    "SpineShoulder", "HandTipLeft", "ThumbLeft", "HandTipRight", "ThumbRight",
)
KINECT_V2_EDGES = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7), (7, 21), (6, 22),
    (20, 8), (8, 9), (9, 10), (10, 11), (11, 23), (10, 24),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple
    edges: tuple
    adjacency: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, joint_names: Sequence[str], edges) -> "SkeletonTopology":
        n = len(joint_names)
        if n < 1:
            raise ValidationError("topology needs at least one joint")
        norm_edges = []
        seen = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"edge ({i}, {j}) out of range for {n} joints")
            if i == j:
                raise ValidationError(f"self-edge on joint {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            seen.add(key)
            norm_edges.append(key)
        adj = np.zeros((n, n))
        for i, j in norm_edges:
            adj[i, j] = adj[j, i] = 1.0
        topo = cls(tuple(joint_names), tuple(norm_edges), _freeze(adj))
        if not topo.is_connected():
            raise ValidationError("skeleton graph is not connected")
        return topo

    @classmethod
    def from_adjacency(cls, adjacency, joint_names: Optional[Sequence[str]] = None) -> "SkeletonTopology":
        adj = np.asarray(adjacency, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValidationError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise ValidationError("adjacency is not symmetric")
        if np.any(np.diag(adj) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        if not np.all((adj == 0) | (adj == 1)):
            raise ValidationError("adjacency must be binary")
        n = adj.shape[0]
        names = joint_names or [f"j{i}" for i in range(n)]
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if adj[i, j]]
        return cls.from_edges(names, edges)

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def neighbors(self) -> list:
        nbrs = [[] for _ in range(self.joint_count)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs

    def hop_distances(self, root: int) -> np.ndarray:
        """Breadth-first hop count from ``root`` to every joint."""
        if not 0 <= root < self.joint_count:
            raise ValidationError(f"root joint {root} out of range")
        dist = np.full(self.joint_count, -1, dtype=int)
        dist[root] = 0
        q = deque([root])
        nbrs = self.neighbors()
        while q:
            u = q.popleft()
            for v in nbrs[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    q.append(v)
        return dist

    def is_connected(self) -> bool:
        return bool(np.all(self.hop_distances(0) >= 0))

    def subtree(self, root: int, parent: int) -> list:
        """Joints reachable from ``root`` without passing through ``parent``."""
        nbrs = self.neighbors()
        out, stack, seen = [], [root], {root, parent}
        while stack:
            u = stack.pop()
            out.append(u)
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return sorted(out)


def kinect_v2_topology() -> SkeletonTopology:
    return SkeletonTopology.from_edges(KINECT_V2_JOINTS, KINECT_V2_EDGES)


def chain_topology(n: int) -> SkeletonTopology:
    return SkeletonTopology.from_edges([f"j{i}" for i in range(n)], [(i, i + 1) for i in range(n - 1)])


def read_topology(path) -> SkeletonTopology:
    """Read the line-oriented topology format.

    Line 1 holds the joint count ``N``, the next ``N`` lines the joint names,
    then one ``i j`` pair per edge. Blank lines and ``#`` comments are ignored.
    """
    lines = []
    for raw in Path(path).read_text().splitlines():
        s = raw.split("#", 1)[0].strip()
        if s:
            lines.append(s)
    if not lines:
        raise ValidationError(f"{path}: empty topology file")
    try:
        n = int(lines[0])
    except ValueError:
        raise ValidationError(f"{path}: first line must be the joint count") from None
    if n < 1 or len(lines) < 1 + n:
        raise ValidationError(f"{path}: expected {n} joint names")
    names = lines[1:1 + n]
    edges = []
    for k, s in enumerate(lines[1 + n:], start=2 + n):
        parts = s.split()
        if len(parts) != 2:
            raise ValidationError(f"{path}: edge line {k} must be 'i j'")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ValidationError(f"{path}: edge line {k} must hold integers") from None
    return SkeletonTopology.from_edges(names, edges)


def write_topology(topology: SkeletonTopology, path) -> None:
    lines = [str(topology.joint_count), *topology.joint_names]
    lines += [f"{i} {j}" for i, j in topology.edges]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class MotionSequence:
    """Joint positions ``(T, N, 3)`` in meters, optional unit quaternions ``(T, N, 4)``."""

    positions: np.ndarray
    frame_rate: float = 30.0
    subject_id: str = ""
    exercise_id: str = ""
    orientations: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "positions", _freeze(self.positions))
        if self.orientations is not None:
            object.__setattr__(self, "orientations", _freeze(self.orientations))

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    def replace(self, positions=None, orientations=None) -> "MotionSequence":
        return MotionSequence(
            self.positions if positions is None else positions,
            self.frame_rate,
            self.subject_id,
            self.exercise_id,
            self.orientations if orientations is None else orientations,
        )

    def features(self) -> np.ndarray:
        """Per-joint input features: positions, with quaternions appended when present."""
        if self.orientations is None:
            return np.array(self.positions)
        return np.concatenate([self.positions, self.orientations], axis=-1)


@dataclass(frozen=True)
class AssessmentLabels:
    exercise_class: int
    has_error: bool
    error_type: str
    quality_score: float

    def __post_init__(self):
        if self.error_type not in ERROR_TYPES:
            raise ValidationError(f"unknown error type {self.error_type!r}")
        if not self.has_error and self.error_type != "none":
            raise ValidationError("has_error=False requires error_type='none'")

    @property
    def error_type_index(self) -> int:
        return ERROR_TYPES.index(self.error_type)

    def check_score(self, score_min: float, score_max: float) -> None:
        if not score_min <= self.quality_score <= score_max:
            raise ValidationError(
                f"quality score {self.quality_score} outside [{score_min}, {score_max}]"
            )


def symmetric_normalize(adj_plus: np.ndarray) -> np.ndarray:
    """D^-1/2 A D^-1/2 with D the row sums of ``adj_plus``; works on stacked matrices."""
    deg = adj_plus.sum(axis=-1)
    dinv = 1.0 / np.sqrt(deg)
    return dinv[..., :, None] * adj_plus * dinv[..., None, :]


def normalized_adjacency(topology_or_adj) -> np.ndarray:
    """Symmetric normalization of the self-loop augmented adjacency, D^-1/2 (A+I) D^-1/2."""
    if isinstance(topology_or_adj, SkeletonTopology):
        adj = np.array(topology_or_adj.adjacency)
    else:
        adj = np.asarray(topology_or_adj, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValidationError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise ValidationError("adjacency is not symmetric")
    return symmetric_normalize(adj + np.eye(adj.shape[0]))


def bone_lengths(seq: MotionSequence, topology: SkeletonTopology) -> np.ndarray:
    """Per-frame Euclidean length of every edge, shape ``(T, |E|)``."""
    if seq.n_joints != topology.joint_count:
        raise ValidationError(
            f"sequence has {seq.n_joints} joints, topology {topology.joint_count}"
        )
    if not topology.edges:
        return np.zeros((seq.n_frames, 0))
    e = np.array(topology.edges)
    diff = seq.positions[:, e[:, 0]] - seq.positions[:, e[:, 1]]
    return np.linalg.norm(diff, axis=-1)


def validate_sequence(seq: MotionSequence, topology: Optional[SkeletonTopology] = None) -> list:
    """Return a list of human-readable invariant violations; empty when valid."""
    report = []
    pos = np.asarray(seq.positions)
    if pos.ndim != 3 or pos.shape[-1] != 3:
        return [f"positions must have shape (T, N, 3), got {pos.shape}"]
    if pos.shape[0] < 2:
        report.append(f"sequence has {pos.shape[0]} frames, need at least 2")
    if topology is not None and pos.shape[1] != topology.joint_count:
        report.append(
            f"joint count mismatch: sequence has {pos.shape[1]}, topology {topology.joint_count}"
        )
    for t, j, c in np.argwhere(~np.isfinite(pos)):
        report.append(f"non-finite position at frame {t}, joint {j}, coordinate {'xyz'[c]}")
    if seq.orientations is not None:
        q = np.asarray(seq.orientations)
        if q.shape != pos.shape[:2] + (4,):
            report.append(f"orientations must have shape {pos.shape[:2] + (4,)}, got {q.shape}")
        else:
            norms = np.linalg.norm(q, axis=-1)
            for t, j in np.argwhere(~(np.abs(norms - 1.0) <= 1e-6)):
                report.append(f"non-unit quaternion at frame {t}, joint {j} (norm {norms[t, j]:.9g})")
    if not np.isfinite(seq.frame_rate) or seq.frame_rate <= 0:
        report.append(f"frame rate must be positive, got {seq.frame_rate}")
    return report
