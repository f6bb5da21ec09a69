"""Dataset ingestion: canonical sequence files, manifests, catalogs and subject splits."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .skeleton import ERROR_TYPES, AssessmentLabels, MotionSequence

_SPLIT = re.compile(r"[,\s]+")
FLOAT_FMT = "%.17g"  # round-trips every float64 exactly


@dataclass(frozen=True)
class Provenance:
    kind: str = "original"  # original | augmented
    error_type: str = "none"
    severity: float = 0.0  # the drawn parameter value
    severity_norm: float = 0.0  # 0 mildest .. 1 most severe within the spec range
    source_id: str = ""
    spec_index: int = -1


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    sequence: MotionSequence
    labels: AssessmentLabels
    provenance: Provenance = Provenance()
    repetition: str = ""

    def __post_init__(self):
        if self.provenance.kind == "augmented":
            if not self.labels.has_error or self.labels.error_type != self.provenance.error_type:
                raise ValidationError(f"{self.sample_id}: augmented sample labels disagree with provenance")
        elif self.provenance.kind != "original":
            raise ValidationError(f"unknown provenance {self.provenance.kind!r}")

    @property
    def subject_id(self) -> str:
        return self.sequence.subject_id

    @property
    def exercise_id(self) -> str:
        return self.sequence.exercise_id


@dataclass
class DatasetManifest:
    root: str
    pattern: str = "*.txt"
    scale: float = 1.0
    frame_rate: float = 30.0
    filename_regex: str = r"(?P<subject>[^_]+)_(?P<exercise>[^_]+)_(?P<repetition>[^_.]+)"
    label_table: Optional[str] = None
    joint_count: Optional[int] = None
    score_range: tuple = (0.0, 10.0)  # range of the label table's scores
    target_score_range: tuple = (0.0, 10.0)  # model's score range
    orientation_suffix: Optional[str] = None
    test_subjects: tuple = ()

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"manifest scale must be positive, got {self.scale}")
        try:
            rx = re.compile(self.filename_regex)
        except re.error as exc:
            raise ValidationError(f"bad filename_regex: {exc}") from None
        missing = {"subject", "exercise"} - set(rx.groupindex)
        if missing:
            raise ValidationError(f"filename_regex lacks groups {sorted(missing)}")
        self.score_range = tuple(float(x) for x in self.score_range)
        self.target_score_range = tuple(float(x) for x in self.target_score_range)
        for r in (self.score_range, self.target_score_range):
            if len(r) != 2 or not r[0] < r[1]:
                raise ValidationError(f"score range must be (low, high) with low < high, got {r}")
        self.test_subjects = tuple(str(s) for s in self.test_subjects)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        import yaml

        path = Path(path)
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: manifest must be a mapping")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"{path}: unknown manifest keys {sorted(unknown)}")
        if "root" not in data:
            raise ValidationError(f"{path}: manifest needs 'root'")
        root = Path(data["root"])
        if not root.is_absolute():
            data["root"] = str(path.parent / root)
        if data.get("label_table") and not Path(data["label_table"]).is_absolute():
            data["label_table"] = str(path.parent / data["label_table"])
        return cls(**data)

    def file_metadata(self, path) -> dict:
        m = re.search(self.filename_regex, Path(path).name)
        if not m:
            raise ValidationError(f"{path}: file name does not match filename_regex")
        meta = {k: (v or "") for k, v in m.groupdict().items()}
        if not meta.get("subject") or not meta.get("exercise"):
            raise ValidationError(f"{path}: empty subject or exercise identifier")
        meta.setdefault("repetition", "")
        return meta

    def rescale_score(self, score: float) -> float:
        a, b = self.score_range
        c, d = self.target_score_range
        return c + (score - a) * (d - c) / (b - a)


def uiprmd_manifest(root, **overrides) -> DatasetManifest:
    """Preset for UI-PRMD style exports named like ``m01_s01_e01_positions.txt``.

    UI-PRMD's movement id maps to the exercise, the episode to the repetition.
    Positions there are in millimeters.
    """
    kw = dict(root=str(root), pattern="*_positions*.txt", scale=0.001, frame_rate=30.0,
              filename_regex=r"(?P<exercise>m\d+)_(?P<subject>s\d+)_(?P<repetition>e\d+)",
              joint_count=22)
    kw.update(overrides)
    return DatasetManifest(**kw)


def kimore_manifest(root, **overrides) -> DatasetManifest:
    """Preset for KIMORE style exports named like ``P_ID1_Es1_0.txt`` with scores 0..50."""
    kw = dict(root=str(root), pattern="*.txt", scale=1.0, frame_rate=30.0,
              filename_regex=r"(?P<subject>[A-Z]+_ID\d+)_(?P<exercise>Es\d)_?(?P<repetition>\d*)",
              joint_count=25, score_range=(0.0, 50.0))
    kw.update(overrides)
    return DatasetManifest(**kw)


def _parse_rows(text: str, ncols: Optional[int], what: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        fields = _SPLIT.split(stripped)
        if ncols is None:
            ncols = len(fields)
        if len(fields) != ncols:
            raise ParseError(f"{what}: expected {ncols} columns, found {len(fields)}", lineno)
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            col = next(i for i, f in enumerate(fields, start=1) if not _is_float(f))
            raise ParseError(f"{what}: cannot parse number {fields[col - 1]!r}", lineno, col) from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), ncols or 0)


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_positions(text: str, joint_count: Optional[int] = None, scale: float = 1.0) -> np.ndarray:
    """Parse one-frame-per-line text (x, y, z per joint) into a ``(T, N, 3)`` array."""
    ncols = None if joint_count is None else 3 * joint_count
    rows = _parse_rows(text, ncols, "positions")
    if rows.shape[1] % 3:
        raise ParseError(f"positions: column count {rows.shape[1]} is not a multiple of 3", 1)
    return rows.reshape(rows.shape[0], -1, 3) * scale


def parse_sequence_file(path, manifest: Optional[DatasetManifest] = None) -> MotionSequence:
    path = Path(path)
    manifest = manifest or DatasetManifest(root=str(path.parent))
    try:
        pos = parse_positions(path.read_text(), manifest.joint_count, manifest.scale)
    except ParseError as exc:
        raise ParseError(f"{path.name}: {exc}") from None
    meta = manifest.file_metadata(path)
    quats = None
    if manifest.orientation_suffix:
        qpath = path.with_suffix(manifest.orientation_suffix)
        if qpath.exists():
            q = _parse_rows(qpath.read_text(), 4 * pos.shape[1], "orientations")
            quats = q.reshape(q.shape[0], -1, 4)
    return MotionSequence(pos, manifest.frame_rate, meta["subject"], meta["exercise"], quats)


def format_rows(arr: np.ndarray) -> str:
    flat = np.asarray(arr).reshape(arr.shape[0], -1)
    buf = io.StringIO()
    for row in flat:
        buf.write(",".join(FLOAT_FMT % v for v in row))
        buf.write("\n")
    return buf.getvalue()


def write_sequence_file(seq: MotionSequence, path) -> None:
    """Write positions (and a ``.quat`` sidecar for orientations) in the canonical text format."""
    path = Path(path)
    path.write_text(format_rows(seq.positions))
    if seq.orientations is not None:
        path.with_suffix(".quat").write_text(format_rows(seq.orientations))


def read_canonical(path, frame_rate, subject, exercise) -> MotionSequence:
    path = Path(path)
    pos = parse_positions(path.read_text())
    qpath = path.with_suffix(".quat")
    quats = None
    if qpath.exists():
        q = _parse_rows(qpath.read_text(), 4 * pos.shape[1], "orientations")
        quats = q.reshape(q.shape[0], -1, 4)
    return MotionSequence(pos, frame_rate, subject, exercise, quats)


@dataclass
class LoadSkip:
    path: str
    reason: str


@dataclass
class LoadResult:
    samples: list = field(default_factory=list)
    skips: list = field(default_factory=list)


def _read_label_table(path) -> dict:
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["subject"].strip(), row["exercise"].strip(), str(row.get("repetition", "")).strip())
            table[key] = row
    return table


def _truthy(s) -> bool:
    return str(s).strip().lower() in ("1", "true", "yes", "y")


def load_dataset(manifest: DatasetManifest) -> LoadResult:
    """Parse every matching file and join labels on (subject, exercise, repetition)."""
    root = Path(manifest.root)
    files = sorted(root.glob(manifest.pattern)) if root.exists() else []
    table = _read_label_table(manifest.label_table) if manifest.label_table else None
    parsed = []
    result = LoadResult()
    for path in files:
        try:
            seq = parse_sequence_file(path, manifest)
            meta = manifest.file_metadata(path)
        except ValidationError as exc:
            result.skips.append(LoadSkip(str(path), str(exc)))
            continue
        key = (meta["subject"], meta["exercise"], meta["repetition"])
        if table is not None and key not in table:
            result.skips.append(LoadSkip(str(path), f"no label row for {key}"))
            continue
        parsed.append((path, seq, meta, None if table is None else table[key]))
    exercises = sorted({seq.exercise_id for _, seq, _, _ in parsed})
    for path, seq, meta, row in parsed:
        if row is None:
            labels = AssessmentLabels(exercises.index(seq.exercise_id), False, "none",
                                      manifest.target_score_range[1])
        else:
            has_error = _truthy(row.get("has_error", "0"))
            etype = (row.get("error_type") or "").strip() or "none"
            if etype not in ERROR_TYPES:
                result.skips.append(LoadSkip(str(path), f"unknown error_type {etype!r}"))
                continue
            cls_raw = (row.get("exercise_class") or "").strip()
            labels = AssessmentLabels(
                int(cls_raw) if cls_raw else exercises.index(seq.exercise_id),
                has_error, etype, manifest.rescale_score(float(row["quality_score"])),
            )
        sid = f"{meta['subject']}_{meta['exercise']}_{meta['repetition']}".rstrip("_")
        result.samples.append(LabeledSample(sid, seq, labels, Provenance(), meta["repetition"]))
    return result


def subject_split(samples: Sequence[LabeledSample], test_fraction: float, seed: int):
    """Split so that no subject contributes to both sides."""
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < 2:
        raise ValidationError("subject split needs at least 2 distinct subjects (would leak)")
    n_test = max(1, int(np.floor(test_fraction * len(subjects) + 0.5)))
    n_test = min(n_test, len(subjects) - 1)
    order = np.random.default_rng(seed).permutation(len(subjects))
    test_subjects = {subjects[i] for i in order[:n_test]}
    train = [s for s in samples if s.subject_id not in test_subjects]
    test = [s for s in samples if s.subject_id in test_subjects]
    return train, test


def split_by_subjects(samples, test_subjects):
    test_subjects = set(test_subjects)
    train = [s for s in samples if s.subject_id not in test_subjects]
    test = [s for s in samples if s.subject_id in test_subjects]
    return train, test


CATALOG_FIELDS = (
    "sample_id", "path", "subject", "exercise", "repetition", "frame_rate",
    "exercise_class", "has_error", "error_type", "quality_score",
    "provenance", "aug_error_type", "severity", "severity_norm", "source_id", "spec_index",
)


def write_catalog(samples: Sequence[LabeledSample], out_dir, name="catalog.csv",
                  seq_dir="sequences", skips=()) -> Path:
    """Write sequence files plus a catalog CSV listing samples, labels and provenance."""
    out_dir = Path(out_dir)
    (out_dir / seq_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        rel = f"{seq_dir}/{_safe_name(s.sample_id)}.txt"
        write_sequence_file(s.sequence, out_dir / rel)
        p = s.provenance
        rows.append({
            "sample_id": s.sample_id, "path": rel, "subject": s.subject_id,
            "exercise": s.exercise_id, "repetition": s.repetition,
            "frame_rate": repr(float(s.sequence.frame_rate)),
            "exercise_class": s.labels.exercise_class, "has_error": int(s.labels.has_error),
            "error_type": s.labels.error_type, "quality_score": repr(float(s.labels.quality_score)),
            "provenance": p.kind, "aug_error_type": p.error_type,
            "severity": repr(float(p.severity)), "severity_norm": repr(float(p.severity_norm)),
            "source_id": p.source_id, "spec_index": p.spec_index,
        })
    path = out_dir / name
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CATALOG_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if skips:
        with open(out_dir / (Path(name).stem + "_skips.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["item", "reason"])
            for sk in skips:
                item = getattr(sk, "path", None) or f"{sk.source_id}#{sk.index}"
                w.writerow([item, sk.reason])
    return path


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.~-]", "_", s)


def read_catalog(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"catalog not found: {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CATALOG_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: catalog lacks columns {sorted(missing)}")
        for row in reader:
            seq = read_canonical(path.parent / row["path"], float(row["frame_rate"]),
                                 row["subject"], row["exercise"])
            labels = AssessmentLabels(int(row["exercise_class"]), bool(int(row["has_error"])),
                                      row["error_type"], float(row["quality_score"]))
            prov = Provenance(row["provenance"], row["aug_error_type"], float(row["severity"]),
                              float(row["severity_norm"]), row["source_id"], int(row["spec_index"]))
            out.append(LabeledSample(row["sample_id"], seq, labels, prov, row["repetition"]))
    return out
