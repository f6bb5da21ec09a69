"""Assessment metrics, per-exercise evaluation, attention statistics and ablations."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .model import ModelConfig, forward

MAPE_EPS = 1e-9


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size == 0:
        raise ValidationError("metrics need at least one element")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mape(pred, truth, eps: float = MAPE_EPS) -> float:
    """Mean absolute percentage error; refuses targets within ``eps`` of zero."""
    p, t = _pair(pred, truth)
    bad = np.flatnonzero(np.abs(t) <= eps)
    if bad.size:
        raise ValidationError(f"MAPE undefined: target at index {int(bad[0])} is ~0")
    return float(np.mean(np.abs(p - t) / np.abs(t)) * 100.0)


def err_acc(pred_flags, truth_flags) -> float:
    p = np.asarray(pred_flags, dtype=bool).ravel()
    t = np.asarray(truth_flags, dtype=bool).ravel()
    if p.shape != t.shape:
        raise ValidationError("length mismatch")
    if p.size == 0:
        raise ValidationError("metrics need at least one element")
    return float(np.mean(p == t))


def macro_f1(pred_classes, truth_classes, class_count: int) -> float:
    """Unweighted mean of per-class F1 over all ``class_count`` classes.

    A class with zero precision + recall (including a class absent from both
    vectors) contributes 0.
    """
    p = np.asarray(pred_classes, dtype=int).ravel()
    t = np.asarray(truth_classes, dtype=int).ravel()
    if p.shape != t.shape:
        raise ValidationError("length mismatch")
    if p.size == 0:
        raise ValidationError("metrics need at least one element")
    for arr in (p, t):
        if arr.min() < 0 or arr.max() >= class_count:
            raise ValidationError(f"class label outside [0, {class_count})")
    f1 = np.zeros(class_count)
    for c in range(class_count):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1[c] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return float(f1.mean())


@dataclass
class Prediction:
    sample_id: str
    exercise_id: str
    outputs: object
    labels: object
    record: object = None


def predict(params: dict, samples: Sequence, config: ModelConfig, A: np.ndarray,
            keep_attention: bool = False) -> list:
    out = []
    for s in sorted(samples, key=lambda s: s.sample_id):
        o, rec = forward(s.sequence, A, params, config)
        out.append(Prediction(s.sample_id, s.exercise_id, o, s.labels, rec if keep_attention else None))
    return out


def _row(preds, config: ModelConfig) -> dict:
    row = {"n": len(preds)}
    nan = float("nan")
    if "quality_score" in config.heads:
        q = [p.outputs.quality_score for p in preds]
        y = [p.labels.quality_score for p in preds]
        row["mae"], row["rmse"], row["mape"] = mae(q, y), rmse(q, y), mape(q, y)
        if row["mae"] > row["rmse"] + 1e-12:
            raise AssertionError("mae exceeded rmse")
    else:
        row["mae"] = row["rmse"] = row["mape"] = nan
    if "error_detect" in config.heads:
        pf = [p.outputs.predicted_error() for p in preds]
        tf = [bool(p.labels.has_error) for p in preds]
        row["err_acc"] = err_acc(pf, tf)
        row["error_detect_f1"] = macro_f1(np.array(pf, int), np.array(tf, int), 2)
    else:
        row["err_acc"] = row["error_detect_f1"] = nan
    if "error_type" in config.heads:
        pc = [int(np.argmax(p.outputs.error_type_logits)) for p in preds]
        tc = [p.labels.error_type_index for p in preds]
        row["error_type_f1"] = macro_f1(pc, tc, config.n_error_types)
    else:
        row["error_type_f1"] = nan
    if "exercise_class" in config.heads:
        pc = [int(np.argmax(p.outputs.exercise_logits)) for p in preds]
        tc = [p.labels.exercise_class for p in preds]
        row["exercise_acc"] = float(np.mean(np.array(pc) == np.array(tc)))
        row["exercise_f1"] = macro_f1(pc, tc, config.n_exercises)
    else:
        row["exercise_acc"] = row["exercise_f1"] = nan
    # The single Macro-F1 column reports error-type classification when available.
    row["macro_f1"] = row["error_type_f1"] if "error_type" in config.heads else row["error_detect_f1"]
    return row


@dataclass
class EvalReport:
    overall: dict
    per_exercise: dict = field(default_factory=dict)
    sample_count: int = 0

    def rows(self):
        yield "overall", self.overall
        for ex in sorted(self.per_exercise):
            yield ex, self.per_exercise[ex]


def evaluate(params: dict, samples: Sequence, config: ModelConfig, topology,
             predictions: Optional[list] = None) -> EvalReport:
    if not samples:
        raise ValidationError("evaluate needs at least one sample")
    A = np.array(topology.adjacency)
    preds = predictions if predictions is not None else predict(params, samples, config, A)
    groups = {}
    for p in preds:
        groups.setdefault(p.exercise_id, []).append(p)
    return EvalReport(_row(preds, config), {ex: _row(g, config) for ex, g in groups.items()}, len(preds))


REPORT_COLUMNS = ("exercise", "MAE", "RMSE", "MAPE", "Err-Acc", "Macro-F1")


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_report(report: EvalReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for name, r in report.rows():
            w.writerow([name, _fmt(r["mae"]), _fmt(r["rmse"]), _fmt(r["mape"]) if math.isnan(r["mape"])
                        else f"{r['mape']:.4f}%", _fmt(r["err_acc"]), _fmt(r["macro_f1"])])
    if json_path:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        data = {"sample_count": report.sample_count, "overall": clean(report.overall),
                "per_exercise": {k: clean(v) for k, v in sorted(report.per_exercise.items())}}
        with open(json_path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def class_mean_mask(records: Sequence) -> np.ndarray:
    """Mean over samples of each sample's frame-averaged mask."""
    if not records:
        raise ValidationError("attention statistics need at least one record per class")
    return np.mean([np.asarray(r.mask).mean(axis=0) for r in records], axis=0)


@dataclass
class AttentionStats:
    mean_correct: np.ndarray
    mean_error: np.ndarray
    divergence: float


def attention_stats(correct: Sequence, erroneous: Sequence) -> AttentionStats:
    """Per-class mean masks and the mean absolute entrywise difference between them."""
    mc, me = class_mean_mask(correct), class_mean_mask(erroneous)
    return AttentionStats(mc, me, float(np.mean(np.abs(mc - me))))


def split_half_divergence(records: Sequence, seed: int) -> float:
    """Divergence between two random halves of one class, the null reference."""
    if len(records) < 2:
        raise ValidationError("need at least two records to split")
    order = np.random.default_rng(seed).permutation(len(records))
    half = len(records) // 2
    a = [records[i] for i in order[:half]]
    b = [records[i] for i in order[half:]]
    return attention_stats(a, b).divergence


def write_mask_csv(matrix: np.ndarray, path) -> None:
    np.savetxt(path, matrix, delimiter=",", fmt="%.10f")


ABLATION_TOGGLES = ("spatial_attention", "temporal_conv", "rom_errors",
                    "compensatory_errors", "alignment_errors", "curriculum")
_TOGGLE_KIND = {"rom_errors": "rom", "compensatory_errors": "compensatory", "alignment_errors": "alignment"}


def ablation_run(train, val, test, specs, model_cfg, train_cfg, topology, toggles=(),
                 augment_cfg=None) -> list:
    """Train and evaluate the full model plus one variant per disabled component.

    Every variant sees the same data and seeds. Returns ``[(variant, EvalReport), ...]``.
    """
    from .training import train_two_stage

    unknown = set(toggles) - set(ABLATION_TOGGLES)
    if unknown:
        raise ValidationError(f"unknown ablation toggles {sorted(unknown)}")
    variants = [("full", model_cfg, train_cfg, list(specs))]
    for t in ABLATION_TOGGLES:
        if t not in toggles:
            continue
        m, c, sp = model_cfg, train_cfg, list(specs)
        if t == "spatial_attention":
            m = replace(model_cfg, use_attention=False)
        elif t == "temporal_conv":
            m = replace(model_cfg, use_temporal=False)
        elif t == "curriculum":
            c = replace(train_cfg, curriculum=False)
        else:
            sp = [s for s in specs if s.kind != _TOGGLE_KIND[t]]
        variants.append((f"w/o {t}", m, c, sp))
    rows = []
    for name, m, c, sp in variants:
        res = train_two_stage(train, val, sp, m, c, topology, augment_cfg=augment_cfg)
        rows.append((name, evaluate(res.params, test, m, topology)))
    return rows


def write_ablation(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "MAE", "Err-Acc", "Macro-F1"))
        for name, rep in rows:
            r = rep.overall
            w.writerow([name, _fmt(r["mae"]), _fmt(r["err_acc"]), _fmt(r["macro_f1"])])
