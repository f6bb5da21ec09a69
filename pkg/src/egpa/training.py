"""Two-stage curriculum training with Adam, plateau LR decay and early stopping."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, generate_augmented_dataset
from .errors import ValidationError
from .model import ModelConfig, fit_input_normalization, forward, gradients, init_params, loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_initial: float = 0.001
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 8
    ramp_epochs: int = 10
    aug_fraction_cap: float = 0.5
    severity_ramp: tuple = (0.0, 1.0)
    curriculum: bool = True
    pool_ratio: float = 1.0
    val_pool_ratio: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.severity_ramp = tuple(float(x) for x in self.severity_ramp)
        if not 0 < self.plateau_factor < 1:
            raise ValidationError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValidationError("patience values must be >= 1")
        if self.pool_ratio <= 0 or self.val_pool_ratio <= 0:
            raise ValidationError("pool ratios must be positive")
        if not 0 <= self.aug_fraction_cap <= 1:
            raise ValidationError("aug_fraction_cap must be in [0, 1]")
        if not self.lr_initial > 0 or self.max_epochs < 1 or self.batch_size < 1 or self.ramp_epochs < 1:
            raise ValidationError("lr_initial, max_epochs, batch_size and ramp_epochs must be positive")
        lo, hi = self.severity_ramp
        if not 0 <= lo <= hi <= 1:
            raise ValidationError("severity_ramp must satisfy 0 <= start <= end <= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["severity_ramp"] = list(self.severity_ramp)
        return d


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    lr: float
    step: int = 0
    epoch: int = 0
    stage: int = 1
    best_metric: float = float("inf")
    since_improvement: int = 0
    plateau_count: int = 0

    @classmethod
    def fresh(cls, params: dict, lr: float, stage: int = 1) -> "TrainState":
        return cls(params={k: np.array(v) for k, v in params.items()},
                   m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()},
                   lr=lr, stage=stage)


def adam_step(state: TrainState, grads: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> TrainState:
    """Bias-corrected Adam update of every parameter, in place."""
    for name, g in grads.items():
        if name not in state.params or g.shape != state.params[name].shape:
            raise ValidationError(f"gradient {name!r} does not match parameters")
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        state.params[name] = state.params[name] - state.lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def lr_schedule(state: TrainState, metric: float, config: TrainConfig) -> bool:
    """Track the validation metric; decay LR after a plateau. Returns True on improvement."""
    if not np.isfinite(metric):
        raise ValidationError(f"validation metric must be finite, got {metric}")
    if metric < state.best_metric - config.min_delta:
        state.best_metric = metric
        state.since_improvement = 0
        state.plateau_count = 0
        return True
    state.since_improvement += 1
    state.plateau_count += 1
    if state.plateau_count >= config.plateau_patience:
        state.lr *= config.plateau_factor
        state.plateau_count = 0
    return False


def curriculum_schedule(epoch: int, config: TrainConfig, enabled: bool = True):
    """Augmented fraction and admissible severity cap for a stage-2 epoch."""
    if not enabled:
        return config.aug_fraction_cap, 1.0
    ramp = min(1.0, epoch / config.ramp_epochs)
    lo, hi = config.severity_ramp
    return config.aug_fraction_cap * ramp, lo + (hi - lo) * ramp


def curriculum_mix(epoch: int, originals: Sequence, augmented_pool: Sequence, config: TrainConfig,
                   seed: int, enabled: bool = True):
    """Epoch sample list: all originals plus admissible augmented samples at fraction f(epoch).

    Returns ``(samples, info)``; ``info`` records the fraction and severity cap.
    """
    frac, cap = curriculum_schedule(epoch, config, enabled)
    rng = np.random.default_rng([seed, 2, epoch])
    admissible = [s for s in augmented_pool if s.provenance.severity_norm <= cap + 1e-12]
    if frac >= 1.0:
        n_aug = len(admissible)
    else:
        n_aug = int(np.floor(frac / (1.0 - frac) * len(originals) + 0.5))
    n_aug = min(n_aug, len(admissible))
    chosen = []
    if n_aug:
        pick = np.sort(rng.choice(len(admissible), size=n_aug, replace=False))
        chosen = [admissible[i] for i in pick]
    info = {"aug_fraction": frac, "severity_cap": cap, "n_augmented": len(chosen)}
    return list(originals) + chosen, info


def batch_gradients(batch: Sequence, params: dict, model_cfg: ModelConfig, A: np.ndarray,
                    threads: int = 1):
    """Mean loss and gradients over a batch, accumulated in batch order."""
    def one(s):
        return gradients(s.sequence, s.labels, params, model_cfg, A)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, batch))
    else:
        results = [one(s) for s in batch]
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in results[0][1].items()}
    for value, g in results:
        total += value
        for k in acc:
            acc[k] += g[k]
    n = len(batch)
    return total / n, {k: v / n for k, v in acc.items()}


def mean_loss(samples: Sequence, params: dict, model_cfg: ModelConfig, A: np.ndarray) -> float:
    ordered = sorted(samples, key=lambda s: s.sample_id)
    total = 0.0
    for s in ordered:
        total += loss(forward(s.sequence, A, params, model_cfg)[0], s.labels, model_cfg)
    return total / len(ordered)


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    stage1_params: Optional[dict] = None
    augmented_pool: list = field(default_factory=list)


def _copy(params):
    return {k: np.array(v) for k, v in params.items()}


def _run_stage(state: TrainState, stage: int, epoch_samples, val: Sequence, model_cfg, cfg,
               A, history, on_epoch=None):
    """Train until early stop or max epochs; returns the best-validation parameters."""
    best = _copy(state.params)
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        samples, info = epoch_samples(epoch)
        order = np.random.default_rng([cfg.seed, stage, epoch]).permutation(len(samples))
        ordered = [samples[i] for i in order]
        losses = []
        for b in range(0, len(ordered), cfg.batch_size):
            batch = ordered[b:b + cfg.batch_size]
            value, grads = batch_gradients(batch, state.params, model_cfg, A, cfg.threads)
            adam_step(state, grads, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(value * len(batch))
        train_loss = sum(losses) / len(ordered)
        val_loss = mean_loss(val, state.params, model_cfg, A)
        lr_used = state.lr
        improved = lr_schedule(state, val_loss, cfg)
        if improved:
            best = _copy(state.params)
        row = {"epoch": epoch, "stage": stage, "train_loss": train_loss, "val_loss": val_loss,
               "lr": lr_used, "aug_fraction": info["aug_fraction"], "severity_cap": info["severity_cap"]}
        history.append(row)
        log.info("stage %d epoch %d train %.5f val %.5f lr %.2e", stage, epoch, train_loss, val_loss, lr_used)
        if on_epoch:
            on_epoch(row)
        if state.since_improvement >= cfg.early_stop_patience:
            break
    return best


def train_two_stage(train: Sequence, val: Sequence, specs: Sequence, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, topology, augmented: Optional[Sequence] = None,
                    val_augmented: Optional[Sequence] = None,
                    augment_cfg: Optional[AugmentConfig] = None, on_epoch=None) -> TrainResult:
    """Pre-train on originals, then fine-tune on the curriculum mix.

    Stage 2 is skipped when there are neither specs nor a pre-generated
    augmented pool, which gives the no-augmentation baseline.
    """
    originals = [s for s in train if s.provenance.kind == "original"]
    if not originals:
        raise ValidationError("training set has no original samples")
    val_orig = [s for s in val if s.provenance.kind == "original"]
    if not val_orig:
        raise ValidationError("validation set has no original samples")
    overlap = {s.subject_id for s in originals} & {s.subject_id for s in val_orig}
    if overlap:
        raise ValidationError(f"train and validation share subjects {sorted(overlap)}")
    A = np.array(topology.adjacency)
    cfg = train_cfg
    history = []

    params = init_params(model_cfg, cfg.seed)
    params.update(fit_input_normalization([s.sequence for s in originals], model_cfg))
    state = TrainState.fresh(params, cfg.lr_initial, stage=1)
    stage1 = _run_stage(state, 1, lambda e: (originals, {"aug_fraction": 0.0, "severity_cap": 0.0}),
                        val_orig, model_cfg, cfg, A, history, on_epoch)

    pool = list(augmented) if augmented is not None else [s for s in train if s.provenance.kind == "augmented"]
    if not pool and specs:
        pool = generate_augmented_dataset(originals, specs, cfg.pool_ratio, cfg.seed, topology, augment_cfg).samples
    if not pool:
        return TrainResult(stage1, history, stage1, [])
    val_pool = list(val_augmented) if val_augmented is not None else \
        [s for s in val if s.provenance.kind == "augmented"]
    if not val_pool and specs:
        val_pool = generate_augmented_dataset(val_orig, specs, cfg.val_pool_ratio, cfg.seed + 1, topology, augment_cfg).samples

    state = TrainState.fresh(stage1, cfg.lr_initial, stage=2)
    final = _run_stage(
        state, 2,
        lambda e: curriculum_mix(e, originals, pool, cfg, cfg.seed, cfg.curriculum),
        val_orig + val_pool, model_cfg, cfg, A, history, on_epoch,
    )
    return TrainResult(final, history, stage1, pool)


HISTORY_FIELDS = ("epoch", "stage", "train_loss", "val_loss", "lr", "aug_fraction", "severity_cap")


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], row["stage"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[2:]])
