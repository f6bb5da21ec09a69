"""Command-line entry point: ``egpa <subcommand> ...``.

Exit status is 0 on success, 1 when inputs fail validation and 2 on any other
failure. Errors go to stderr as one JSON object on a single line.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .augment import AugmentConfig, ErrorSpec, default_specs, generate_augmented_dataset, load_specs, save_specs
from .benchmark import benchmark_model_config, benchmark_synth_config, benchmark_train_config
from .errors import ValidationError
from .ingestion import DatasetManifest, load_dataset, read_catalog, subject_split, write_catalog
from .metrics import (ABLATION_TOGGLES, ablation_run, attention_stats, evaluate, predict, write_ablation,
                      write_mask_csv, write_report)
from .model import ModelConfig, load_params, save_params
from .skeleton import kinect_v2_topology, read_topology
from .synth import SynthConfig, synthesize
from .training import TrainConfig, train_two_stage, write_history

log = logging.getLogger("egpa")

SEED_ENV = "EGPA_SEED"


class CommandError(Exception):
    """Raised by the argument parser; mapped to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(f"{self.prog}: {message}")


def _emit_error(kind: str, command: str, message: str) -> None:
    line = json.dumps({"error": kind, "command": command, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be a non-negative integer, got {raw!r}") from None
    if seed < 0:
        raise ValidationError(f"{SEED_ENV} must be a non-negative integer, got {raw!r}")
    return seed


def _seed_arg(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {value}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


# -- run manifest -----------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: dict,
                       outputs: list, started: str) -> Path:
    record = {
        "subcommand": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(str(o) for o in outputs),
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    path = out_dir / "run.json"
    _write_atomic(path, json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


# -- shared helpers ---------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _topology(path, joint_count=None):
    topo = read_topology(path) if path else kinect_v2_topology()
    if joint_count is not None and topo.joint_count != joint_count:
        raise ValidationError(f"data has {joint_count} joints but topology has {topo.joint_count}; "
                              "pass --topology")
    return topo


def _joint_count(samples):
    counts = {s.sequence.n_joints for s in samples}
    if len(counts) != 1:
        raise ValidationError(f"catalog mixes joint counts {sorted(counts)}")
    return counts.pop()


def _from_mapping(cls, data: dict, what: str):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {what!r} must be a mapping")
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValidationError(f"unknown {what} config keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"bad {what} config: {exc}") from None


CONFIG_SECTIONS = ("model", "train", "augment", "split", "specs")


def load_run_config(path) -> dict:
    """Read a YAML run config with optional ``model``, ``train``, ``augment``, ``split`` and ``specs`` keys."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValidationError(f"{path}: unknown config sections {sorted(unknown)}")
    if isinstance(data.get("specs"), str) and not Path(data["specs"]).is_absolute():
        data["specs"] = str(path.parent / data["specs"])
    return data


def resolve_configs(raw: dict, samples, topology, seed: int, threads: int):
    """Merge a run config over the desk defaults, filling data-dependent sizes."""
    model_raw = dict(raw.get("model") or {})
    model = benchmark_model_config().to_dict()
    model.update(n_exercises=1 + max(s.labels.exercise_class for s in samples),
                 n_joints=topology.joint_count, scale_bones=[list(e) for e in topology.edges])
    model.update(model_raw)
    model_cfg = ModelConfig.from_dict(model)

    train = benchmark_train_config(seed).to_dict()
    train.update(raw.get("train") or {})
    train.update(seed=seed, threads=threads)
    train_cfg = _from_mapping(TrainConfig, train, "train")

    aug = {"score_range": tuple(model_cfg.score_range)}
    aug.update(raw.get("augment") or {})
    aug_cfg = _from_mapping(AugmentConfig, aug, "augment")

    split = {"test_fraction": 0.25, "val_fraction": 1 / 6}
    split.update(raw.get("split") or {})
    unknown = set(split) - {"test_fraction", "val_fraction"}
    if unknown:
        raise ValidationError(f"unknown split config keys {sorted(unknown)}")

    specs_raw = raw.get("specs", "default")
    if specs_raw in (None, "none", []):
        specs = []
    elif specs_raw == "default":
        specs = default_specs(topology) if topology.joint_count == 25 else []
    elif isinstance(specs_raw, str):
        specs = load_specs(specs_raw)
    else:
        specs = [ErrorSpec.from_dict(d) for d in specs_raw]
    return model_cfg, train_cfg, aug_cfg, split, specs


def split_catalog(samples, split: dict, seed: int):
    """Subject-disjoint train / validation / test partition of a catalog.

    Augmented rows follow the subject of their source clip.
    """
    originals = [s for s in samples if s.provenance.kind == "original"]
    if not originals:
        raise ValidationError("catalog has no original samples")
    rest, test = subject_split(originals, split["test_fraction"], seed)
    train, val = subject_split(rest, split["val_fraction"], seed + 1)
    subjects = {
        "train": sorted({s.subject_id for s in train}),
        "val": sorted({s.subject_id for s in val}),
        "test": sorted({s.subject_id for s in test}),
    }
    return subjects


def _partition(samples, subjects):
    parts = {k: [] for k in subjects}
    owner = {subj: k for k, subs in subjects.items() for subj in subs}
    for s in samples:
        key = owner.get(s.subject_id)
        if key is not None:
            parts[key].append(s)
    return parts


def _checkpoint_paths(path):
    """Return (params file, directory holding config.yaml / split.json)."""
    p = Path(path)
    if p.is_dir():
        return p / "params.ckpt", p
    return p, p.parent


def _load_model(checkpoint):
    ckpt, folder = _checkpoint_paths(checkpoint)
    if not ckpt.exists():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    cfg_path = folder / "config.yaml"
    if not cfg_path.exists():
        raise ValidationError(f"{cfg_path} missing; it is written by 'egpa train'")
    cfg = yaml.safe_load(cfg_path.read_text())
    model_cfg = ModelConfig.from_dict(cfg["model"])
    split_path = folder / "split.json"
    subjects = json.loads(split_path.read_text()) if split_path.exists() else None
    return load_params(ckpt), model_cfg, subjects


def _select(samples, subjects, which: str):
    if which == "all" or subjects is None:
        return list(samples)
    return _partition(samples, subjects)[which]


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> dict:
    out = _out_dir(args.out)
    topo = _topology(args.topology)
    if args.benchmark:
        cfg = benchmark_synth_config(args.seed)
    else:
        cfg = SynthConfig(n_subjects=args.subjects, n_clips=args.clips, n_frames=args.frames,
                          n_exercises=args.exercises, frame_rate=args.frame_rate, noise=args.noise,
                          error_fraction=args.error_fraction, seed=args.seed)
    samples = synthesize(cfg, topo)
    cat = write_catalog(samples, out)
    config = dataclasses.asdict(cfg)
    return {"config": config, "inputs": {"topology": args.topology}, "outputs": [cat, out / "sequences"]}


def cmd_ingest(args) -> dict:
    if not Path(args.manifest).is_file():
        raise ValidationError(f"manifest not found: {args.manifest}")
    out = _out_dir(args.out)
    manifest = DatasetManifest.load(args.manifest)
    result = load_dataset(manifest)
    if not result.samples:
        raise ValidationError(f"no samples loaded from {manifest.root} ({len(result.skips)} skipped)")
    cat = write_catalog(result.samples, out, skips=result.skips)
    config = dataclasses.asdict(manifest)
    return {"config": config, "inputs": {"manifest": args.manifest}, "outputs": [cat, out / "sequences"]}


def cmd_augment(args) -> dict:
    if not args.ratio > 0:
        raise ValidationError(f"--ratio must be positive, got {args.ratio}")
    samples = read_catalog(args.input)
    topo = _topology(args.topology, _joint_count(samples))
    specs = load_specs(args.specs) if args.specs else default_specs(topo)
    lo, hi = args.score_range
    aug_cfg = AugmentConfig(tol_fraction=args.tol, max_retries=args.max_retries, score_range=(lo, hi))
    originals = [s for s in samples if s.provenance.kind == "original"]
    result = generate_augmented_dataset(originals, specs, args.ratio, args.seed, topo, aug_cfg)
    out = _out_dir(args.out)
    cat = write_catalog(originals + result.samples, out, skips=result.skips)
    save_specs(specs, out / "specs.yaml")
    config = {"ratio": args.ratio, "augment": dataclasses.asdict(aug_cfg), "specs": [s.to_dict() for s in specs],
              "generated": len(result.samples), "skipped": len(result.skips)}
    log.info("augmented %d samples, skipped %d", len(result.samples), len(result.skips))
    return {"config": config, "inputs": {"catalog": args.input, "specs": args.specs, "topology": args.topology},
            "outputs": [cat, out / "specs.yaml", out / "sequences"]}


def cmd_train(args) -> dict:
    samples = read_catalog(args.catalog)
    topo = _topology(args.topology, _joint_count(samples))
    raw = load_run_config(args.config)
    model_cfg, train_cfg, aug_cfg, split, specs = resolve_configs(raw, samples, topo, args.seed, args.threads)
    subjects = split_catalog(samples, split, args.seed)
    parts = _partition(samples, subjects)

    def kind(items, k):
        return [s for s in items if s.provenance.kind == k]

    train_aug, val_aug = kind(parts["train"], "augmented"), kind(parts["val"], "augmented")
    if args.no_augment:
        specs, train_aug, val_aug = [], [], []
    out = _out_dir(args.out)
    result = train_two_stage(
        kind(parts["train"], "original"), kind(parts["val"], "original"), specs, model_cfg, train_cfg, topo,
        augmented=train_aug or None, val_augmented=val_aug or None, augment_cfg=aug_cfg,
    )
    save_params(result.params, out / "params.ckpt")
    save_params(result.stage1_params, out / "stage1.ckpt")
    write_history(result.history, out / "history.csv")
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                "augment": dataclasses.asdict(aug_cfg), "split": split,
                "specs": [s.to_dict() for s in specs]}
    resolved["augment"]["score_range"] = list(aug_cfg.score_range)
    resolved["augment"]["quality_penalty"] = list(aug_cfg.quality_penalty)
    _write_atomic(out / "config.yaml", yaml.safe_dump(resolved, sort_keys=True))
    _write_atomic(out / "split.json", json.dumps(subjects, indent=2, sort_keys=True) + "\n")
    outputs = [out / n for n in ("params.ckpt", "stage1.ckpt", "history.csv", "config.yaml", "split.json")]
    return {"config": resolved, "inputs": {"catalog": args.catalog, "config": args.config,
                                           "topology": args.topology}, "outputs": outputs}


def cmd_evaluate(args) -> dict:
    params, model_cfg, subjects = _load_model(args.checkpoint)
    samples = _select(read_catalog(args.catalog), subjects, args.subset)
    if not samples:
        raise ValidationError(f"no samples in the {args.subset!r} subset of {args.catalog}")
    topo = _topology(args.topology, _joint_count(samples))
    report = evaluate(params, samples, model_cfg, topo)
    out = _out_dir(args.out)
    write_report(report, out / "report.csv", out / "report.json")
    return {"config": {"subset": args.subset, "model": model_cfg.to_dict()},
            "inputs": {"catalog": args.catalog, "checkpoint": args.checkpoint, "topology": args.topology},
            "outputs": [out / "report.csv", out / "report.json"]}


def cmd_attention_export(args) -> dict:
    params, model_cfg, subjects = _load_model(args.checkpoint)
    if not model_cfg.use_attention:
        raise ValidationError("checkpoint was trained without spatial attention")
    samples = _select(read_catalog(args.catalog), subjects, args.subset)
    if args.samples:
        wanted = set(args.samples)
        missing = wanted - {s.sample_id for s in samples}
        if missing:
            raise ValidationError(f"sample ids not in catalog subset: {sorted(missing)}")
        samples = [s for s in samples if s.sample_id in wanted]
    if not samples:
        raise ValidationError("nothing to export")
    topo = _topology(args.topology, _joint_count(samples))
    preds = predict(params, samples, model_cfg, np.array(topo.adjacency), keep_attention=True)
    out = _out_dir(args.out)
    mask_dir = out / "attention"
    mask_dir.mkdir(exist_ok=True)
    outputs = [mask_dir]
    for p in preds:
        mask = np.asarray(p.record.mask)
        T, N, _ = mask.shape
        t, i, j = np.meshgrid(np.arange(T), np.arange(N), np.arange(N), indexing="ij")
        rows = np.column_stack([t.ravel(), i.ravel(), j.ravel()])
        lines = ["frame,i,j,weight"]
        lines += [f"{a},{b},{c},{w:.10f}" for (a, b, c), w in zip(rows.tolist(), mask.ravel().tolist())]
        (mask_dir / f"{p.sample_id}.csv").write_text("\n".join(lines) + "\n")
    correct = [p.record for p in preds if not p.labels.has_error]
    wrong = [p.record for p in preds if p.labels.has_error]
    summary = {"correct": len(correct), "erroneous": len(wrong)}
    if correct and wrong:
        stats = attention_stats(correct, wrong)
        write_mask_csv(stats.mean_correct, out / "mean_mask_correct.csv")
        write_mask_csv(stats.mean_error, out / "mean_mask_error.csv")
        summary["divergence"] = stats.divergence
        outputs += [out / "mean_mask_correct.csv", out / "mean_mask_error.csv"]
    _write_atomic(out / "attention_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs.append(out / "attention_summary.json")
    return {"config": {"subset": args.subset, "samples": args.samples},
            "inputs": {"catalog": args.catalog, "checkpoint": args.checkpoint}, "outputs": outputs}


def cmd_ablate(args) -> dict:
    samples = read_catalog(args.catalog)
    topo = _topology(args.topology, _joint_count(samples))
    raw = load_run_config(args.config)
    model_cfg, train_cfg, aug_cfg, split, specs = resolve_configs(raw, samples, topo, args.seed, args.threads)
    parts = _partition(samples, split_catalog(samples, split, args.seed))
    train = [s for s in parts["train"] if s.provenance.kind == "original"]
    val = [s for s in parts["val"] if s.provenance.kind == "original"]
    toggles = tuple(args.toggles or ABLATION_TOGGLES)
    rows = ablation_run(train, val, parts["test"], specs, model_cfg, train_cfg, topo, toggles, aug_cfg)
    out = _out_dir(args.out)
    write_ablation(rows, out / "ablation.csv")
    return {"config": {"toggles": list(toggles), "model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
            "inputs": {"catalog": args.catalog, "config": args.config}, "outputs": [out / "ablation.csv"]}


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egpa", description="Error-guided pose augmentation and attention GCN assessment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="<command>")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory (nothing is written elsewhere)")
        p.add_argument("--seed", type=_seed_arg, default=None,
                       help=f"master seed (default: ${SEED_ENV} or 0)")
        p.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = add("synth", cmd_synth, "generate a labelled synthetic exercise dataset")
    p.add_argument("--subjects", type=_positive_int, default=8)
    p.add_argument("--clips", type=_positive_int, default=40)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--exercises", type=_positive_int, default=4)
    p.add_argument("--frame-rate", type=float, default=30.0)
    p.add_argument("--noise", type=float, default=0.003)
    p.add_argument("--error-fraction", type=float, default=0.25)
    p.add_argument("--topology", help="topology file (default: 25-joint Kinect v2)")
    p.add_argument("--benchmark", action="store_true",
                   help="use the calibrated benchmark generator settings (ignores size flags)")

    p = add("ingest", cmd_ingest, "convert a dataset described by a manifest into a catalog")
    p.add_argument("--manifest", required=True)

    p = add("augment", cmd_augment, "inject synthetic movement errors into correct clips")
    p.add_argument("--in", dest="input", required=True, metavar="CATALOG")
    p.add_argument("--specs", help="YAML error-spec file (default: built-in 25-joint specs)")
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=0.05, help="bone-length tolerance fraction")
    p.add_argument("--max-retries", type=int, default=5)
    p.add_argument("--score-range", type=float, nargs=2, default=(0.0, 10.0), metavar=("LOW", "HIGH"))
    p.add_argument("--topology")

    p = add("train", cmd_train, "two-stage training from a catalog")
    p.add_argument("--catalog", required=True)
    p.add_argument("--config", help="YAML run config (model/train/augment/split/specs sections)")
    p.add_argument("--topology")
    p.add_argument("--no-augment", action="store_true", help="train the no-augmentation baseline")

    for name, func, text in (("evaluate", cmd_evaluate, "score a checkpoint on a catalog"),
                             ("attention-export", cmd_attention_export, "export attention masks")):
        p = add(name, func, text)
        p.add_argument("--catalog", required=True)
        p.add_argument("--checkpoint", required=True, help="training output directory or .ckpt file")
        p.add_argument("--subset", choices=("test", "val", "train", "all"), default="test")
        p.add_argument("--topology")
        if name == "attention-export":
            p.add_argument("--samples", nargs="*", help="restrict to these sample ids")

    p = add("ablate", cmd_ablate, "train and score variants with components disabled")
    p.add_argument("--catalog", required=True)
    p.add_argument("--config")
    p.add_argument("--topology")
    p.add_argument("--toggles", nargs="*", choices=ABLATION_TOGGLES)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = argv[0] if argv and not argv[0].startswith("-") else "egpa"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.seed is None:
            args.seed = _default_seed()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        started = _now()
        t0 = time.perf_counter()
        info = args.func(args)
        write_run_manifest(Path(args.out), command, info["config"], args.seed, info["inputs"],
                           info["outputs"], started)
        log.info("%s finished in %.1fs", command, time.perf_counter() - t0)
        return 0
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (CommandError, ValidationError) as exc:
        _emit_error("validation", command, str(exc))
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit 2
        _emit_error("runtime", command, f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
