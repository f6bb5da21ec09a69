"""Train the benchmark model with each component switched off in turn and write ablation.csv.

    python3 scripts/ablation.py --out runs/ablation --seed 7
"""

import argparse
from pathlib import Path

from egpa.augment import AugmentConfig
from egpa.benchmark import BENCHMARK_SEED, benchmark_model_config, benchmark_train_config, make_benchmark
from egpa.metrics import ABLATION_TOGGLES, ablation_run, write_ablation
from egpa.skeleton import kinect_v2_topology


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=BENCHMARK_SEED)
    ap.add_argument("--toggles", nargs="*", choices=ABLATION_TOGGLES, default=list(ABLATION_TOGGLES))
    args = ap.parse_args()
    model_cfg = benchmark_model_config()
    data = make_benchmark(args.seed)
    rows = ablation_run(data.train, data.val, data.test, data.specs, model_cfg, benchmark_train_config(args.seed),
                        kinect_v2_topology(), tuple(args.toggles), AugmentConfig(score_range=model_cfg.score_range))
    args.out.mkdir(parents=True, exist_ok=True)
    write_ablation(rows, args.out / "ablation.csv")
    for name, rep in rows:
        print(f"{name:<28} err_acc={rep.overall['err_acc']:.3f} macro_f1={rep.overall['macro_f1']:.3f}")


if __name__ == "__main__":
    main()
