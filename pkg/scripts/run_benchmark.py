"""Run the seeded directional benchmark over several seeds and print one JSON line per seed.

    python3 scripts/run_benchmark.py --seeds 7 2 3
"""

import argparse
import json

import numpy as np

from egpa.benchmark import BENCHMARK_SEED, run_directional_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[BENCHMARK_SEED])
    args = ap.parse_args()
    gaps = []
    for seed in args.seeds:
        res = run_directional_benchmark(seed)
        gaps.append(res.egpa_err_acc - res.baseline_err_acc)
        print(json.dumps({"seed": seed, "egpa_err_acc": res.egpa_err_acc, "baseline_err_acc": res.baseline_err_acc,
                          "divergence": res.divergence, "null_divergence": res.null_divergence,
                          "seconds": round(res.seconds, 1)}), flush=True)
    if len(gaps) > 1:
        print(json.dumps({"mean_gap": float(np.mean(gaps)), "min_gap": float(np.min(gaps))}))


if __name__ == "__main__":
    main()
