"""Per-step coverage of NLL- and MRS-trained models on constant-velocity
scenes whose only randomness is the positional random walk.

    OMP_NUM_THREADS=1 python scripts/run_coverage_trend.py --out results/coverage_trend.json
"""
import argparse
import json
import logging
from pathlib import Path

from eqtraj.experiments import DeskConfig, coverage_trend


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results/coverage_trend.json")
    p.add_argument("--iterations", type=int, default=DeskConfig.iterations)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = coverage_trend(DeskConfig(seed=args.seed, iterations=args.iterations), n_test=args.n_test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res, indent=1))
    for loss in ("nll", "mrs"):
        print(f"{loss}: coverage at steps {res['report_steps']} = {[round(c, 3) for c in res[loss]['coverage']]}")


if __name__ == "__main__":
    main()
