"""Rotation residuals of rolled-out forecasts for random parameters.

    python scripts/run_equivariance.py --n-theta 16
"""
import argparse
import json

from eqtraj.experiments import equivariance_residuals


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--param-sets", type=int, default=20)
    p.add_argument("--n-theta", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the residuals as JSON")
    args = p.parse_args()
    res = equivariance_residuals(args.scenes, args.param_sets, args.n_theta, args.seed)
    text = json.dumps(res, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)


if __name__ == "__main__":
    main()
