"""Joint and per-step coverage of conformal regions on exchangeable scenes.

Uses the constant-velocity point forecaster unless ``--model`` is given.

    python scripts/run_conformal.py --alpha 0.1 --correction bonferroni
"""
import argparse
import json

from eqtraj.conformal import CORRECTIONS
from eqtraj.experiments import DeskConfig, conformal_coverage, model_point_forecaster
from eqtraj.model import ModelParams


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n-cal", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--correction", choices=CORRECTIONS, default="bonferroni")
    p.add_argument("--model", help="model JSON used as the point forecaster")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the result as JSON")
    args = p.parse_args()
    cfg = DeskConfig()
    forecaster = None
    if args.model:
        params = ModelParams.load(args.model)
        forecaster = model_point_forecaster(params)
        cfg = DeskConfig(history=params.config.history, horizon=params.config.horizon, dt=params.config.dt)
    res = conformal_coverage(args.n_cal, args.n_test, args.alpha, args.correction, args.seed, forecaster, cfg)
    res["calibration"] = json.loads(res["calibration"].to_json())
    text = json.dumps(res, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)


if __name__ == "__main__":
    main()
