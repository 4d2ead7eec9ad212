"""Train equivariant and ablation models in a canonical heading band and
evaluate on grid-rotated test scenes; also compares NLL and MRS training.

    OMP_NUM_THREADS=1 python scripts/run_generalization.py --out results/generalization.json
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from eqtraj.experiments import DeskConfig, generalization


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results/generalization.json")
    p.add_argument("--models", help="directory for the trained model JSON files")
    p.add_argument("--no-mrs", action="store_true", help="skip the MRS-trained model")
    scalar = {"int": int, "float": float, "str": str}
    for f in dataclasses.fields(DeskConfig):
        if f.type in scalar:
            p.add_argument("--" + f.name.replace("_", "-"), type=scalar[f.type], default=f.default)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = DeskConfig(**{f.name: getattr(args, f.name) for f in dataclasses.fields(DeskConfig)
                        if hasattr(args, f.name)})
    t0 = time.perf_counter()
    res = generalization(cfg, with_mrs=not args.no_mrs)
    models = res.pop("models")
    res["seconds"] = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res, indent=1))
    if args.models:
        Path(args.models).mkdir(parents=True, exist_ok=True)
        for (variant, loss), params in models.items():
            params.save(Path(args.models) / f"{variant}_{loss}.json")
    for key in ("equivariant_nll", "ablation_nll", "equivariant_mrs"):
        if key in res:
            r = res[key]
            print(f"{key:16s} ade {r['ade']:.3f} rotated {r['ade_rotated']:.3f} "
                  f"degradation {r['degradation']:+.3f} turn {r['ade_turn']:.3f} "
                  f"coverage {[round(c, 3) for c in r['coverage']]}")
    print(f"{'constant velocity':16s} ade {res['cv']['ade']:.3f} turn {res['cv']['ade_turn']:.3f}")
    print(f"wrote {out} ({res['seconds']:.0f}s)")


if __name__ == "__main__":
    main()
