"""Sweep the IM weight and the number of dynamic kernels; writes sweep_<param>.csv/png.

    python3 scripts/run_sweeps.py --config configs/acceptance.json --out runs/sweeps
"""
import argparse
import logging

from sddg.config import load_config
from sddg.experiment import SWEEPS, prepare_data, sweep, write_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acceptance.json")
    ap.add_argument("--out", default="runs/sweeps")
    ap.add_argument("--params", nargs="+", default=sorted(SWEEPS), choices=sorted(SWEEPS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, args.set)
    data = prepare_data(cfg)
    for param in args.params:
        curve = sweep(cfg, param, seeds=args.seeds, data=data)
        paths = write_curve(param, curve, args.out)
        print(param, " ".join(f"{v:g}:{100 * h:.2f}" for v, h in curve), "->", ", ".join(map(str, paths)))


if __name__ == "__main__":
    main()
