"""Run the five-row ablation grid over three seeds and write txt/csv/json tables.

    python3 scripts/run_ablation.py --config configs/acceptance.json --out runs/ablation
"""
import argparse
import logging

from sddg.config import load_config
from sddg.experiment import ablation_grid, render_table, write_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acceptance.json")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = ablation_grid(load_config(args.config, args.set), seeds=args.seeds)
    write_ablation(rows, args.out)
    print(render_table(rows))
    for r in rows:
        seps = [s.weight_separation for s in r.results if s.weight_separation is not None]
        if seps:
            print(f"{r.name}: weight separation " + " ".join(f"{s:.3f}" for s in seps))


if __name__ == "__main__":
    main()
