"""Command-line entry point: ``sddg <command> --config run.json [--set key=value ...]``.

Exit codes: 0 success, 1 user error, 2 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, read_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import generate_domain, save_datasets
from .evaluation import dump_dynamic_weights
from .experiment import (SWEEPS, ablation_grid, apply_toggles, build_net, domain_specs, evaluate_run,
                         prepare_data, sweep, train_run, write_ablation, write_curve)
from .fourier import perturb_batch
from .meta import DivergenceError

log = logging.getLogger("sddg")

EXIT_USER, EXIT_DIVERGED = 1, 2


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _ensure_empty(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data.root or "data")
    _ensure_empty(out, args.force)
    datasets = [generate_domain(s) for s in domain_specs(cfg)]
    index = save_datasets(datasets, out)
    print(f"wrote {sum(len(d) for d in datasets)} images in {len(datasets)} domains, index {index}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    toggles = {"dynamic": "no-dynamic" not in args.ablate, "im": "no-im" not in args.ablate,
               "meta": "no-meta" not in args.ablate}
    if not all(toggles.values()):
        cfg = apply_toggles(cfg, **toggles)
    trainer = train_run(cfg, resume=args.resume, steps=args.steps)
    print(f"trained to step {trainer.step}; run directory {cfg.run_dir}")
    return 0


def _load_net(cfg: RunConfig, checkpoint: str, allow_mismatch: bool):
    if not Path(checkpoint, "manifest.json").exists():
        raise UsageError(f"checkpoint {checkpoint} not found")
    manifest, _ = read_checkpoint(checkpoint)
    if manifest.get("arch_hash") != cfg.arch_hash() and not allow_mismatch:
        raise UsageError("checkpoint architecture hash does not match the config (use --allow-mismatch)")
    net = build_net(cfg)
    try:
        load_checkpoint(checkpoint, net)
    except ValueError as e:
        raise UsageError(str(e)) from e
    return net


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = _load_net(cfg, args.checkpoint, args.allow_mismatch)
    data = prepare_data(cfg)
    report = evaluate_run(cfg, net, data)
    out = Path(args.out or Path(args.checkpoint) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    for r in report.records + report.sanity:
        print(f"{r.domain:>12}  far={r.far:.4f}  frr={r.frr:.4f}  hter={r.hter:.4f}  n={r.n}")
    print(f"{'average':>12}  hter={report.average_hter:.4f}")
    if args.dump_weights:
        if net.dynamic is None:
            raise UsageError("model has no dynamic block; nothing to dump")
        n = dump_dynamic_weights(net, [data.source, *data.sanity, *data.tests], out / "dynamic_weights.csv")
        print(f"wrote {n} weight rows")
    return 0


def cmd_dump_weights(args) -> int:
    cfg = _config(args)
    net = _load_net(cfg, args.checkpoint, args.allow_mismatch)
    data = prepare_data(cfg)
    n = dump_dynamic_weights(net, [data.source, *data.sanity, *data.tests], args.out)
    print(f"wrote {n} weight rows to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out or cfg.run_dir / "ablation")
    data = prepare_data(cfg)
    if args.sweep:
        for param in args.sweep:
            curve = sweep(cfg, param, seeds=seeds, data=data)
            write_curve(param, curve, out)
            print(f"{param}: " + ", ".join(f"{v}: {100 * h:.2f}" for v, h in curve))
        return 0
    rows = ablation_grid(cfg, args.rows, seeds, data)
    write_ablation(rows, out)
    print((out / "ablation.txt").read_text())
    return 0


def _png(img: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def cmd_perturb_preview(args) -> int:
    cfg = _config(args)
    data = prepare_data(cfg)
    n = min(args.n, len(data.source))
    imgs, labels = data.source.images[:n], data.source.labels[:n]
    res = perturb_batch(imgs, labels, data.pool, cfg.perturb, step=0)
    out = Path(args.out or cfg.run_dir / "preview")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        _png(imgs[i, 0], out / f"{i:03d}_source.png")
        _png(data.pool[res.partners[i]], out / f"{i:03d}_natural.png")
        _png(res.images[i, 0], out / f"{i:03d}_perturbed.png")
    (out / "lambdas.json").write_text(json.dumps(res.lambdas))
    print(f"wrote {n} preview triplets to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sddg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run config JSON (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. meta.mu=0.5")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic domains to disk")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")

    sp = add("train", cmd_train, "run meta-learning training")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--steps", type=int, help="train up to this step (default meta.steps)")
    sp.add_argument("--ablate", nargs="*", default=[], choices=["no-meta", "no-im", "no-dynamic"])

    for name, fn, help_ in (("eval", cmd_eval, "cross-domain HTER evaluation"),
                            ("dump-weights", cmd_dump_weights, "write dynamic weights as CSV")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--allow-mismatch", action="store_true")
        if name == "eval":
            sp.add_argument("--out")
            sp.add_argument("--dump-weights", action="store_true")
        else:
            sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "ablation grid or hyperparameter sweeps")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--rows", nargs="*", choices=["erm", "dynamic", "dynamic+im", "dynamic+meta", "sddg"])
    sp.add_argument("--sweep", nargs="*", choices=sorted(SWEEPS))
    sp.add_argument("--out")

    sp = add("perturb-preview", cmd_perturb_preview, "write (source, natural, perturbed) PNG triplets")
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, FileNotFoundError, FileExistsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
