"""Orchestration: data preparation, checkpointed training runs, ablation grid and sweeps."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, save_config
from .data import INDEX_NAME, DomainSpec, LabeledDataset, generate_domain, load_datasets, load_natural_pool
from .evaluation import EvalReport, class_weight_separation, cross_domain_eval, predict
from .meta import MetaTrainer
from .model import SDDGNet, build_model

log = logging.getLogger(__name__)

HOLDOUT_SUFFIX = "-holdout"


@dataclass
class RunData:
    source: LabeledDataset
    tests: list[LabeledDataset]
    sanity: list[LabeledDataset]
    pool: np.ndarray


def domain_specs(cfg: RunConfig) -> list[DomainSpec]:
    """Configured domains plus a held-out copy of the training domain (new seed)."""
    specs = list(cfg.data.domains)
    if cfg.data.holdout_size > 0:
        train = next(s for s in specs if s.name == cfg.data.train_domain)
        specs.append(replace(train, name=train.name + HOLDOUT_SUFFIX, seed=train.seed + 7919,
                             size=cfg.data.holdout_size))
    return specs


def prepare_data(cfg: RunConfig) -> RunData:
    """Load datasets from ``cfg.data.root`` if it holds an index, else generate them in memory."""
    train = cfg.data.train_domain
    root = Path(cfg.data.root) if cfg.data.root else None
    if root is not None and (root / INDEX_NAME).exists():
        datasets = load_datasets(root)
    else:
        if root is not None:
            log.warning("no dataset index under %s; generating domains in memory", root)
        datasets = {s.name: generate_domain(s) for s in domain_specs(cfg)}
    if train not in datasets:
        raise ConfigError(f"training domain {train!r} not found among {sorted(datasets)}")
    holdout = train + HOLDOUT_SUFFIX
    tests = [d for n, d in sorted(datasets.items()) if n not in (train, holdout)]
    sanity = [datasets[holdout]] if holdout in datasets else []
    pool = load_natural_pool(cfg.data.natural_pool, cfg.data.natural_pool_size,
                             cfg.model.backbone.image_size, seed=cfg.perturb.seed)
    return RunData(datasets[train], tests, sanity, pool)


def build_net(cfg: RunConfig) -> SDDGNet:
    m = cfg.model
    return build_model(m.backbone, m.k, seed=cfg.meta.seed, use_dynamic=m.use_dynamic,
                       reduction=m.reduction, in_affine=m.in_affine)


def make_trainer(cfg: RunConfig, data: RunData, net: Optional[SDDGNet] = None) -> MetaTrainer:
    return MetaTrainer(net or build_net(cfg), data.source, data.pool, cfg.meta, cfg.perturb, cfg.data.crop)


def save_trainer(trainer: MetaTrainer, cfg: RunConfig, path: Union[str, Path]) -> Path:
    return save_checkpoint(path, trainer.net, trainer.step, trainer.optimizer, cfg.hash(), cfg.arch_hash(),
                           extra={"seed": cfg.meta.seed})


def resume_trainer(trainer: MetaTrainer, cfg: RunConfig, path: Union[str, Path]) -> None:
    manifest = load_checkpoint(path, trainer.net, trainer.optimizer)
    if manifest.get("arch_hash") != cfg.arch_hash():
        raise ConfigError(f"checkpoint {path} was written for a different architecture")
    trainer.step = int(manifest["step"])


def train_run(cfg: RunConfig, data: Optional[RunData] = None, resume: Union[str, Path, None] = None,
              steps: Optional[int] = None, write: bool = True) -> MetaTrainer:
    """Train to ``steps`` (default ``cfg.meta.steps``).

    With ``write``, the run directory receives config.json, an appended
    trace.jsonl, periodic checkpoints under checkpoints/ and final/.
    """
    data = data or prepare_data(cfg)
    trainer = make_trainer(cfg, data)
    if resume is not None:
        resume_trainer(trainer, cfg, resume)
    target = cfg.meta.steps if steps is None else steps
    if not write:
        trainer.run(target)
        return trainer
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    trace = run_dir / "trace.jsonl"
    if resume is None and trace.exists():
        trace.unlink()
    every = cfg.checkpoint_every or target
    while trainer.step < target:
        trainer.run(min(target, (trainer.step // every + 1) * every), trace)
        if trainer.step < target:
            save_trainer(trainer, cfg, run_dir / "checkpoints" / f"step_{trainer.step:06d}")
    save_trainer(trainer, cfg, run_dir / "final")
    return trainer


def evaluate_run(cfg: RunConfig, net: SDDGNet, data: RunData) -> EvalReport:
    return cross_domain_eval(net, data.tests, cfg.eval.threshold, data.sanity)


# ablation grid

ABLATION_ROWS: dict[str, dict[str, bool]] = {
    "erm": {"dynamic": False, "im": False, "meta": False},
    "dynamic": {"dynamic": True, "im": False, "meta": False},
    "dynamic+im": {"dynamic": True, "im": True, "meta": False},
    "dynamic+meta": {"dynamic": True, "im": False, "meta": True},
    "sddg": {"dynamic": True, "im": True, "meta": True},
}


def apply_toggles(cfg: RunConfig, dynamic: bool = True, im: bool = True, meta: bool = True,
                  augment: bool = False) -> RunConfig:
    """Switch components off. Without meta-learning, training is single-level on S;
    ``augment`` then keeps the second batch perturbed as plain augmentation."""
    out = copy.deepcopy(cfg)
    out.model.use_dynamic = dynamic
    if not im or not dynamic:
        out.meta.mu = 0.0
    out.meta.meta = meta
    out.meta.perturb = meta or augment
    return out.validate()


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.meta.seed = seed
    out.perturb.seed = seed
    return out


@dataclass
class SeedResult:
    seed: int
    report: EvalReport
    weight_separation: Optional[float] = None


@dataclass
class AblationRow:
    name: str
    toggles: dict[str, bool]
    results: list[SeedResult] = field(default_factory=list)

    @property
    def mean_hter(self) -> float:
        return float(np.mean([r.report.average_hter for r in self.results]))

    def domain_means(self) -> dict[str, float]:
        names = [r.domain for r in self.results[0].report.records]
        return {n: float(np.mean([next(x.hter for x in r.report.records if x.domain == n) for r in self.results]))
                for n in names}


def run_seed(cfg: RunConfig, data: RunData) -> SeedResult:
    trainer = train_run(cfg, data, write=False)
    report = evaluate_run(cfg, trainer.net, data)
    sep = None
    if trainer.net.dynamic is not None:
        ref = data.sanity[0] if data.sanity else data.source
        _, w = predict(trainer.net, ref)
        sep = class_weight_separation(w, ref.labels)
    return SeedResult(cfg.meta.seed, report, sep)


def ablation_grid(cfg: RunConfig, rows: Optional[Sequence[str]] = None, seeds: Sequence[int] = (0, 1, 2),
                  data: Optional[RunData] = None) -> list[AblationRow]:
    data = data or prepare_data(cfg)
    out = []
    for name in rows or ABLATION_ROWS:
        toggles = ABLATION_ROWS[name]
        row = AblationRow(name, toggles)
        for seed in seeds:
            res = run_seed(apply_toggles(with_seed(cfg, seed), **toggles), data)
            log.info("%s seed %d: average HTER %.4f", name, seed, res.report.average_hter)
            row.results.append(res)
        out.append(row)
    return out


def render_table(rows: Sequence[AblationRow]) -> str:
    domains = list(rows[0].domain_means())
    head = f"{'row':<14}{'D':>3}{'IM':>4}{'meta':>6}" + "".join(f"{d:>9}" for d in domains) + f"{'average':>10}"
    lines = [head, "-" * len(head)]
    mark = lambda b: "x" if b else "-"
    for r in rows:
        t = r.toggles
        cells = "".join(f"{100 * v:>9.2f}" for v in r.domain_means().values())
        lines.append(f"{r.name:<14}{mark(t['dynamic']):>3}{mark(t['im']):>4}{mark(t['meta']):>6}"
                     f"{cells}{100 * r.mean_hter:>10.2f}")
    return "\n".join(lines)


def table_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    domains = list(rows[0].domain_means())
    w = csv.writer(buf)
    w.writerow(["row", "dynamic", "im", "meta", *domains, "average"])
    for r in rows:
        w.writerow([r.name, *(int(r.toggles[k]) for k in ("dynamic", "im", "meta")),
                    *(f"{v:.6f}" for v in r.domain_means().values()), f"{r.mean_hter:.6f}"])
    return buf.getvalue()


def write_ablation(rows: Sequence[AblationRow], out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(render_table(rows) + "\n")
    (out / "ablation.csv").write_text(table_csv(rows))
    (out / "ablation.json").write_text(json.dumps(
        [{"name": r.name, "toggles": r.toggles, "mean_hter": r.mean_hter,
          "seeds": [{"seed": s.seed, "weight_separation": s.weight_separation, "report": s.report.to_dict()}
                    for s in r.results]} for r in rows], indent=2))


# hyperparameter sweeps

SWEEPS = {"mu": (0.0, 0.5, 1.0, 1.5, 2.0), "k": (2, 3, 4, 5)}


def sweep(cfg: RunConfig, param: str, values: Optional[Sequence[float]] = None, seeds: Sequence[int] = (0,),
          data: Optional[RunData] = None) -> list[tuple[float, float]]:
    """Full-method average HTER as one hyperparameter varies; returns (value, mean HTER) pairs."""
    if param not in SWEEPS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {sorted(SWEEPS)}")
    data = data or prepare_data(cfg)
    curve = []
    for v in values if values is not None else SWEEPS[param]:
        run_cfg = copy.deepcopy(cfg)
        if param == "mu":
            run_cfg.meta.mu = float(v)
        else:
            run_cfg.model.k = int(v)
        run_cfg.validate()
        hters = [run_seed(with_seed(run_cfg, s), data).report.average_hter for s in seeds]
        curve.append((v, float(np.mean(hters))))
        log.info("sweep %s=%s: average HTER %.4f", param, v, curve[-1][1])
    return curve


def write_curve(param: str, curve: Sequence[tuple[float, float]], out_dir: Union[str, Path]) -> list[Path]:
    """CSV and PNG plot of a sweep."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"sweep_{param}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "average_hter"])
        w.writerows([(v, f"{h:.6f}") for v, h in curve])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([v for v, _ in curve], [100 * h for _, h in curve], marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("average HTER (%)")
    fig.tight_layout()
    png = out / f"sweep_{param}.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return [csv_path, png]
