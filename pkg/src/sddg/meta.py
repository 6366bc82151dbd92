"""Episodic meta-learning: selective inner step on the dynamic block, meta-test
on amplitude-perturbed data, and the joint outer update.

The core functions take a ``loss_fn(params, batch) -> (ce_loss, weights)``
so they work on any model that exposes a :class:`ParamPartition`, including
scalar toy problems.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
from torch import Tensor

from .data import BatchLoader, LabeledDataset
from .fourier import PerturbConfig, perturb_batch
from .losses import cross_entropy, im_loss
from .model import GROUPS, ParamPartition, SDDGNet

log = logging.getLogger(__name__)

LossFn = Callable[[ParamPartition, object], tuple[Tensor, Optional[Tensor]]]
RegFn = Callable[[Tensor], tuple[Tensor, Tensor, Tensor]]


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite or explodes."""


@dataclass
class MetaConfig:
    alpha: float = 1e-3
    beta: float = 1e-3
    mu: float = 1.0
    eta: float = 1.0
    second_order: bool = True
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    # ablation switches: meta=False trains single-level on S (+ S+ if perturb)
    meta: bool = True
    perturb: bool = True
    optimizer: str = "sgd"          # sgd (plain, no momentum) | momentum | adam
    momentum: float = 0.9
    divergence_limit: float = 1e4

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LossReport:
    cls_s: float
    ent: float
    div: float
    im: float
    cls_s_plus: float
    total: float


@dataclass
class MetaStepTrace:
    step: int
    losses: LossReport
    grad_norms: dict[str, float]
    lambdas: list[float] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"step": self.step, **asdict(self.losses),
                "grad_norms": self.grad_norms, "lambdas": self.lambdas}


def _check_loss(name: str, value: Tensor, limit: float = math.inf) -> None:
    v = float(value.detach())
    if not math.isfinite(v) or v > limit:
        raise DivergenceError(f"{name} diverged: {v}")


def inner_update(loss_fn: LossFn, params: ParamPartition, batch, alpha: float,
                 second_order: bool = True) -> tuple[dict[str, Tensor], Tensor, Optional[Tensor]]:
    """One gradient step on the classification loss w.r.t. the dynamic block only.

    Returns (theta_D', ce_loss, weights). With ``second_order`` the new
    parameters stay differentiable functions of all three partitions;
    otherwise the inner gradient is treated as a constant.
    """
    loss, w = loss_fn(params, batch)
    _check_loss("meta-train loss", loss)
    names = list(params.theta_D)
    if alpha == 0 or not names:
        return dict(params.theta_D), loss, w
    grads = torch.autograd.grad(loss, [params.theta_D[n] for n in names], create_graph=second_order,
                                retain_graph=True, allow_unused=True)
    prime = {}
    for n, g in zip(names, grads):
        p = params.theta_D[n]
        if g is None:
            prime[n] = p
            continue
        if not second_order:
            g = g.detach()
        prime[n] = p - alpha * g
    return prime, loss, w


def meta_test_loss(loss_fn: LossFn, batch_plus, params: ParamPartition,
                   theta_D_prime: dict[str, Tensor]) -> Tensor:
    """Classification loss on the perturbed batch using theta_D' (no IM term)."""
    loss, _ = loss_fn(params.replace(theta_D=theta_D_prime), batch_plus)
    _check_loss("meta-test loss", loss)
    return loss


def meta_objective(loss_fn: LossFn, params: ParamPartition, batch_s, batch_plus, cfg: MetaConfig,
                   reg_fn: RegFn = im_loss) -> tuple[Tensor, LossReport]:
    """L_cls(S) + mu * L_IM(S) + L_cls(S+; theta_D').

    The regulariser only sees the meta-train batch's weights. With
    ``cfg.meta`` off, theta_D' is theta_D (plain joint training).
    """
    alpha = cfg.alpha if cfg.meta else 0.0
    prime, cls_s, w = inner_update(loss_fn, params, batch_s, alpha, cfg.second_order)
    zero = cls_s.new_zeros(())
    ent, div, im = reg_fn(w) if w is not None else (zero, zero, zero)
    cls_plus = meta_test_loss(loss_fn, batch_plus, params, prime)
    total = cls_s + cls_plus
    if cfg.mu and w is not None:
        total = total + cfg.mu * im
    report = LossReport(*(float(t.detach()) for t in (cls_s, ent, div, im, cls_plus, total)))
    for name in ("cls_s", "cls_s_plus", "total"):
        v = getattr(report, name)
        if not math.isfinite(v) or abs(v) > cfg.divergence_limit:
            raise DivergenceError(f"{name} diverged: {v}")
    return total, report


def meta_gradients(total: Tensor, params: ParamPartition) -> dict[str, dict[str, Tensor]]:
    """Gradients of the joint objective, grouped by partition; unused tensors get zeros."""
    flat = [(g, n, t) for g, n, t in params.items()]
    grads = torch.autograd.grad(total, [t for _, _, t in flat], allow_unused=True)
    out: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
    for (g, n, t), d in zip(flat, grads):
        out[g][n] = torch.zeros_like(t) if d is None else d
    return out


def meta_optimize(params: ParamPartition, grads: dict[str, dict[str, Tensor]], beta: float,
                  optimizer: Optional[torch.optim.Optimizer] = None) -> ParamPartition:
    """Outer update of all three partitions.

    Without an optimizer this is plain gradient descent returning fresh
    tensors; with one, gradients are written to ``.grad`` and the optimizer
    steps the live parameters in place.
    """
    for g in GROUPS:
        for n, d in grads[g].items():
            if not torch.isfinite(d).all():
                raise DivergenceError(f"non-finite gradient in partition theta_{g} ({n})")
    if optimizer is None:
        new = {g: {n: (t - beta * grads[g][n]).detach() for n, t in params.group(g).items()} for g in GROUPS}
        return ParamPartition(new["F"], new["D"], new["C"])
    for g, n, t in params.items():
        t.grad = grads[g][n].detach()
    optimizer.step()
    return params


def grad_norms(grads: dict[str, dict[str, Tensor]]) -> dict[str, float]:
    return {g: float(torch.sqrt(sum((d.double() ** 2).sum() for d in grads[g].values())))
            if grads[g] else 0.0 for g in GROUPS}


def net_loss_fn(net: SDDGNet) -> LossFn:
    def fn(params: ParamPartition, batch) -> tuple[Tensor, Optional[Tensor]]:
        x, y = batch
        logits, w = net.forward_with(params, x)
        return cross_entropy(logits, y), w
    return fn


def make_optimizer(net: SDDGNet, cfg: MetaConfig) -> torch.optim.Optimizer:
    params = [t for _, _, t in net.partition().items()]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.beta)
    return torch.optim.SGD(params, lr=cfg.beta, momentum=cfg.momentum if cfg.optimizer == "momentum" else 0.0)


class MetaTrainer:
    """Runs the episodic loop on one source domain.

    Every source of randomness is a function of (seed, step): the two batch
    streams, crops, and the perturbation draws. Resuming therefore only needs
    parameters, buffers, optimizer state and the step counter.
    """

    def __init__(self, net: SDDGNet, source: LabeledDataset, natural_pool: np.ndarray,
                 cfg: MetaConfig, perturb_cfg: Optional[PerturbConfig] = None, crop: Optional[int] = None):
        cfg.validate()
        self.net, self.cfg = net, cfg
        self.pool = natural_pool
        self.perturb_cfg = replace(perturb_cfg or PerturbConfig(), eta=cfg.eta)
        self.perturb_cfg.validate()
        self.train_loader = BatchLoader(source, cfg.batch_size, crop, True, seed=cfg.seed, stream=0)
        self.test_loader = BatchLoader(source, cfg.batch_size, crop, True, seed=cfg.seed, stream=1)
        self.optimizer = make_optimizer(net, cfg)
        self.loss_fn = net_loss_fn(net)
        self.step = 0

    def _tensors(self, imgs: np.ndarray, labels: np.ndarray) -> tuple[Tensor, Tensor]:
        dtype = next(self.net.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(imgs)).to(dtype), torch.from_numpy(labels).long()

    def batches(self, step: int) -> tuple[tuple[Tensor, Tensor], tuple[Tensor, Tensor], list[float]]:
        xs, ys = self.train_loader.batch_at(step)
        xp, yp = self.test_loader.batch_at(step)
        lambdas: list[float] = []
        if self.cfg.perturb:
            res = perturb_batch(xp, yp, self.pool, self.perturb_cfg, step)
            xp, lambdas = res.images, res.lambdas
        return self._tensors(xs, ys), self._tensors(xp, yp), lambdas

    def train_step(self) -> MetaStepTrace:
        self.net.train()
        batch_s, batch_plus, lambdas = self.batches(self.step)
        params = self.net.partition()
        total, report = meta_objective(self.loss_fn, params, batch_s, batch_plus, self.cfg)
        grads = meta_gradients(total, params)
        with torch.no_grad():
            meta_optimize(params, grads, self.cfg.beta, self.optimizer)
        trace = MetaStepTrace(self.step, report, grad_norms(grads), lambdas)
        self.step += 1
        return trace

    def run(self, steps: int, trace_path: Union[str, Path, None] = None,
            on_step: Optional[Callable[[MetaStepTrace], None]] = None) -> list[MetaStepTrace]:
        """Train until ``self.step == steps``; appends one JSON line per step to ``trace_path``."""
        traces = []
        fh = open(trace_path, "a") if trace_path else None
        try:
            while self.step < steps:
                t = self.train_step()
                traces.append(t)
                if fh:
                    fh.write(json.dumps(t.to_record()) + "\n")
                    fh.flush()
                if on_step:
                    on_step(t)
                if t.step % 100 == 0:
                    log.info("step %d cls_s=%.4f im=%.4f cls_s+=%.4f", t.step, t.losses.cls_s,
                             t.losses.im, t.losses.cls_s_plus)
        finally:
            if fh:
                fh.close()
        return traces


def train_loop(net: SDDGNet, source: LabeledDataset, natural_pool: np.ndarray, cfg: MetaConfig,
               perturb_cfg: Optional[PerturbConfig] = None, crop: Optional[int] = None,
               trace_path: Union[str, Path, None] = None) -> tuple[SDDGNet, list[MetaStepTrace]]:
    trainer = MetaTrainer(net, source, natural_pool, cfg, perturb_cfg, crop)
    traces = trainer.run(cfg.steps, trace_path)
    return net, traces
