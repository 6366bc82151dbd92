"""Classification and information-maximization losses (batch means)."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-4


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy on an empty batch")
    return F.cross_entropy(logits, labels.long(), reduction="mean")


def _check_simplex(w: Tensor) -> None:
    if w.dim() != 2 or w.shape[0] == 0:
        raise ValueError(f"expected a non-empty N x K weight matrix, got {tuple(w.shape)}")
    with torch.no_grad():
        if (w < -SIMPLEX_TOL).any() or ((w.sum(1) - 1).abs() > SIMPLEX_TOL).any():
            raise ValueError("dynamic weight rows are not on the probability simplex")


def _xlogx(p: Tensor) -> Tensor:
    return p * torch.log(p.clamp_min(PROB_FLOOR))


def entropy_loss(w: Tensor) -> Tensor:
    """Mean per-row entropy; zero for one-hot rows, log K for uniform rows."""
    _check_simplex(w)
    return -_xlogx(w).sum(1).mean()


def diversity_loss(w: Tensor) -> Tensor:
    """Negative entropy of the batch-mean weight vector, in [-log K, 0]."""
    _check_simplex(w)
    return _xlogx(w.mean(0)).sum()


def im_loss(w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    ent, div = entropy_loss(w), diversity_loss(w)
    return ent, div, ent + div


def kl_to_uniform(p: Tensor) -> Tensor:
    k = p.shape[-1]
    return (_xlogx(p) - p * math.log(1.0 / k)).sum()
