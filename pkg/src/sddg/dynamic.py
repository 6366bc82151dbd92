"""Two-branch dynamic block: an instance-normalized invariant branch plus a
K-way mixture of convolutions gated per sample by a small adaptor."""
from __future__ import annotations

from typing import Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

IN_EPS = 1e-5


def instance_normalize(x: Tensor, eps: float = IN_EPS,
                       weight: Optional[Tensor] = None,
                       bias: Optional[Tensor] = None) -> Tensor:
    """Normalize every (sample, channel) plane to zero mean and unit variance.

    Uses the biased variance, like ``nn.InstanceNorm2d``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    out = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight.view(1, -1, 1, 1)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def _check_channels(x: Tensor, kernel: Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected N x C x H x W feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != kernel.shape[-3]:
        raise ValueError(f"feature has {x.shape[1]} channels, kernel expects {kernel.shape[-3]}")


def invariant_branch(x: Tensor, p: Mapping[str, Tensor], eps: float = IN_EPS) -> Tensor:
    """ReLU(IN(conv3x3(x))), stride 1, padding 1."""
    _check_channels(x, p["inv_conv.weight"])
    h = F.conv2d(x, p["inv_conv.weight"], p.get("inv_conv.bias"), padding=1)
    h = instance_normalize(h, eps, p.get("inv_norm.weight"), p.get("inv_norm.bias"))
    return F.relu(h)


def adaptor_weights(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Per-sample mixture weights: softmax(fc2(relu(fc1(avgpool(x)))))."""
    _check_channels(x, p["adaptor.fc1.weight"].unsqueeze(-1).unsqueeze(-1))
    pooled = x.mean(dim=(2, 3))
    h = F.relu(F.linear(pooled, p["adaptor.fc1.weight"], p["adaptor.fc1.bias"]))
    return torch.softmax(F.linear(h, p["adaptor.fc2.weight"], p["adaptor.fc2.bias"]), dim=1)


def specific_branch(x: Tensor, w: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Sum over k of w[:, k] * conv_k(x).

    The K kernels are stacked into one convolution with K*C output channels;
    each output block is exactly one of the K separate convolutions.
    """
    kernels = p["spec_weight"]
    k, c_out = kernels.shape[0], kernels.shape[1]
    _check_channels(x, kernels)
    if w.shape != (x.shape[0], k):
        raise ValueError(f"weights of shape {tuple(w.shape)} do not match batch {x.shape[0]} and K={k}")
    out = F.conv2d(x, kernels.reshape(k * c_out, *kernels.shape[2:]), padding=1)
    out = out.view(x.shape[0], k, c_out, *out.shape[2:])
    return torch.einsum("nk,nkchw->nchw", w, out)


def dynamic_forward(x: Tensor, p: Mapping[str, Tensor], eps: float = IN_EPS) -> tuple[Tensor, Tensor]:
    """Fused block output (invariant + specific) and the adaptor weights."""
    w = adaptor_weights(x, p)
    return invariant_branch(x, p, eps) + specific_branch(x, w, p), w


class _Adaptor(nn.Module):
    def __init__(self, channels: int, k: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, k)


class DynamicBlock(nn.Module):
    """Module wrapper owning the block parameters.

    Parameter names (relative to the block) are ``inv_conv.weight``,
    ``inv_conv.bias``, optionally ``inv_norm.weight``/``inv_norm.bias``,
    ``spec_weight`` (K x C x C x 3 x 3, no bias) and the adaptor's
    ``adaptor.fc{1,2}.{weight,bias}``.
    """

    def __init__(self, channels: int, k: int = 3, reduction: int = 4,
                 in_affine: bool = False, eps: float = IN_EPS):
        super().__init__()
        if k < 2:
            raise ValueError(f"dynamic block needs k >= 2, got {k}")
        if channels <= 0 or reduction <= 0:
            raise ValueError("channels and reduction must be positive")
        self.k, self.channels, self.reduction, self.eps = k, channels, reduction, eps
        self.inv_conv = nn.Conv2d(channels, channels, 3, padding=1, bias=True)
        self.inv_norm = nn.InstanceNorm2d(channels, eps=eps, affine=True) if in_affine else None
        # initialise each specific kernel the way a standalone Conv2d would be
        convs = [nn.Conv2d(channels, channels, 3, padding=1, bias=False) for _ in range(k)]
        self.spec_weight = nn.Parameter(torch.stack([c.weight.data for c in convs]))
        self.adaptor = _Adaptor(channels, k, reduction)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return dynamic_forward(x, dict(self.named_parameters()), self.eps)
