"""Feature extractor F, dynamic block D, classifier C and the F/D/C parameter split."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torch.func import functional_call

from .dynamic import DynamicBlock

ARCHS = ("resnet18", "tiny_cnn")
STRIDE = {"resnet18": 32, "tiny_cnn": 8}
GROUPS = ("F", "D", "C")
PREFIX = {"F": "features.", "D": "dynamic.", "C": "classifier."}


@dataclass
class BackboneConfig:
    arch: str = "tiny_cnn"
    in_channels: int = 1
    feature_channels: int = 64
    pretrained_path: Optional[str] = None
    image_size: int = 64
    # how a 3-channel pretrained stem is fitted to grayscale input
    gray_adapt: str = "average"

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.feature_channels <= 0 or self.in_channels <= 0:
            raise ValueError("feature_channels and in_channels must be positive")
        if self.arch == "resnet18" and self.feature_channels != 512:
            raise ValueError("resnet18 produces 512 feature channels")
        if self.arch == "tiny_cnn" and self.feature_channels < 2:
            raise ValueError("tiny_cnn needs feature_channels >= 2")
        stride = STRIDE[self.arch]
        if self.image_size < 8 or self.image_size % stride:
            raise ValueError(f"image_size {self.image_size} must be >= 8 and divisible by {stride} for {self.arch}")
        if self.gray_adapt not in ("average", "reinit"):
            raise ValueError(f"gray_adapt must be 'average' or 'reinit', got {self.gray_adapt!r}")


class TinyCNN(nn.Module):
    """Three (conv3x3 -> BN -> ReLU -> 2x avg-pool) stages, widths C/2, C, C."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        widths = (max(1, channels // 2), channels, channels)
        layers, prev = [], in_channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.AvgPool2d(2)]
            prev = w
        self.body = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


class ResNet18Features(nn.Module):
    """torchvision ResNet-18 from the stem through layer4 (512 channels, stride 32)."""

    def __init__(self, in_channels: int):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward(self, x: Tensor) -> Tensor:
        return self.layer4(self.layer3(self.layer2(self.layer1(self.stem(x)))))


class Classifier(nn.Module):
    """Global average pool followed by one affine layer; logits only."""

    def __init__(self, channels: int, num_classes: int = 2):
        super().__init__()
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return classify(x, self.fc.weight, self.fc.bias)


def classify(feature: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if feature.dim() != 4 or feature.shape[1] != weight.shape[1]:
        raise ValueError(f"feature of shape {tuple(feature.shape)} does not match classifier width {weight.shape[1]}")
    return F.linear(feature.mean(dim=(2, 3)), weight, bias)


@dataclass
class ParamPartition:
    """Trainable parameters split into extractor (F), dynamic block (D) and classifier (C).

    Keys are full parameter names of the owning :class:`SDDGNet`.
    """

    theta_F: dict[str, Tensor]
    theta_D: dict[str, Tensor]
    theta_C: dict[str, Tensor]

    def group(self, name: str) -> dict[str, Tensor]:
        return {"F": self.theta_F, "D": self.theta_D, "C": self.theta_C}[name]

    def merged(self) -> dict[str, Tensor]:
        return {**self.theta_F, **self.theta_D, **self.theta_C}

    def replace(self, **groups: dict[str, Tensor]) -> "ParamPartition":
        return ParamPartition(groups.get("theta_F", self.theta_F),
                              groups.get("theta_D", self.theta_D),
                              groups.get("theta_C", self.theta_C))

    def items(self) -> Iterator[tuple[str, str, Tensor]]:
        for g in GROUPS:
            for name, t in self.group(g).items():
                yield g, name, t

    def numel(self) -> int:
        return sum(t.numel() for _, _, t in self.items())


class SDDGNet(nn.Module):
    """C(D(F(x))). With ``use_dynamic=False`` the block is skipped (plain backbone)."""

    def __init__(self, config: BackboneConfig, k: int = 3, use_dynamic: bool = True,
                 reduction: int = 4, in_affine: bool = False, num_classes: int = 2):
        super().__init__()
        self.config = config
        if config.arch == "tiny_cnn":
            self.features = TinyCNN(config.in_channels, config.feature_channels)
        else:
            self.features = ResNet18Features(config.in_channels)
        c = config.feature_channels
        self.dynamic = DynamicBlock(c, k, reduction, in_affine) if use_dynamic else None
        self.classifier = Classifier(c, num_classes)

    @property
    def k(self) -> Optional[int]:
        return self.dynamic.k if self.dynamic is not None else None

    def forward(self, x: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        feat = self.features(x)
        w = None
        if self.dynamic is not None:
            feat, w = self.dynamic(feat)
        return self.classifier(feat), w

    def partition(self) -> ParamPartition:
        groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            g = next(g for g in GROUPS if name.startswith(PREFIX[g]))
            groups[g][name] = p
        return ParamPartition(groups["F"], groups["D"], groups["C"])

    def forward_with(self, params: ParamPartition, x: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        """Forward pass with substitute parameter tensors (buffers stay the module's own)."""
        return functional_call(self, params.merged(), (x,))


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def extract_features(net: SDDGNet, batch: Tensor, theta_F: Optional[dict[str, Tensor]] = None) -> Tensor:
    size = net.config.image_size
    if batch.dim() != 4 or batch.shape[1] != net.config.in_channels or tuple(batch.shape[2:]) != (size, size):
        raise ValueError(f"batch of shape {tuple(batch.shape)} does not match "
                         f"{net.config.in_channels} x {size} x {size}")
    if theta_F is None:
        return net.features(batch)
    return functional_call(net.features, _sub(theta_F, PREFIX["F"]), (batch,))


def build_model(config: BackboneConfig, k: int = 3, seed: int = 0, *, use_dynamic: bool = True,
                reduction: int = 4, in_affine: bool = False) -> SDDGNet:
    """Build an initialised network, deterministic in ``seed``.

    If ``config.pretrained_path`` is set, extractor weights are loaded from a
    checkpoint directory (see :mod:`sddg.checkpoint`).
    """
    config.validate()
    if use_dynamic and k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SDDGNet(config, k, use_dynamic, reduction, in_affine)
    if config.pretrained_path:
        from .checkpoint import load_pretrained_features
        load_pretrained_features(net, config.pretrained_path, config.gray_adapt)
    return net
