"""Amplitude-spectrum mixup against natural images, keeping the source phase."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SpectrumPair:
    amplitude: np.ndarray
    phase: np.ndarray


@dataclass
class PerturbConfig:
    eta: float = 1.0
    lambda_mode: str = "per_image"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.lambda_mode not in ("per_image", "per_batch"):
            raise ValueError(f"lambda_mode must be per_image or per_batch, got {self.lambda_mode!r}")


def decompose(image: np.ndarray) -> SpectrumPair:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise ValueError(f"expected an H x W image with H, W >= 2, got {image.shape}")
    spec = np.fft.fft2(image)
    return SpectrumPair(np.abs(spec), np.angle(spec))


def mix_amplitude(a_src: np.ndarray, a_nat: np.ndarray, lam: float) -> np.ndarray:
    if a_src.shape != a_nat.shape:
        raise ValueError(f"amplitude shapes differ: {a_src.shape} vs {a_nat.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return a_src.copy()
    if lam == 1.0:
        return a_nat.copy()
    return (1.0 - lam) * a_src + lam * a_nat


def inverse_spectrum(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Complex inverse transform, before taking the real part."""
    if amplitude.shape != phase.shape:
        raise ValueError(f"amplitude {amplitude.shape} and phase {phase.shape} differ")
    return np.fft.ifft2(amplitude * np.exp(1j * phase))


def recompose(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return np.clip(inverse_spectrum(amplitude, phase).real, 0.0, 1.0)


def perturb_image(src: np.ndarray, natural: np.ndarray, lam: float) -> np.ndarray:
    s = decompose(src)
    return recompose(mix_amplitude(s.amplitude, decompose(natural).amplitude, lam), s.phase)


@dataclass
class PerturbResult:
    images: np.ndarray
    labels: np.ndarray
    lambdas: list[float] = field(default_factory=list)
    partners: list[int] = field(default_factory=list)


def perturb_batch(images: np.ndarray, labels: np.ndarray, natural_pool: np.ndarray,
                  cfg: PerturbConfig, step: int = 0) -> PerturbResult:
    """Perturb an N x 1 x H x W batch into the extended domain.

    Randomness for image ``i`` at ``step`` comes from a generator seeded with
    ``(cfg.seed, step, i)``, so results do not depend on batch scheduling.
    Labels are returned untouched.
    """
    cfg.validate()
    if len(natural_pool) == 0:
        raise ValueError("natural image pool is empty")
    pool = np.asarray(natural_pool)
    if pool.shape[-2:] != images.shape[-2:]:
        raise ValueError(f"natural images {pool.shape[-2:]} must match source size {images.shape[-2:]}")
    n = images.shape[0]
    out = np.empty_like(images)
    lambdas, partners = [], []
    batch_lam = np.random.default_rng([cfg.seed, step]).uniform(0.0, cfg.eta)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, step, i])
        j = int(rng.integers(len(pool)))
        lam = float(rng.uniform(0.0, cfg.eta)) if cfg.lambda_mode == "per_image" else float(batch_lam)
        nat = pool[j].reshape(images.shape[-2:])
        for c in range(images.shape[1]):
            out[i, c] = perturb_image(images[i, c], nat, lam)
        lambdas.append(lam)
        partners.append(j)
    return PerturbResult(out, labels, lambdas, partners)
