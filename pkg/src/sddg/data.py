"""Synthetic iris-analog domains, the natural-image pool, and batch loading.

Class identity is carried only by the ring/dot texture; the domain style
(contrast, brightness, blur, noise, spectral tilt) is applied identically to
both classes and acts as the nuisance that differs between domains.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


@dataclass
class TextureParams:
    base_frequency: float = 3.0    # ring cycles per unit radius
    orientation: float = 0.0       # dot-grid orientation, radians
    ring_amplitude: float = 1.0
    dot_amplitude: float = 0.0     # print-artifact dot matrix strength
    dot_frequency: float = 6.0     # dot cycles per unit length


@dataclass
class DomainStyle:
    contrast_gain: float = 1.0
    brightness_shift: float = 0.0
    blur_radius: float = 0.0       # gaussian sigma in pixels at 64 px, scaled with size
    noise_sigma: float = 0.02
    frequency_tilt: float = 0.0    # amplitude *= (|f| / f_ref) ** tilt

    def validate(self) -> None:
        if not 0.0 < self.contrast_gain <= 3.0:
            raise ValueError(f"contrast_gain {self.contrast_gain} outside (0, 3]")
        if not -0.5 <= self.brightness_shift <= 0.5:
            raise ValueError(f"brightness_shift {self.brightness_shift} outside [-0.5, 0.5]")
        if not 0.0 <= self.blur_radius <= 5.0:
            raise ValueError(f"blur_radius {self.blur_radius} outside [0, 5]")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise ValueError(f"noise_sigma {self.noise_sigma} outside [0, 0.5]")
        if not -2.0 <= self.frequency_tilt <= 2.0:
            raise ValueError(f"frequency_tilt {self.frequency_tilt} outside [-2, 2]")


@dataclass
class DomainSpec:
    name: str = "A"
    class0_texture: TextureParams = field(default_factory=TextureParams)
    class1_texture: TextureParams = field(
        default_factory=lambda: TextureParams(base_frequency=5.0, orientation=0.5, dot_amplitude=0.6))
    domain_style: DomainStyle = field(default_factory=DomainStyle)
    size: int = 2000
    image_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.class0_texture == self.class1_texture:
            raise ValueError(f"domain {self.name!r}: class textures are identical, labels would carry no signal")
        if self.size < 2:
            raise ValueError(f"domain {self.name!r}: size must be >= 2")
        if self.image_size < 8:
            raise ValueError(f"domain {self.name!r}: image_size must be >= 8")
        self.domain_style.validate()


@dataclass
class LabeledDataset:
    images: np.ndarray      # M x 1 x H x W float32 in [0, 1]
    labels: np.ndarray      # M int64, 0 = bonafide, 1 = attack
    domain_name: str

    def __len__(self) -> int:
        return len(self.labels)


def default_domains(image_size: int = 64, size: int = 2000, seed: int = 0) -> list[DomainSpec]:
    """One clean training domain and three style-shifted unseen domains."""
    styles = {
        "A": DomainStyle(),
        "B": DomainStyle(contrast_gain=0.5, brightness_shift=0.15, noise_sigma=0.03),
        "C": DomainStyle(contrast_gain=1.3, blur_radius=0.8, frequency_tilt=-0.4, noise_sigma=0.02),
        "D": DomainStyle(contrast_gain=0.8, brightness_shift=-0.15, frequency_tilt=0.6, noise_sigma=0.04),
    }
    return [DomainSpec(name=n, domain_style=s, size=size, image_size=image_size, seed=seed + 1000 * i)
            for i, (n, s) in enumerate(styles.items())]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="xy")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-8)


def render_iris(tex: TextureParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one clean iris-analog image in [0, 1]."""
    x, y = _grid(size)
    cx, cy = rng.uniform(-0.06, 0.06, 2)
    xs, ys = x - cx, y - cy
    r = np.hypot(xs, ys)
    theta = np.arctan2(ys, xs)
    r_pupil = rng.uniform(0.18, 0.28)
    r_iris = rng.uniform(0.72, 0.9)

    freq = tex.base_frequency * rng.uniform(0.9, 1.1)
    rings = np.cos(2 * math.pi * freq * r + rng.uniform(0, 2 * math.pi))
    fibers = np.cos(rng.integers(10, 20) * theta + rng.uniform(0, 2 * math.pi)) * np.cos(
        2 * math.pi * 0.5 * freq * r)
    iris = (0.45 + 0.14 * tex.ring_amplitude * rings + 0.05 * fibers
            + 0.04 * _smooth_noise(rng, size, size / 16))
    if tex.dot_amplitude > 0:
        ang = tex.orientation + rng.uniform(-0.15, 0.15)
        u = xs * math.cos(ang) + ys * math.sin(ang)
        v = -xs * math.sin(ang) + ys * math.cos(ang)
        f = tex.dot_frequency * rng.uniform(0.93, 1.07)
        dots = 0.25 * (1 + np.cos(2 * math.pi * f * u)) * (1 + np.cos(2 * math.pi * f * v)) - 0.25
        iris = iris + 0.12 * tex.dot_amplitude * dots

    edge = 1.5 / size
    in_iris = 1 / (1 + np.exp((r - r_iris) / edge))
    in_pupil = 1 / (1 + np.exp((r - r_pupil) / edge))
    sclera = 0.72 + 0.03 * _smooth_noise(rng, size, size / 8)
    img = sclera * (1 - in_iris) + iris * (in_iris - in_pupil) + 0.08 * in_pupil
    gx, gy = rng.uniform(-0.05, 0.05, 2)
    img = img + gx * x + gy * y
    return np.clip(img, 0.0, 1.0)


def apply_style(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    out = img.astype(np.float64)
    if style.frequency_tilt:
        mean = out.mean()
        fy = np.fft.fftfreq(size)[:, None]
        fx = np.fft.fftfreq(size)[None, :]
        radius = np.hypot(fx, fy)
        gain = np.ones_like(radius)
        nz = radius > 0
        gain[nz] = (radius[nz] / 0.1) ** style.frequency_tilt
        out = np.fft.ifft2(np.fft.fft2(out - mean) * gain).real + mean
    if style.blur_radius:
        out = gaussian_filter(out, style.blur_radius * size / 64, mode="reflect")
    out = (out - 0.5) * style.contrast_gain + 0.5 + style.brightness_shift
    if style.noise_sigma:
        out = out + rng.normal(0.0, style.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so in-memory and on-disk datasets agree exactly."""
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


def generate_domain(spec: DomainSpec) -> LabeledDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = np.zeros(spec.size, dtype=np.int64)
    labels[spec.size // 2:] = 1
    rng.shuffle(labels)
    images = np.empty((spec.size, 1, spec.image_size, spec.image_size), dtype=np.float32)
    for i, lab in enumerate(labels):
        sample_rng = np.random.default_rng([spec.seed, i])
        tex = spec.class1_texture if lab else spec.class0_texture
        clean = render_iris(tex, spec.image_size, sample_rng)
        images[i, 0] = quantize(apply_style(clean, spec.domain_style, sample_rng))
    return LabeledDataset(images, labels, spec.name)


# natural-image pool

def _procedural_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    x, y = _grid(size)
    img = np.zeros((size, size))
    a = rng.uniform(0, 2 * math.pi)
    img += rng.uniform(0.2, 0.8) * (x * math.cos(a) + y * math.sin(a))
    for _ in range(rng.integers(2, 7)):
        cx, cy = rng.uniform(-1, 1, 2)
        s = rng.uniform(0.05, 0.5)
        img += rng.uniform(-1, 1) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    for _ in range(rng.integers(0, 3)):
        b = rng.uniform(0, 2 * math.pi)
        f = rng.uniform(1, size / 6)
        img += rng.uniform(0.1, 0.5) * np.cos(2 * math.pi * f * (x * math.cos(b) + y * math.sin(b)) / 2)
    # 1/f noise, the spectral signature of natural scenes
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fx, fy)
    radius[0, 0] = 1.0
    spec = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) / radius
    spec[0, 0] = 0
    noise = np.fft.ifft2(spec).real
    img += rng.uniform(0.5, 1.5) * noise / (noise.std() + 1e-8) * img.std()
    img -= img.min()
    img /= img.max() + 1e-8
    # natural scenes vary in exposure and contrast as well as content
    img = (img - img.mean()) * rng.uniform(0.3, 1.0) + rng.uniform(0.3, 0.7)
    return np.clip(img, 0.0, 1.0)


def _load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L").resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_natural_pool(source: Union[str, Path], n: int, image_size: int, seed: int = 0) -> np.ndarray:
    """``n`` grayscale images in [0, 1], shape n x H x W.

    ``source`` is either the string ``"procedural"`` or a directory of images
    (resized, not cropped, to ``image_size``).
    """
    if n < 1:
        raise ValueError("natural pool size must be >= 1")
    if str(source) == "procedural":
        rng = np.random.default_rng([seed, 4242])
        return np.stack([quantize(_procedural_scene(image_size, rng)) for _ in range(n)])
    root = Path(source)
    if not root.is_dir():
        raise FileNotFoundError(f"natural pool directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if len(files) < n:
        raise ValueError(f"natural pool directory {root} has {len(files)} images, {n} requested")
    try:
        return np.stack([_load_image(p, image_size) for p in files[:n]])
    except OSError as e:
        raise ValueError(f"unreadable image in {root}: {e}") from e


def spectral_slopes(images: np.ndarray) -> np.ndarray:
    """Per-image slope of log radially-averaged amplitude vs log frequency."""
    imgs = np.asarray(images, dtype=np.float64).reshape(-1, images.shape[-2], images.shape[-1])
    size = imgs.shape[-1]
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    rbin = np.round(np.hypot(fx, fy) * size).astype(int)
    bins = np.arange(1, size // 2)
    slopes = []
    for img in imgs:
        amp = np.abs(np.fft.fft2(img - img.mean()))
        prof = np.array([amp[rbin == b].mean() for b in bins])
        slopes.append(np.polyfit(np.log(bins), np.log(prof + 1e-12), 1)[0])
    return np.array(slopes)


def spectral_slope(images: np.ndarray) -> float:
    return float(spectral_slopes(images).mean())


# loading

class BatchLoader:
    """Batches from a dataset.

    Train mode: reshuffles every epoch and random-crops (reflect-pad by
    image_size/16, then crop ``crop`` pixels); iteration never ends. Batch
    ``step`` is a pure function of (seed, step), so resumed runs see the same
    data. Eval mode: one ordered pass, center crop if requested.
    """

    def __init__(self, ds: LabeledDataset, batch_size: int, crop: Optional[int] = None,
                 train: bool = True, seed: int = 0, stream: int = 0):
        if not 1 <= batch_size <= len(ds):
            raise ValueError(f"batch_size {batch_size} must be in [1, {len(ds)}]")
        size = ds.images.shape[-1]
        self.pad = max(1, size // 16)
        if crop is not None and crop > size + 2 * self.pad:
            raise ValueError(f"crop {crop} larger than padded image {size + 2 * self.pad}")
        self.ds, self.batch_size, self.crop, self.train = ds, batch_size, crop, train
        self.seed = (seed, stream)
        self.batches_per_epoch = len(ds) // batch_size

    def _crop(self, imgs: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        p, c = self.pad, self.crop
        padded = np.pad(imgs, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        return np.stack([padded[i, :, oy:oy + c, ox:ox + c] for i, (oy, ox) in enumerate(offsets)])

    def batch_at(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.train:
            raise RuntimeError("batch_at is only defined for train loaders")
        epoch, pos = divmod(step, self.batches_per_epoch)
        perm = np.random.default_rng([*self.seed, epoch]).permutation(len(self.ds))
        idx = perm[pos * self.batch_size:(pos + 1) * self.batch_size]
        imgs = self.ds.images[idx]
        if self.crop is not None:
            hi = imgs.shape[-1] + 2 * self.pad - self.crop
            offsets = np.random.default_rng([*self.seed, epoch, pos, 1]).integers(0, hi + 1, (len(idx), 2))
            imgs = self._crop(imgs, offsets)
        return imgs.astype(np.float32), self.ds.labels[idx]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if self.train:
            step = 0
            while True:
                yield self.batch_at(step)
                step += 1
        for start in range(0, len(self.ds), self.batch_size):
            imgs = self.ds.images[start:start + self.batch_size]
            if self.crop is not None:
                off = (imgs.shape[-1] + 2 * self.pad - self.crop) // 2
                imgs = self._crop(imgs, np.full((len(imgs), 2), off))
            yield imgs, self.ds.labels[start:start + self.batch_size]


def make_loader(ds: LabeledDataset, batch_size: int, crop: Optional[int] = None,
                train: bool = True, seed: int = 0) -> BatchLoader:
    return BatchLoader(ds, batch_size, crop, train, seed)


# persistence: <root>/<domain>/<index>.png plus <root>/index.json

INDEX_NAME = "index.json"


def save_datasets(datasets: list[LabeledDataset], root: Union[str, Path]) -> Path:
    root = Path(root)
    items = []
    for ds in datasets:
        (root / ds.domain_name).mkdir(parents=True, exist_ok=True)
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            rel = f"{ds.domain_name}/{i:05d}.png"
            Image.fromarray(np.round(img[0] * 255).astype(np.uint8), mode="L").save(root / rel)
            items.append({"path": rel, "label": int(lab), "domain": ds.domain_name})
    index = {"domains": [ds.domain_name for ds in datasets], "items": items}
    path = root / INDEX_NAME
    path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return path


def load_datasets(root: Union[str, Path]) -> dict[str, LabeledDataset]:
    """Read any dataset laid out as PNGs plus an index of (path, label, domain)."""
    root = Path(root)
    index = json.loads((root / INDEX_NAME).read_text())
    grouped: dict[str, tuple[list, list]] = {}
    for item in index["items"]:
        imgs, labs = grouped.setdefault(item["domain"], ([], []))
        with Image.open(root / item["path"]) as im:
            imgs.append(np.asarray(im.convert("L"), dtype=np.float32)[None] / 255.0)
        labs.append(int(item["label"]))
    return {name: LabeledDataset(np.stack(imgs), np.asarray(labs, dtype=np.int64), name)
            for name, (imgs, labs) in grouped.items()}

