"""Image augmentation kernels and pseudo-volume synthesis.

Images are float64 arrays of shape ``(C, H, W)`` with values in ``[0, 1]``.
A volume is the depth-stack ``(D, C, H, W)`` of augmentations of one image,
each applied to the original image (never chained). All randomness comes
from streams derived by :func:`derive_stream`, so a volume is a pure
function of (image, roster, seed context).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

MASK64 = (1 << 64) - 1

# Roster order used for the 9/6/3 volume-depth ablations (first n kinds).
DEFAULT_KINDS = (
    "elastic",
    "invert",
    "sharpness",
    "salt_pepper",
    "brightness",
    "color_jitter",
    "gaussian_noise",
    "gaussian_blur",
    "occlusion",
)

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "elastic": {"alpha": 8.0, "sigma": 4.0},
    "invert": {},
    "sharpness": {"factor": 2.0},
    "salt_pepper": {"amount": 0.01},
    "brightness": {"delta": 0.1},
    "color_jitter": {"strength": 0.2},
    "gaussian_noise": {"sigma": 0.05},
    "gaussian_blur": {"sigma": 1.0},
    "occlusion": {"area_fraction": 0.04},
    "contrast": {"p": 0.5},
}


# -- seeding ------------------------------------------------------------------

def splitmix64(x: int) -> int:
    """One splitmix64 output step applied to ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


# per-field salts so that (epoch=a, sample=b) and (epoch=b, sample=a) differ
_SALT_EPOCH = 0x243F6A8885A308D3
_SALT_SAMPLE = 0x13198A2E03707344
_SALT_AUG = 0xA4093822299F31D0


@dataclass(frozen=True)
class SeedContext:
    global_seed: int
    epoch: int = 0
    sample_index: int = 0
    aug_index: int = 0

    def stream_seed(self) -> int:
        mixed = (self.global_seed & MASK64) \
            ^ splitmix64((self.epoch ^ _SALT_EPOCH) & MASK64) \
            ^ splitmix64((self.sample_index ^ _SALT_SAMPLE) & MASK64) \
            ^ splitmix64((self.aug_index ^ _SALT_AUG) & MASK64)
        return splitmix64(mixed)


def derive_stream(ctx: SeedContext) -> np.random.Generator:
    """Independent generator for one (seed, epoch, sample, augmentation) cell."""
    return np.random.Generator(np.random.PCG64(ctx.stream_seed()))


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed."""
    acc = 0
    for p in parts:
        acc = splitmix64(acc ^ (int(p) & MASK64))
    return acc


# -- helpers ------------------------------------------------------------------

def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i, i + n)
        out += w * padded[tuple(sl)]
    return out


def _smooth(a: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian filter over the last two axes, edge-replicated."""
    k = gaussian_kernel1d(sigma)
    return _filter_axis(_filter_axis(a, k, a.ndim - 2), k, a.ndim - 1)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (C,H,W) at fractional ``(ys, xs)`` with border replication."""
    _, h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = (1.0 - fx) * img[:, y0, x0] + fx * img[:, y0, x1]
    bot = (1.0 - fx) * img[:, y1, x0] + fx * img[:, y1, x1]
    return (1.0 - fy) * top + fy * bot


# -- kernels --------------------------------------------------------------------

def elastic_displacement(shape: tuple[int, int], alpha: float, sigma: float,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed random displacement field ``(dy, dx)``, each of ``shape``."""
    field_ = rng.uniform(-1.0, 1.0, size=(2,) + tuple(shape))
    smoothed = _smooth(field_, sigma)
    return alpha * smoothed[0], alpha * smoothed[1]


def elastic_deform(img: np.ndarray, alpha: float, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic_deform needs alpha >= 0 and sigma > 0")
    _, h, w = img.shape
    dy, dx = elastic_displacement((h, w), alpha, sigma, rng)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    return _clamp(bilinear_sample(img, gy + dy, gx + dx))


def invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - img


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter on interior pixels; the one-pixel border is copied."""
    out = img.copy()
    h, w = img.shape[-2:]
    if h < 3 or w < 3:
        return out
    acc = np.zeros(img.shape[:-2] + (h - 2, w - 2))
    for dy in range(3):
        for dx in range(3):
            acc += img[..., dy:dy + h - 2, dx:dx + w - 2]
    out[..., 1:-1, 1:-1] = acc / 9.0
    return out


def sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    """Blend between a 3x3 box blur (factor 0) and beyond the original (>1)."""
    if factor < 0:
        raise ValueError("sharpness factor must be >= 0")
    blurred = box_blur3(img)
    # written so factor == 1 reproduces img exactly
    return _clamp(img + (1.0 - factor) * (blurred - img))


def salt_pepper(img: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= amount <= 1.0:
        raise ValueError("salt_pepper amount must lie in [0, 1]")
    c, h, w = img.shape
    k = int(round(amount * h * w))
    out = img.copy()
    if k == 0:
        return out
    pos = rng.choice(h * w, size=k, replace=False)
    vals = rng.integers(0, 2, size=k).astype(np.float64)
    flat = out.reshape(c, h * w)
    flat[:, pos] = vals
    return out


def brightness(img: np.ndarray, delta: float) -> np.ndarray:
    if not -1.0 <= delta <= 1.0:
        raise ValueError("brightness delta must lie in [-1, 1]")
    return _clamp(img + delta)


def contrast(img: np.ndarray, p: float) -> np.ndarray:
    """Blend toward mid-gray; ``p = 1`` leaves a constant 0.5 image."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("contrast p must lie in [0, 1]")
    return _clamp((1.0 - p) * img + 0.5 * p)


def color_jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= strength <= 1.0:
        raise ValueError("color_jitter strength must lie in [0, 1]")
    b = rng.uniform(-strength, strength)
    c = rng.uniform(-strength, strength)
    shifted = _clamp(img + b)
    m = shifted.mean()
    return _clamp(shifted + c * (shifted - m))


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("gaussian_noise sigma must be >= 0")
    return _clamp(img + sigma * rng.standard_normal(img.shape))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("gaussian_blur sigma must be > 0")
    return _clamp(_smooth(img, sigma))


def occlude(img: np.ndarray, area_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero a random square covering about ``area_fraction`` of the image."""
    if not 0.0 <= area_fraction < 1.0:
        raise ValueError("occlusion area_fraction must lie in [0, 1)")
    _, h, w = img.shape
    side = int(round(math.sqrt(area_fraction) * min(h, w)))
    out = img.copy()
    if side == 0:
        return out
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out[:, top:top + side, left:left + side] = 0.0
    return out


# -- specs and volumes ---------------------------------------------------------------

_KERNELS: dict[str, Callable[..., np.ndarray]] = {
    "elastic": lambda img, rng, alpha, sigma: elastic_deform(img, alpha, sigma, rng),
    "invert": lambda img, rng: invert(img),
    "sharpness": lambda img, rng, factor: sharpness(img, factor),
    "salt_pepper": lambda img, rng, amount: salt_pepper(img, amount, rng),
    "brightness": lambda img, rng, delta: brightness(img, delta),
    "contrast": lambda img, rng, p: contrast(img, p),
    "color_jitter": lambda img, rng, strength: color_jitter(img, strength, rng),
    "gaussian_noise": lambda img, rng, sigma: gaussian_noise(img, sigma, rng),
    "gaussian_blur": lambda img, rng, sigma: gaussian_blur(img, sigma),
    "occlusion": lambda img, rng, area_fraction: occlude(img, area_fraction, rng),
}

_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "elastic": {"alpha": (0.0, math.inf), "sigma": (1e-12, math.inf)},
    "invert": {},
    "sharpness": {"factor": (0.0, math.inf)},
    "salt_pepper": {"amount": (0.0, 1.0)},
    "brightness": {"delta": (-1.0, 1.0)},
    "contrast": {"p": (0.0, 1.0)},
    "color_jitter": {"strength": (0.0, 1.0)},
    "gaussian_noise": {"sigma": (0.0, math.inf)},
    "gaussian_blur": {"sigma": (1e-12, math.inf)},
    "occlusion": {"area_fraction": (0.0, 1.0 - 1e-12)},
}

AUG_KINDS = tuple(_KERNELS)


@dataclass(frozen=True)
class AugSpec:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _KERNELS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        merged = {**DEFAULT_PARAMS[self.kind], **dict(self.params)}
        ranges = _RANGES[self.kind]
        unknown = set(merged) - set(ranges)
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        for name, value in merged.items():
            lo, hi = ranges[name]
            if not lo <= value <= hi:
                raise ValueError(f"{self.kind}.{name}={value} outside [{lo}, {hi}]")
        object.__setattr__(self, "params", {k: float(v) for k, v in merged.items()})

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return _KERNELS[self.kind](img, rng, **self.params)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def coerce(cls, obj) -> "AugSpec":
        if isinstance(obj, AugSpec):
            return obj
        if isinstance(obj, str):
            return cls(obj)
        if isinstance(obj, Mapping):
            extra = set(obj) - {"kind", "params"}
            if extra:
                raise ValueError(f"augmentation spec has unknown keys {sorted(extra)}")
            return cls(obj["kind"], obj.get("params", {}))
        raise TypeError(f"cannot build an AugSpec from {obj!r}")


def default_roster(n: int = 9) -> list[AugSpec]:
    """The first ``n`` default kinds with their default parameters."""
    if not 1 <= n <= len(DEFAULT_KINDS):
        raise ValueError(f"roster size must be in [1, {len(DEFAULT_KINDS)}]")
    return [AugSpec(k) for k in DEFAULT_KINDS[:n]]


def apply_slice(img: np.ndarray, spec: AugSpec, ctx: SeedContext) -> np.ndarray:
    return spec.apply(img, derive_stream(ctx))


def build_volume(img: np.ndarray, roster: Sequence[AugSpec], ctx: SeedContext) -> np.ndarray:
    """Stack ``roster[i](img)`` for each i into a ``(D, C, H, W)`` volume.

    Slice ``i`` draws from the stream of ``ctx`` with ``aug_index = i``.
    """
    if len(roster) == 0:
        raise ValueError("build_volume needs a non-empty roster")
    return np.stack([apply_slice(img, spec, replace(ctx, aug_index=i))
                     for i, spec in enumerate(roster)])


def build_volume_batch(images: np.ndarray, sample_ids: Sequence[int],
                       roster: Sequence[AugSpec], seed: int, epoch: int) -> np.ndarray:
    """Network-ready ``(N, C, D, H, W)`` volumes for a batch of images."""
    vols = [build_volume(img, roster, SeedContext(seed, epoch, int(sid)))
            for img, sid in zip(images, sample_ids)]
    return np.ascontiguousarray(np.stack(vols).transpose(0, 2, 1, 3, 4))


def preview_slices(img: np.ndarray, roster: Optional[Sequence[AugSpec]] = None,
                   seed: int = 0) -> np.ndarray:
    return build_volume(img, roster or default_roster(), SeedContext(seed))
