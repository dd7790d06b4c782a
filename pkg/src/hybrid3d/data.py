"""Datasets: PGM/PPM ingestion, resizing, stratified splits, oversampling, synthetic data."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .augment import AugSpec, SeedContext, default_roster, derive_stream, mix_seed

logger = logging.getLogger(__name__)

PNM_SUFFIXES = (".pgm", ".ppm", ".pnm")


class DataError(ValueError):
    """Raised for unusable image trees or dataset parameters."""


class PNMFormatError(DataError):
    """Raised when a file is not a decodable PGM/PPM image."""


# -- PGM / PPM ------------------------------------------------------------------

def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMFormatError("unexpected end of header")
        try:
            out.append(int(buf[start:pos]))
        except ValueError as exc:
            raise PNMFormatError(f"bad header token {buf[start:pos]!r}") from exc
    return out, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode P2/P3/P5/P6 bytes into a ``(C, H, W)`` float image in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise PNMFormatError(f"unsupported magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise PNMFormatError(f"bad dimensions or maxval ({w}x{h}, {maxval})")
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        vals, _ = _tokens(buf, count, pos)
        arr = np.asarray(vals, dtype=np.float64)
    else:
        pos += 1  # exactly one whitespace byte precedes the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = buf[pos:pos + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise PNMFormatError("truncated raster")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if arr.max(initial=0) > maxval:
        raise PNMFormatError("sample exceeds maxval")
    return (arr / maxval).reshape(h, w, channels).transpose(2, 0, 1).copy()


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def encode_pnm(img: np.ndarray) -> bytes:
    """Binary P5 (1 channel) or P6 (3 channels), 8-bit."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot encode {c}-channel image")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    return header + q.transpose(1, 2, 0).tobytes()


def write_pnm(path: Union[str, Path], img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


# -- image preparation ------------------------------------------------------------

def _axis_coords(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre (align_corners=False) bilinear resize of ``(C, H, W)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    _, h, w = img.shape
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    rows = (1.0 - fy)[:, None] * img[:, y0, :] + fy[:, None] * img[:, y1, :]
    out = (1.0 - fx) * rows[:, :, x0] + fx * rows[:, :, x1]
    return np.clip(out, 0.0, 1.0)


def replicate_channels(img: np.ndarray) -> np.ndarray:
    """Grayscale ``(1, H, W)`` to three identical channels; 3-channel passes through."""
    if img.shape[0] == 3:
        return img
    if img.shape[0] != 1:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
    return np.repeat(img, 3, axis=0)


# -- datasets -------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Images ``(N, C, H, W)`` with integer labels into ``class_names``."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    provenance: str = ""
    skipped: int = 0

    def __post_init__(self) -> None:
        # private copies: freezing them must not touch the caller's arrays
        images = np.array(self.images, dtype=np.float64, order="C")
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise DataError(f"images {images.shape} and labels {labels.shape} disagree")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DataError("label outside the class list")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, provenance: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.class_names,
                       provenance or self.provenance)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.class_names, self.provenance)


def load_image_dir(root: Union[str, Path], size: Optional[tuple[int, int]] = None) -> Dataset:
    """Read ``root/<class>/*.pgm|*.ppm`` into a 3-channel dataset.

    Classes are the subdirectories in lexicographic order. Undecodable files
    are skipped with a warning and counted in ``Dataset.skipped``. Images are
    resized to ``size`` (H, W) when given; otherwise they must agree in size.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if len(classes) < 2:
        raise DataError(f"{root} needs at least two class directories, found {len(classes)}")
    images, labels, skipped = [], [], 0
    for label, name in enumerate(classes):
        n_before = len(images)
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in PNM_SUFFIXES or not f.is_file():
                continue
            try:
                img = read_pnm(f)
            except (PNMFormatError, OSError) as exc:
                logger.warning("skipping %s: %s", f, exc)
                skipped += 1
                continue
            if size is not None and img.shape[1:] != tuple(size):
                img = resize_bilinear(img, *size)
            images.append(replicate_channels(img))
            labels.append(label)
        if len(images) == n_before:
            raise DataError(f"class directory {name!r} has no decodable images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images differ in size {sorted(shapes)}; pass a target size")
    return Dataset(np.stack(images), np.asarray(labels), tuple(classes), str(root), skipped)


def save_image_dir(ds: Dataset, root: Union[str, Path], grayscale: bool = True) -> None:
    """Write ``ds`` as a class-per-directory PGM (or PPM) tree."""
    root = Path(root)
    counters = dict.fromkeys(range(ds.num_classes), 0)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if grayscale else ".ppm"
    for img, label in zip(ds.images, ds.labels):
        i = counters[int(label)]
        counters[int(label)] += 1
        out = img[:1] if grayscale else img
        write_pnm(root / ds.class_names[label] / f"{i:05d}{ext}", out)


# -- splitting and balancing -----------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    stratified: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(labels: np.ndarray, fraction: float, seed: int,
                  stratified: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (optionally per-class) partition; returns sorted index arrays."""
    labels = np.asarray(labels)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if stratified \
        else [np.arange(len(labels))]
    first, second = [], []
    for gi, idx in enumerate(groups):
        if len(idx) < 2:
            raise DataError(f"class {labels[idx[0]]} has a single sample; cannot split")
        rng = np.random.default_rng(mix_seed(seed, gi, len(idx)))
        perm = rng.permutation(idx)
        k = min(max(_round_half_up(fraction * len(idx)), 1), len(idx) - 1)
        first.append(perm[:k])
        second.append(perm[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Train/test partition with ``round(fraction * class_count)`` train samples per class."""
    tr, te = split_indices(ds.labels, spec.train_fraction, spec.seed, spec.stratified)
    return ds.subset(tr), ds.subset(te)


def oversample_minority(train: Dataset, target_counts: Union[Mapping, Sequence[int]],
                        roster: Optional[Sequence[AugSpec]] = None, seed: int = 0) -> Dataset:
    """Raise class counts to ``target_counts`` with augmented duplicates.

    Each duplicate copies a randomly drawn member of its class and applies
    one randomly drawn augmentation from ``roster``. A draw that leaves the
    image bit-identical is redrawn.
    """
    roster = list(roster or default_roster())
    counts = train.class_counts()
    if isinstance(target_counts, Mapping):
        targets = counts.copy()
        for key, val in target_counts.items():
            ci = train.class_names.index(key) if isinstance(key, str) else int(key)
            targets[ci] = int(val)
    else:
        targets = np.asarray(target_counts, dtype=np.int64)
    if len(targets) != train.num_classes:
        raise ValueError("target_counts must cover every class")
    if np.any(targets < counts):
        raise ValueError(f"targets {targets.tolist()} below current counts {counts.tolist()}")
    new_images, new_labels = [train.images], [train.labels]
    for c in range(train.num_classes):
        members = np.flatnonzero(train.labels == c)
        deficit = int(targets[c] - counts[c])
        if deficit == 0:
            continue
        if len(members) == 0:
            raise ValueError(f"class {train.class_names[c]!r} has no samples to duplicate")
        rng = np.random.default_rng(mix_seed(seed, c, 0x0BE55))
        for d in range(deficit):
            src = train.images[members[rng.integers(len(members))]]
            for attempt in range(16):
                spec = roster[rng.integers(len(roster))]
                aug = spec.apply(src, derive_stream(SeedContext(seed, c, d, attempt)))
                if not np.array_equal(aug, src):
                    break
            new_images.append(aug[None])
            new_labels.append(np.array([c]))
    return Dataset(np.concatenate(new_images), np.concatenate(new_labels),
                   train.class_names, train.provenance + " +oversampled")


def balance_targets(train: Dataset) -> np.ndarray:
    counts = train.class_counts()
    return np.full_like(counts, counts.max())


# -- synthetic data ---------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Oriented sinusoidal textures, one orientation and frequency per class."""

    num_classes: int = 4
    per_class: Union[int, Sequence[int]] = 50
    size: int = 32
    noise: float = 0.08
    phase_jitter: float = 0.6
    seed: int = 0

    def counts(self) -> list[int]:
        if isinstance(self.per_class, int):
            counts = [self.per_class] * self.num_classes
        else:
            counts = list(self.per_class)
        if len(counts) != self.num_classes or min(counts) < 1:
            raise ValueError("per_class must give at least one sample for every class")
        return counts


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    counts = spec.counts()
    k, s = spec.num_classes, spec.size
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64),
                         indexing="ij")
    images, labels = [], []
    for c, n in enumerate(counts):
        theta = math.pi * c / k
        cycles = 2.0 + 1.5 * (c % 2)
        proj = (xx * math.cos(theta) + yy * math.sin(theta)) / s
        rng = np.random.default_rng(mix_seed(spec.seed, c, 0x5E7))
        for _ in range(n):
            phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
            amp = rng.uniform(0.25, 0.4)
            img = 0.5 + amp * np.sin(2.0 * math.pi * cycles * proj + phase)
            img = img + spec.noise * rng.standard_normal((s, s))
            images.append(np.repeat(np.clip(img, 0.0, 1.0)[None], 3, axis=0))
            labels.append(c)
    names = tuple(f"class_{c}" for c in range(k))
    return Dataset(np.stack(images), np.asarray(labels), names,
                   f"synthetic(seed={spec.seed}, size={s}, classes={k})")
