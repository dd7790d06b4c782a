"""Test-time corruption sweeps over frozen models."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import augment as aug
from . import ops
from .augment import AugSpec, mix_seed
from .data import Dataset
from .metrics import MetricsReport, metrics_report
from .model import HybridModel, TwoDNet
from .training import predict_logits

FAMILIES = ("gaussian_noise", "brightness", "contrast", "salt_pepper", "color_jitter",
            "occlusion")
CLEAN = "clean"

# valid (low, high) intensity range per family; both ends inclusive
_RANGES = {
    "gaussian_noise": (0.0, math.inf),
    "brightness": (-1.0, 1.0),
    "contrast": (0.0, 1.0),
    "salt_pepper": (0.0, 1.0),
    "color_jitter": (0.0, 1.0),
    "occlusion": (0.0, 1.0 - 1e-12),
}
_ALIASES = {"gaussian": "gaussian_noise", "noise": "gaussian_noise", "jitter": "color_jitter",
            "salt_and_pepper": "salt_pepper", "occlude": "occlusion"}


def canonical_family(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in FAMILIES:
        raise ValueError(f"unknown perturbation family {name!r}; expected one of {FAMILIES}")
    return name


def perturb(img: np.ndarray, family: str, level: float, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption to a ``[C,H,W]`` image in ``[0,1]``."""
    family = canonical_family(family)
    if family == "gaussian_noise":
        return aug.gaussian_noise(img, level, rng)
    if family == "brightness":
        return aug.brightness(img, level)
    if family == "contrast":
        return aug.contrast(img, level)
    if family == "salt_pepper":
        return aug.salt_pepper(img, level, rng)
    if family == "color_jitter":
        return aug.color_jitter(img, level, rng)
    return aug.occlude(img, level, rng)


@dataclass(frozen=True)
class PerturbationGrid:
    family: str
    levels: tuple
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", canonical_family(self.family))
        levels = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError(f"{self.family}: grid needs at least one level")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"{self.family}: levels must be strictly increasing")
        lo, hi = _RANGES[self.family]
        bad = [v for v in levels if not lo <= v <= hi]
        if bad:
            raise ValueError(f"{self.family}: levels {bad} outside [{lo}, {hi}]")


def default_grids(seed: int = 0) -> list[PerturbationGrid]:
    tenths = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    return [
        PerturbationGrid("gaussian_noise", (0.03, 0.06, 0.09, 0.12, 0.15), seed),
        PerturbationGrid("brightness", tenths, seed),
        PerturbationGrid("contrast", tenths, seed),
        PerturbationGrid("salt_pepper", (0.01, 0.015, 0.02, 0.025), seed),
        PerturbationGrid("color_jitter", (0.1, 0.2, 0.3, 0.4, 0.5), seed),
        PerturbationGrid("occlusion", (0.04, 0.06, 0.08, 0.10, 0.12), seed),
    ]


def _level_key(level: float) -> int:
    # micro-units keep 0.1 and 0.1000000001 from landing on different streams
    return int(round(level * 1_000_000))


def perturb_set(images: np.ndarray, family: str, level: float, seed: int) -> np.ndarray:
    """Corrupt every image; sample ``i`` draws from a stream keyed on (seed, family, level, i)."""
    fi = FAMILIES.index(canonical_family(family))
    out = np.empty_like(images)
    for i, img in enumerate(images):
        rng = np.random.default_rng(mix_seed(seed, fi, _level_key(level), i))
        out[i] = perturb(img, family, level, rng)
    return out


@dataclass
class SweepRow:
    family: str
    level: Optional[float]
    model: str
    report: MetricsReport


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    head: str = "2d"
    seed: int = 0

    def select(self, family: str, model: str, include_clean: bool = False) -> list[SweepRow]:
        out = [r for r in self.rows if r.model == model
               and (r.family == family or (include_clean and r.family == CLEAN))]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["family", "level", "model", "accuracy", "precision", "recall", "f1",
                    "specificity", "auc"])
        for r in self.rows:
            m = r.report
            vals = [m.accuracy, m.precision, m.recall, m.f1, m.specificity, m.auc]
            w.writerow([r.family, "none" if r.level is None else f"{r.level:g}", r.model]
                       + ["nan" if v is None else f"{100.0 * v:.2f}" for v in vals])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"head": self.head, "seed": self.seed,
                "rows": [{"family": r.family, "level": r.level, "model": r.model,
                          "metrics": r.report.to_dict()} for r in self.rows],
                "trend": trend_summary(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


ModelLike = Union[HybridModel, TwoDNet]


def _report(model: ModelLike, images: np.ndarray, labels, class_names, head: str,
            roster, eval_seed: int) -> MetricsReport:
    logits = predict_logits(model, images, head, roster, eval_seed)
    return metrics_report(labels, ops._softmax_np(logits), class_names)


def sweep(models: Mapping[str, ModelLike], test_set: Dataset,
          grids: Optional[Sequence[PerturbationGrid]] = None, seed: int = 0,
          head: str = "2d", roster: Optional[Sequence[AugSpec]] = None,
          eval_seed: int = 0) -> SweepReport:
    """Evaluate every model on the clean set and on each grid point.

    Each grid point corrupts the test images once and hands the same array
    to every model. ``eval_seed`` seeds the volumes of the hybrid head.
    Rows follow grid order, with the clean row first.
    """
    if len(test_set) == 0:
        raise ValueError("cannot sweep an empty test set")
    if not models:
        raise ValueError("sweep needs at least one model")
    grids = default_grids(seed) if grids is None else list(grids)
    report = SweepReport(head=head, seed=seed)
    names = list(models)
    args = (test_set.labels, test_set.class_names, head, roster, eval_seed)
    for name in names:
        report.rows.append(SweepRow(CLEAN, None, name,
                                    _report(models[name], test_set.images, *args)))
    for grid in grids:
        for level in grid.levels:
            corrupted = perturb_set(test_set.images, grid.family, level, grid.seed)
            corrupted.setflags(write=False)
            for name in names:
                report.rows.append(SweepRow(grid.family, level, name,
                                            _report(models[name], corrupted, *args)))
    return report


def longest_decreasing_prefix(values: Sequence[float], tol: float = 0.0) -> int:
    """Length of the leading run where each value is at most ``tol`` above its predecessor."""
    if not values:
        return 0
    n = 1
    while n < len(values) and values[n] <= values[n - 1] + tol:
        n += 1
    return n


def trend_verdict(values: Sequence[float], tol: float = 0.0) -> str:
    v = list(values)
    if len(v) < 2:
        raise ValueError("a trend needs at least two levels")
    if all(b == a for a, b in zip(v, v[1:])):
        return "flat"
    if all(b < a for a, b in zip(v, v[1:])):
        return "monotone"
    if longest_decreasing_prefix(v, tol) == len(v):
        return "non_increasing"
    return "non_monotone"


def trend_summary(report: SweepReport, tol: float = 0.0) -> dict:
    """Per (family, model) accuracy trend and per-level signs between model pairs.

    Each sequence starts at the clean accuracy and follows the grid levels.
    """
    models = list(dict.fromkeys(r.model for r in report.rows))
    families = list(dict.fromkeys(r.family for r in report.rows if r.family != CLEAN))
    out: dict = {"per_model": {}, "pairs": {}}
    for fam in families:
        accs = {m: [r.report.accuracy for r in report.select(fam, m, include_clean=True)]
                for m in models}
        out["per_model"][fam] = {
            m: {"accuracy": a, "decreasing_prefix": longest_decreasing_prefix(a, tol),
                "verdict": trend_verdict(a, tol) if len(a) >= 2 else "flat"}
            for m, a in accs.items()}
        for i, a in enumerate(models):
            for b in models[i + 1:]:
                out["pairs"].setdefault(f"{a}-{b}", {})[fam] = [
                    int(np.sign(x - y)) for x, y in zip(accs[a], accs[b])]
    return out
