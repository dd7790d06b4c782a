"""Consistency-coupled loss, Adam, and the early-stopped training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .ops import ConfigurationError
from .augment import AugSpec, build_volume_batch, default_roster, mix_seed
from .data import Dataset, split_indices
from .metrics import MetricsReport, metrics_report
from .model import HybridModel, HybridOutput, TwoDNet, hybrid_forward
from .tensor import Tensor, backward, no_grad
from .weights import save_weights

logger = logging.getLogger(__name__)

LOSS_MODES = ("multiclass_ce", "binary_ce")
OBJECTIVES = ("hybrid", "2d_only")
STOP_GRAD = ("none", "2d", "3d")
# seed-context epoch used for every evaluation-time volume
EVAL_EPOCH = -1


@dataclass
class TrainConfig:
    lam: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    roster: Sequence[AugSpec] = field(default_factory=default_roster)
    loss_mode: str = "multiclass_ce"
    objective: str = "hybrid"
    mse_stop_grad: str = "none"
    lr_plateau_patience: Optional[int] = 2
    eval_batch_size: int = 64
    # validation accuracy 1.0 cannot be strictly beaten, so the restored
    # weights are already final; skip the remaining patience epochs
    stop_at_perfect: bool = True

    def __post_init__(self) -> None:
        self.roster = [AugSpec.coerce(a) for a in self.roster]
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not 0.0 < self.val_fraction < 0.5:
            raise ConfigurationError("val_fraction must lie in (0, 0.5)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigurationError("batch_size and max_epochs must be >= 1, patience >= 0")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigurationError("need alpha >= 0, beta >= 0, alpha + beta > 0")
        for name, value, allowed in (("loss_mode", self.loss_mode, LOSS_MODES),
                                     ("objective", self.objective, OBJECTIVES),
                                     ("mse_stop_grad", self.mse_stop_grad, STOP_GRAD)):
            if value not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")
        if not self.roster:
            raise ConfigurationError("roster must not be empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roster"] = [a.to_dict() for a in self.roster]
        d["lambda"] = d.pop("lam")
        return d


# -- loss ---------------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    l2d: float
    l3d: float
    mse: float


def combined_loss(out: HybridOutput, targets, lam: float, loss_mode: str = "multiclass_ce",
                  mse_stop_grad: str = "none") -> LossBreakdown:
    """``CE(o2d) + CE(o3d) + lam * MSE(softmax(o2d), softmax(o3d))``.

    ``mse_stop_grad`` detaches one branch's probabilities inside the MSE
    term so it acts as a fixed target.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    if out.o3d is None:
        raise ConfigurationError("combined_loss needs both branches")
    crit = _criterion(loss_mode, out.o2d.shape[1])
    l2d = crit(out.o2d, targets)
    l3d = crit(out.o3d, targets)
    s2d = out.s2d.detach() if mse_stop_grad == "2d" else out.s2d
    s3d = out.s3d.detach() if mse_stop_grad == "3d" else out.s3d
    m = ops.mse(s2d, s3d)
    total = ops.add(ops.add(l2d, l3d), ops.scale(m, lam))
    return LossBreakdown(total, l2d.item(), l3d.item(), m.item())


def _criterion(loss_mode: str, k: int):
    if loss_mode == "binary_ce":
        if k != 2:
            raise ConfigurationError(f"binary_ce needs two classes, got {k}")
        return ops.binary_cross_entropy
    if loss_mode != "multiclass_ce":
        raise ConfigurationError(f"unknown loss_mode {loss_mode!r}")
    return ops.cross_entropy


# -- Adam -----------------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``param.data``.

    A parameter without a gradient is treated as having a zero gradient.
    Any non-finite gradient aborts the step before anything is modified.
    """
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- prediction and evaluation ------------------------------------------------------------------

def predict_logits(model: Union[HybridModel, TwoDNet], images: np.ndarray, head: str = "2d",
                   roster: Optional[Sequence[AugSpec]] = None, seed: int = 0,
                   batch_size: int = 64, sample_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Eval-mode logits for the 2D head or the combined ``alpha/beta`` head."""
    if head not in ("2d", "hybrid"):
        raise ValueError(f"head must be '2d' or 'hybrid', got {head!r}")
    two_d = model.two_d if isinstance(model, HybridModel) else model
    if head == "hybrid" and (not isinstance(model, HybridModel) or model.three_d is None):
        raise ValueError("the hybrid head needs a model with a 3D branch")
    roster = list(roster or default_roster())
    ids = np.arange(len(images)) if sample_ids is None else np.asarray(sample_ids)
    out = []
    two_d.eval()
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            if head == "2d":
                out.append(two_d(batch).data)
            else:
                vols = build_volume_batch(batch, ids[start:start + batch_size], roster,
                                          seed, EVAL_EPOCH)
                res = hybrid_forward(model, batch, vols, training=False)
                out.append(res.oh)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(model: Union[HybridModel, TwoDNet], dataset: Dataset, head: str = "2d",
             roster: Optional[Sequence[AugSpec]] = None, seed: int = 0,
             batch_size: int = 64) -> MetricsReport:
    """Metrics from an eval-mode pass; the 2D input is never augmented."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict_logits(model, dataset.images, head, roster, seed, batch_size)
    probs = ops._softmax_np(logits)
    return metrics_report(dataset.labels, probs, dataset.class_names)


# -- fitting ------------------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    l2d: float
    l3d: float
    mse: float
    total: float
    val_acc: float
    lr: float


@dataclass
class FitReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_acc: float = 0.0
    n_train: int = 0
    n_val: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "l2d", "l3d", "mse", "total", "val_acc"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.l2d), repr(e.l3d), repr(e.mse), repr(e.total),
                        repr(e.val_acc)])
        return buf.getvalue()


def carve_validation(train_set: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Stratified (fit, validation) partition of ``train_set``."""
    val_idx, fit_idx = split_indices(train_set.labels, cfg.val_fraction,
                                     mix_seed(cfg.seed, 0x7A1))
    return train_set.subset(fit_idx), train_set.subset(val_idx)


def _snapshot(model: HybridModel) -> dict:
    return {k: v.copy() for k, v in model.state_dict().items()}


def fit(model: HybridModel, train_set: Dataset, cfg: TrainConfig,
        val_set: Optional[Dataset] = None, checkpoint_dir: Optional[Union[str, Path]] = None,
        save_hybrid: bool = False) -> FitReport:
    """Train ``model`` in place and restore the best-validation weights.

    Each epoch shuffles with a seeded permutation, rebuilds every sample's
    volume from epoch-dependent seeds, and takes one Adam step per batch.
    Validation accuracy of the 2D head picks the best epoch; training stops
    once ``patience`` epochs pass without a strict improvement. With
    ``checkpoint_dir`` the best 2D weights go to ``model.azwt`` (and the
    whole hybrid to ``hybrid.azwt`` when ``save_hybrid``).
    """
    if len(train_set) == 0:
        raise ConfigurationError("empty training set")
    if len(np.unique(train_set.labels)) < 2:
        raise ConfigurationError("training set must contain at least two classes")
    hybrid = cfg.objective == "hybrid"
    if hybrid and model.three_d is None:
        raise ConfigurationError("hybrid objective needs a 3D branch")
    _criterion(cfg.loss_mode, train_set.num_classes)
    model.alpha, model.beta = cfg.alpha, cfg.beta
    if val_set is None:
        train_set, val_set = carve_validation(train_set, cfg)
    params = model.named_parameters() if hybrid else model.two_d.named_parameters("two_d.")
    state = AdamState()
    lr = cfg.lr
    report = FitReport(n_train=len(train_set), n_val=len(val_set), config=cfg.to_dict())
    best_state = _snapshot(model)
    best_acc = -1.0
    since_improve = 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(mix_seed(cfg.seed, epoch, 0x5F1)).permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = train_set.images[idx]
            targets = train_set.labels[idx]
            for p in (p for _, p in params):
                p.grad = None
            if hybrid:
                vols = build_volume_batch(images, idx, cfg.roster, cfg.seed, epoch)
                out = hybrid_forward(model, images, vols, training=True)
                parts = combined_loss(out, targets, cfg.lam, cfg.loss_mode, cfg.mse_stop_grad)
                loss, comps = parts.total, (parts.l2d, parts.l3d, parts.mse)
            else:
                model.two_d.train()
                loss = _criterion(cfg.loss_mode, train_set.num_classes)(model.two_d(images), targets)
                comps = (loss.item(), 0.0, 0.0)
            backward(loss)
            adam_step(params, state, lr)
            sums += len(idx) * np.array(comps + (loss.item(),))
        means = sums / n
        val_acc = evaluate(model, val_set, "2d", batch_size=cfg.eval_batch_size).accuracy
        report.epochs.append(EpochRecord(epoch, *map(float, means), float(val_acc), lr))
        logger.info("epoch %d loss %.4f (2d %.4f 3d %.4f mse %.4f) val_acc %.4f",
                    epoch, means[3], means[0], means[1], means[2], val_acc)
        if val_acc > best_acc:
            best_acc, report.best_epoch = val_acc, epoch
            best_state = _snapshot(model)
            since_improve = 0
        else:
            since_improve += 1
            if cfg.lr_plateau_patience and since_improve % cfg.lr_plateau_patience == 0:
                lr *= 0.5
        report.stopped_epoch = epoch
        if epoch - report.best_epoch >= cfg.patience:
            break
        if cfg.stop_at_perfect and best_acc >= 1.0:
            break
    model.load_state_dict(best_state)
    report.best_val_acc = float(best_acc)
    if checkpoint_dir is not None:
        ckpt = Path(checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        save_weights(model.two_d, ckpt / "model.azwt")
        if save_hybrid:
            save_weights(model, ckpt / "hybrid.azwt")
    return report
