"""scikit-learn compatible wrappers around the hybrid trainer."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import ops
from .augment import AugSpec, build_volume_batch, default_roster
from .data import Dataset
from .model import (HybridModel, ThreeDNetConfig, TwoDNetConfig, build_three_d,
                    build_two_d)
from .training import EVAL_EPOCH, TrainConfig, fit, predict_logits


def _as_images(X) -> np.ndarray:
    """Accept ``(N,H,W)`` grayscale or ``(N,C,H,W)`` arrays in ``[0,1]``."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = np.repeat(X[:, None], 3, axis=1)
    elif X.ndim == 4 and X.shape[1] == 1:
        X = np.repeat(X, 3, axis=1)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected (N,H,W), (N,1,H,W) or (N,3,H,W) images, got {X.shape}")
    return X


def _roster(roster, roster_size: int) -> list[AugSpec]:
    return default_roster(roster_size) if roster is None else [AugSpec.coerce(a) for a in roster]


class HybridVolumeClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained jointly with a 3D encoder over augmentation volumes.

    ``head="2d"`` predicts with the image branch alone (the deployable
    part); ``head="hybrid"`` uses ``alpha*o2d + beta*o3d``.
    """

    def __init__(self, lam: float = 0.5, alpha: float = 0.5, beta: float = 0.5,
                 lr: float = 1e-4, batch_size: int = 8, max_epochs: int = 30,
                 patience: int = 5, val_fraction: float = 0.1,
                 width_multiplier: float = 0.125, roster_size: int = 9,
                 roster: Optional[list] = None, loss_mode: str = "multiclass_ce",
                 objective: str = "hybrid", mse_stop_grad: str = "none",
                 head: str = "2d", random_state: int = 0):
        self.lam = lam
        self.alpha = alpha
        self.beta = beta
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.width_multiplier = width_multiplier
        self.roster_size = roster_size
        self.roster = roster
        self.loss_mode = loss_mode
        self.objective = objective
        self.mse_stop_grad = mse_stop_grad
        self.head = head
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lam=self.lam, alpha=self.alpha, beta=self.beta, lr=self.lr,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, val_fraction=self.val_fraction,
                           seed=self.random_state,
                           roster=_roster(self.roster, self.roster_size),
                           loss_mode=self.loss_mode, objective=self.objective,
                           mse_stop_grad=self.mse_stop_grad)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, ensure_2d=False, dtype=np.float64)
        X = _as_images(X)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        cfg = self._train_config()
        k = len(self.classes_)
        seed = self.random_state
        three_d = (build_three_d(ThreeDNetConfig(k, self.width_multiplier), seed)
                   if self.objective == "hybrid" or self.head == "hybrid" else None)
        self.model_ = HybridModel(build_two_d(TwoDNetConfig(k, self.width_multiplier), seed),
                                  three_d, self.alpha, self.beta)
        data = Dataset(X, codes, tuple(str(c) for c in self.classes_), "array")
        self.fit_report_ = fit(self.model_, data, cfg)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _as_images(X)
        return predict_logits(self.model_, X, self.head, _roster(self.roster, self.roster_size),
                              self.random_state)

    def predict_proba(self, X) -> np.ndarray:
        return ops._softmax_np(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class VolumeBuilder(TransformerMixin, BaseEstimator):
    """Stateless transformer from images ``(N,C,H,W)`` to volumes ``(N,C,D,H,W)``."""

    def __init__(self, roster_size: int = 9, roster: Optional[list] = None,
                 random_state: int = 0, epoch: int = EVAL_EPOCH):
        self.roster_size = roster_size
        self.roster = roster
        self.random_state = random_state
        self.epoch = epoch

    def fit(self, X, y=None):
        _as_images(X)
        self.depth_ = len(_roster(self.roster, self.roster_size))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "depth_")
        X = _as_images(X)
        return build_volume_batch(X, np.arange(len(X)), _roster(self.roster, self.roster_size),
                                  self.random_state, self.epoch)
