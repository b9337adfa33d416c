"""Scikit-learn style estimator wrapping spec -> train -> predict.

X rows are concatenated feature pairs [q | v] of width d_q + d_v, so the
classifier drops into ordinary sklearn pipelines and searches; y holds
integer class labels below the spec's class count.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dsl import Dims, FusionSpec, parse_spec, preset_spec
from .engine import forward
from .training import Dataset, Example, TrainConfig, train


def split_modalities(X: np.ndarray, dims: Dims) -> tuple[np.ndarray, np.ndarray]:
    """Split concatenated [q | v] rows; width must be exactly d_q + d_v."""
    expected = dims.d_q + dims.d_v
    if X.shape[1] != expected:
        raise ValueError(
            f"X has {X.shape[1]} columns, expected d_q + d_v = "
            f"{dims.d_q} + {dims.d_v} = {expected}"
        )
    return X[:, : dims.d_q], X[:, dims.d_q :]


def _as_dataset(Q: np.ndarray, V: np.ndarray, y: np.ndarray, n_classes: int) -> Dataset:
    examples = [
        Example(q=np.ascontiguousarray(q), v=np.ascontiguousarray(v), label=int(label))
        for q, v, label in zip(Q, V, y)
    ]
    return Dataset(d_q=Q.shape[1], d_v=V.shape[1], n_classes=n_classes, examples=examples)


class FusionClassifier(BaseEstimator, ClassifierMixin):
    """Trainable fusion-operator classifier with a fit/predict interface.

    Parameters
    ----------
    spec : str or FusionSpec, default="mutan_r5"
        A preset name, full spec text (anything containing "{"), or an
        already-built FusionSpec.
    dims : Dims or None
        Overrides the spec's dims (required for presets, whose default
        dims are full-scale).
    rank : int or None
        Overrides the preset branch count; ignored for explicit specs.
    lr, batch_size, max_epochs, seed
        Optimizer settings, passed through to the training loop.
    val_fraction : float
        Share of fit data held out for best-epoch selection.
    """

    def __init__(
        self,
        spec: str | FusionSpec = "mutan_r5",
        dims: Dims | None = None,
        rank: int | None = None,
        lr: float = 1e-4,
        batch_size: int = 128,
        max_epochs: int = 100,
        val_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.spec = spec
        self.dims = dims
        self.rank = rank
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.seed = seed

    def _resolve_spec(self) -> FusionSpec:
        if isinstance(self.spec, FusionSpec):
            spec = self.spec
            if self.dims is not None:
                spec = dataclasses.replace(spec, dims=self.dims)
            return spec
        if isinstance(self.spec, str):
            if "{" in self.spec:
                return parse_spec(self.spec)
            return preset_spec(self.spec, dims=self.dims, rank=self.rank)
        raise TypeError(f"spec must be a name, spec text, or FusionSpec, got {type(self.spec)}")

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        spec = self._resolve_spec()
        n_classes = spec.dims.n_classes
        if np.issubdtype(y.dtype, np.floating) and np.all(y == np.round(y)):
            y = y.astype(np.int64)
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("y must contain integer class labels")
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes}), got [{y.min()}, {y.max()}]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

        Q, V = split_modalities(X, spec.dims)
        n = X.shape[0]
        n_val = max(1, int(round(self.val_fraction * n)))
        if n_val >= n:
            raise ValueError(f"not enough rows ({n}) for val_fraction={self.val_fraction}")
        order = np.random.default_rng(self.seed).permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        train_ds = _as_dataset(Q[train_idx], V[train_idx], y[train_idx], n_classes)
        val_ds = _as_dataset(Q[val_idx], V[val_idx], y[val_idx], n_classes)

        cfg = TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )
        self.spec_ = spec
        self.params_, self.metrics_ = train(spec, train_ds, val_ds, cfg)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        Q, V = split_modalities(X, self.spec_.dims)
        out = np.empty((X.shape[0], self.spec_.dims.n_classes))
        for i in range(X.shape[0]):
            out[i] = forward(self.spec_, self.params_, Q[i], V[i], train_mode=False).logits
        return out

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)
