"""Multinomial logistic regression on flat parameter vectors.

Parameters are stored as a flat vector of length ``C * (d + 1)``: the
row-major flattening of a ``(C, d + 1)`` matrix whose row ``c`` is the
weight vector of class ``c`` followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ctxfed.errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise InvalidInputError(f"features must be 2-d, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidInputError(
                f"{x.shape[0]} feature rows but labels have shape {y.shape}"
            )
        if y.size and (not np.issubdtype(y.dtype, np.integer)):
            if not np.all(y == np.round(y)):
                raise InvalidInputError("labels must be integers")
        y = y.astype(np.int64)
        if y.size and y.min() < 0:
            raise InvalidInputError("labels must be non-negative")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("features have non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @cached_property
    def augmented(self) -> np.ndarray:
        """Features with a trailing constant-1 column for the bias."""
        xa = np.hstack([self.features, np.ones((len(self), 1))])
        xa.setflags(write=False)
        return xa

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(parts: list[LabeledDataset]) -> LabeledDataset:
        return LabeledDataset(
            np.vstack([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


def param_dim(num_classes: int, num_features: int) -> int:
    return num_classes * (num_features + 1)


@dataclass(frozen=True, eq=False)
class SoftmaxModel:
    num_classes: int
    num_features: int
    params: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 2 or self.num_features < 1:
            raise InvalidInputError("need num_classes >= 2 and num_features >= 1")
        n = param_dim(self.num_classes, self.num_features)
        p = np.zeros(n) if self.params is None else np.array(self.params, dtype=np.float64)
        if p.shape != (n,):
            raise InvalidInputError(f"params must have shape ({n},), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("params have non-finite entries")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """``(C, d + 1)`` view of the parameters."""
        return self.params.reshape(self.num_classes, self.num_features + 1)

    def with_params(self, params) -> SoftmaxModel:
        return SoftmaxModel(self.num_classes, self.num_features, params)


def _check(m: SoftmaxModel, data: LabeledDataset) -> None:
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    if data.num_features != m.num_features:
        raise InvalidInputError(
            f"model expects {m.num_features} features, data has {data.num_features}"
        )
    if data.labels.max() >= m.num_classes:
        raise InvalidInputError(
            f"label {int(data.labels.max())} out of range for {m.num_classes} classes"
        )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def grad_weights(weights: np.ndarray, xa: np.ndarray, y: np.ndarray) -> np.ndarray:
    logits = xa @ weights.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(xa.shape[0]), y] -= 1.0
    return (p.T @ xa) / xa.shape[0]


def loss(m: SoftmaxModel, data: LabeledDataset) -> float:
    _check(m, data)
    logp = log_softmax(data.augmented @ m.weights.T)
    return float(-logp[np.arange(len(data)), data.labels].mean())


def gradient(m: SoftmaxModel, data: LabeledDataset) -> np.ndarray:
    _check(m, data)
    return grad_weights(m.weights, data.augmented, data.labels).ravel()


def predict(m: SoftmaxModel, features: np.ndarray) -> np.ndarray:
    xa = np.hstack([np.asarray(features, dtype=np.float64), np.ones((len(features), 1))])
    # np.argmax returns the first maximal index, i.e. the lowest class id on ties.
    return np.argmax(xa @ m.weights.T, axis=1)


def accuracy(m: SoftmaxModel, data: LabeledDataset) -> float:
    _check(m, data)
    pred = np.argmax(data.augmented @ m.weights.T, axis=1)
    return float(np.mean(pred == data.labels))


def smoothness_bound(data: LabeledDataset) -> float:
    """Certified smoothness constant of the mean cross-entropy on ``data``.

    Each sample's Hessian is ``(diag(p) - p p^T) kron (x x^T)`` and the first
    factor has spectral norm at most 1/2, so the mean loss is
    ``max ||x_aug||^2 / 2``-smooth.
    """
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    return float(np.max(np.einsum("ij,ij->i", data.augmented, data.augmented)) / 2.0)


def hessian_vector_product(m: SoftmaxModel, data: LabeledDataset, v) -> np.ndarray:
    """Exact Hessian of the mean loss applied to ``v`` (flat, params layout)."""
    _check(m, data)
    xa = data.augmented
    logits = xa @ m.weights.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    z = xa @ np.asarray(v, dtype=np.float64).reshape(m.weights.shape).T
    s = p * z - p * np.sum(p * z, axis=1, keepdims=True)
    return ((s.T @ xa) / len(data)).ravel()


def estimate_smoothness(
    m: SoftmaxModel, data: LabeledDataset, iters: int = 200, seed: int = 0
) -> float:
    """Largest Hessian eigenvalue at ``m`` by power iteration.

    The mean cross-entropy is convex, so the Hessian is positive
    semidefinite and power iteration converges to its spectral norm.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=m.dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = hessian_vector_product(m, data, v)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            return 0.0
        v = hv / lam
    return lam
