"""Local optimization on a single device."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctxfed.errors import DivergedError, InvalidInputError
from ctxfed.model import LabeledDataset, SoftmaxModel, grad_weights, log_softmax


@dataclass(frozen=True)
class LocalConfig:
    learning_rate: float
    batch_size: int = 10
    proximal_mu: float = 0.0
    epochs: int = 1

    def __post_init__(self):
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not (self.proximal_mu >= 0 and np.isfinite(self.proximal_mu)):
            raise InvalidInputError("proximal_mu must be >= 0")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")


@dataclass(frozen=True, eq=False)
class DeviceUpdate:
    device_id: int
    delta: np.ndarray
    num_samples: int
    epochs_run: int


def local_update(
    global_model: SoftmaxModel,
    data: LabeledDataset,
    cfg: LocalConfig,
    seed,
    device_id: int = 0,
) -> DeviceUpdate:
    """Run ``cfg.epochs`` passes of mini-batch SGD starting from the global model.

    The objective is ``F_k(w) + mu/2 * ||w - w_global||^2``. Each epoch uses a
    fresh permutation drawn from ``seed`` and keeps the trailing partial batch.
    Returns ``w_final - w_global``.
    """
    if data.num_features != global_model.num_features:
        raise InvalidInputError("data and model feature dimensions differ")
    if len(data) == 0:
        raise InvalidInputError(f"device {device_id} has no data")
    w0 = global_model.weights
    if cfg.epochs == 0:
        return DeviceUpdate(device_id, np.zeros(global_model.dim), len(data), 0)

    rng = np.random.default_rng(seed)
    xa, y = data.augmented, data.labels
    m = len(data)
    lr, mu, bs = cfg.learning_rate, cfg.proximal_mu, cfg.batch_size
    w = w0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            start = w.copy()
            perm = rng.permutation(m)
            xp, yp = xa[perm], y[perm]
            for s in range(0, m, bs):
                g = grad_weights(w, xp[s : s + bs], yp[s : s + bs])
                if mu:
                    g += mu * (w - w0)
                w -= lr * g
            if not (np.all(np.isfinite(w)) and _finite_loss(w, xa, y)):
                raise DivergedError(
                    f"device {device_id} diverged in epoch {epoch + 1}",
                    last_finite=start.ravel(),
                )
    return DeviceUpdate(device_id, (w - w0).ravel(), m, cfg.epochs)


def _finite_loss(w: np.ndarray, xa: np.ndarray, y: np.ndarray) -> bool:
    logp = log_softmax(xa @ w.T)
    return bool(np.isfinite(logp[np.arange(len(y)), y].sum()))


def draw_epochs(min_e: int, max_e: int, rng: np.random.Generator, size=None):
    """Uniform integer epoch count(s) on ``[min_e, max_e]``."""
    if min_e < 0 or max_e < min_e:
        raise InvalidInputError(f"bad epoch range [{min_e}, {max_e}]")
    out = rng.integers(min_e, max_e + 1, size=size)
    return int(out) if size is None else out
