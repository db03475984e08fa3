"""The federated training loop and run-level diagnostics."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ctxfed import aggregation as agg
from ctxfed.data import FederatedDataset
from ctxfed.device import LocalConfig, draw_epochs, local_update
from ctxfed.errors import AggregationError, DivergedError, InvalidInputError
from ctxfed.model import SoftmaxModel, accuracy, loss, smoothness_bound

SCHEMES = (
    "fedavg",
    "fedprox",
    "folb",
    "fedavg_contextual",
    "fedprox_contextual",
    "contextual_expected",
)
NO_PROXIMAL = ("fedavg", "fedavg_contextual")


class RunError(RuntimeError):
    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"round {round_index}: {cause}")
        self.round_index = round_index
        self.cause = cause


@dataclass(frozen=True)
class RunConfig:
    scheme: str
    rounds: int = 100
    devices_per_round: int = 10
    k2: int | None = None  # None: every device
    learning_rate: float = 0.01
    batch_size: int = 10
    proximal_mu: float = 0.0
    min_epochs: int = 1
    max_epochs: int = 20
    beta_override: float | None = None
    seed: int = 0
    eval_every: int = 1
    weighted_average: bool = False
    pool_size: int | None = None
    route: str = "auto"
    dense_limit: int = agg.DEFAULT_DENSE_LIMIT

    @property
    def beta(self) -> float:
        return self.beta_override if self.beta_override is not None else 1.0 / self.learning_rate

    def problems(self, num_devices: int | None = None) -> list[str]:
        out = []
        if self.scheme not in SCHEMES:
            out.append(f"unknown scheme {self.scheme!r} (choose from {', '.join(SCHEMES)})")
        if self.rounds < 1:
            out.append("rounds must be >= 1")
        if self.devices_per_round < 1:
            out.append("devices_per_round must be >= 1")
        if num_devices is not None and self.devices_per_round > num_devices:
            out.append(
                f"devices_per_round={self.devices_per_round} exceeds the {num_devices} devices"
            )
        if self.k2 is not None:
            if self.k2 < 0:
                out.append("k2 must be >= 0")
            elif num_devices is not None and self.k2 > num_devices:
                out.append(f"k2={self.k2} exceeds the {num_devices} devices")
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.proximal_mu < 0:
            out.append("proximal_mu must be >= 0")
        if self.scheme in NO_PROXIMAL and self.proximal_mu != 0:
            out.append(f"proximal_mu must be 0 for scheme {self.scheme}")
        if not 0 <= self.min_epochs <= self.max_epochs:
            out.append("epoch range must satisfy 0 <= min_epochs <= max_epochs")
        if self.beta_override is not None and not self.beta_override > 0:
            out.append("beta_override must be > 0")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        if self.route not in ("auto", "nullspace", "normal"):
            out.append(f"unknown route {self.route!r}")
        if self.scheme == "contextual_expected":
            if self.pool_size is None:
                out.append("contextual_expected needs pool_size")
            else:
                if self.pool_size < self.devices_per_round:
                    out.append("pool_size must be >= devices_per_round")
                if num_devices is not None and self.pool_size > num_devices:
                    out.append(f"pool_size={self.pool_size} exceeds the {num_devices} devices")
            if self.devices_per_round < 2:
                out.append("contextual_expected needs devices_per_round >= 2")
        return out

    def validate(self, num_devices: int | None = None) -> None:
        problems = self.problems(num_devices)
        if problems:
            raise InvalidInputError("; ".join(problems))


@dataclass(eq=False)
class RoundRecord:
    round: int
    train_loss: float | None
    test_accuracy: float | None
    combined_delta_norm: float
    selected_devices: tuple[int, ...]
    epochs_per_device: dict[int, int]
    alphas: dict[int, float] | None = None
    bound_value: float | None = None
    params: np.ndarray | None = None
    wall_time: float = 0.0


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the master seed."""
    spawn_key = (zlib.crc32(name.encode()),) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))


def _shuffle_seed(seed: int, round_index: int, device: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=seed, spawn_key=(zlib.crc32(b"shuffle"), round_index, device)
    )


def run(
    cfg: RunConfig,
    data: FederatedDataset,
    initial: np.ndarray | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> list[RoundRecord]:
    """Run ``cfg.rounds`` rounds and return one record per round.

    Device selection, epoch draws, gradient-estimation sampling, pool
    sampling and mini-batch shuffles each use their own stream derived from
    ``cfg.seed``, so runs that differ only in scheme or ``k2`` see the same
    devices with the same epoch counts.
    """
    n_dev = data.num_devices
    cfg.validate(n_dev)
    model = SoftmaxModel(data.num_classes, data.num_features, initial)
    k = cfg.devices_per_round
    k2 = n_dev if cfg.k2 is None else cfg.k2
    smooth = agg.SmoothnessConfig(cfg.beta)
    select_rng = stream(cfg.seed, "selection")
    epoch_rng = stream(cfg.seed, "epochs")
    k2_rng = stream(cfg.seed, "k2")
    pool_rng = stream(cfg.seed, "pool")
    train_eval = data.pooled
    test_eval = data.test if data.test is not None and len(data.test) else train_eval

    records = []
    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        selected = tuple(sorted(int(i) for i in select_rng.choice(n_dev, size=k, replace=False)))
        epochs = draw_epochs(cfg.min_epochs, cfg.max_epochs, epoch_rng, size=n_dev)
        participants = list(selected)
        if cfg.scheme == "contextual_expected":
            rest = np.setdiff1d(np.arange(n_dev), selected)
            extra = pool_rng.choice(rest, size=cfg.pool_size - k, replace=False)
            participants = sorted(participants + [int(i) for i in extra])
        try:
            updates = [
                local_update(
                    model,
                    data.devices[i],
                    LocalConfig(cfg.learning_rate, cfg.batch_size, cfg.proximal_mu, int(epochs[i])),
                    seed=_shuffle_seed(cfg.seed, t, i),
                    device_id=i,
                )
                for i in participants
            ]
            weights = _aggregate(cfg, model, data, updates, selected, k2, k2_rng, smooth)
        except (AggregationError, DivergedError, np.linalg.LinAlgError) as exc:
            raise RunError(t, exc) from exc
        model = agg.apply(model, weights.combined_delta)
        if not np.all(np.isfinite(model.params)):
            raise RunError(t, AggregationError("aggregated parameters are not finite"))

        evaluate = t % cfg.eval_every == 0 or t == cfg.rounds
        train_loss = None
        if evaluate:
            with np.errstate(over="ignore", invalid="ignore"):
                train_loss = loss(model, train_eval)
            if not np.isfinite(train_loss):
                raise RunError(t, DivergedError("training loss is not finite", model.params))
        rec = RoundRecord(
            round=t,
            train_loss=train_loss,
            test_accuracy=accuracy(model, test_eval) if evaluate else None,
            combined_delta_norm=float(np.linalg.norm(weights.combined_delta)),
            selected_devices=selected,
            epochs_per_device={i: int(epochs[i]) for i in selected},
            alphas={i: weights.alphas[i] for i in selected},
            bound_value=weights.bound_value,
            params=model.params,
            wall_time=time.perf_counter() - start,
        )
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    return records


def _aggregate(cfg, model, data, updates, selected, k2, k2_rng, smooth):
    scheme = cfg.scheme
    if scheme in ("fedavg", "fedprox"):
        delta = agg.average(updates, weighted=cfg.weighted_average)
        if cfg.weighted_average:
            total = sum(u.num_samples for u in updates)
            alphas = {u.device_id: u.num_samples / total for u in updates}
        else:
            alphas = {u.device_id: 1.0 / len(updates) for u in updates}
        return agg.AggregationWeights(alphas, delta, route="average")

    grad = agg.estimate_global_gradient(model, data, k2, selected, k2_rng)
    if scheme == "folb":
        local = agg.local_gradients(model, data, [u.device_id for u in updates])
        return agg.folb_weights(grad, updates, local)
    if scheme == "contextual_expected":
        pool = agg.contextual_expected_weights(
            grad, updates, smooth, len(selected), len(updates), cfg.route, cfg.dense_limit
        )
        alphas = {i: pool.alphas[i] for i in selected}
        chosen = [u for u in updates if u.device_id in alphas]
        delta = np.array([alphas[u.device_id] for u in chosen]) @ np.stack(
            [u.delta for u in chosen]
        )
        return agg.AggregationWeights(
            alphas, delta, pool.bound_value, pool.stationarity_residual, pool.matrix_rank, pool.route
        )
    return agg.contextual_weights(grad, updates, smooth, cfg.route, cfg.dense_limit)


def rounds_to_accuracy(records: Sequence[RoundRecord], level: float) -> int | None:
    """First round whose test accuracy reaches ``level``."""
    if not records:
        raise InvalidInputError("no records")
    for rec in records:
        if rec.test_accuracy is not None and rec.test_accuracy >= level:
            return rec.round
    return None


def rounds_to_loss(records: Sequence[RoundRecord], level: float) -> int | None:
    """First round whose training loss is at or below ``level``."""
    for rec in records:
        if rec.train_loss is not None and rec.train_loss <= level:
            return rec.round
    return None


@dataclass(frozen=True)
class DescentCheck:
    round: int
    lhs: float
    rhs: float
    holds: bool


def verify_descent(
    records: Sequence[RoundRecord],
    data: FederatedDataset,
    cfg: RunConfig,
    initial: np.ndarray | None = None,
    rel_tol: float = 1e-9,
) -> list[DescentCheck]:
    """Compare each round's loss drop with ``beta/2 * ||combined delta||^2``.

    Only meaningful for contextual runs with exact gradients (``k2 = N``) and
    ``beta_override`` at or above the loss's smoothness constant; for smaller
    ``beta`` violations are reported, not raised.
    """
    pooled = data.pooled
    prev = SoftmaxModel(data.num_classes, data.num_features, initial)
    f_prev = loss(prev, pooled)
    beta = cfg.beta
    out = []
    for rec in records:
        if rec.params is None:
            raise InvalidInputError(f"round {rec.round} has no parameters recorded")
        f_next = loss(prev.with_params(rec.params), pooled)
        lhs = f_prev - f_next
        rhs = 0.5 * beta * rec.combined_delta_norm**2
        out.append(DescentCheck(rec.round, lhs, rhs, lhs >= rhs - rel_tol * (1 + abs(f_prev))))
        prev = prev.with_params(rec.params)
        f_prev = f_next
    return out


def certified_beta(data: FederatedDataset) -> float:
    return smoothness_bound(data.pooled)
