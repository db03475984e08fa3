"""Server-side aggregation of device updates.

Besides plain averaging this module implements the contextual scheme: given
the round's updates ``dw_k`` (rows of ``G``) and an estimate ``g`` of the
global gradient, choose weights ``alpha`` minimizing

    g_t(alpha) = <g, G^T alpha> + beta/2 * ||G^T alpha||^2,

the smoothness upper bound on the change of the global loss. The minimizer
is characterized by ``G (g + beta G^T alpha) = 0``, i.e. ``g + beta G^T alpha``
lies in the nullspace of ``G``. The default solver follows that
characterization literally: it builds a nullspace basis ``E`` and solves the
``n``-equation system ``beta G^T alpha - E^T x = -g`` for ``(alpha, x)``. The
``K x K`` normal equations ``beta G G^T alpha = -G g`` are kept as an
independent route, used for large ``n`` and for cross-checking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ctxfed import linalg
from ctxfed.data import FederatedDataset
from ctxfed.device import DeviceUpdate
from ctxfed.errors import AggregationError, DegenerateError, InvalidInputError
from ctxfed.model import SoftmaxModel, grad_weights

log = logging.getLogger(__name__)

DEFAULT_DENSE_LIMIT = 2000
NORMAL_RCOND = 1e-12


@dataclass(frozen=True)
class SmoothnessConfig:
    beta: float

    def __post_init__(self):
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise InvalidInputError(f"beta must be positive, got {self.beta}")

    @classmethod
    def from_learning_rate(cls, learning_rate: float) -> SmoothnessConfig:
        return cls(1.0 / learning_rate)


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    vector: np.ndarray
    k2_used: int
    source_devices: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class AggregationWeights:
    alphas: dict[int, float]
    combined_delta: np.ndarray
    bound_value: float | None = None
    stationarity_residual: float | None = None
    matrix_rank: int | None = None
    route: str = ""

    def alpha_vector(self) -> np.ndarray:
        return np.array(list(self.alphas.values()))


def _stack(updates: Sequence[DeviceUpdate]) -> np.ndarray:
    if not updates:
        raise InvalidInputError("no updates to aggregate")
    dims = {u.delta.shape for u in updates}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise InvalidInputError(f"updates have mismatched shapes {sorted(dims)}")
    return linalg.as_matrix(np.stack([u.delta for u in updates]), "update matrix")


def average(updates: Sequence[DeviceUpdate], weighted: bool = False) -> np.ndarray:
    """Plain (``1/K``) or sample-count weighted mean of the deltas."""
    g = _stack(updates)
    if weighted:
        counts = np.array([u.num_samples for u in updates], dtype=np.float64)
        if counts.sum() <= 0:
            raise InvalidInputError("sample counts must sum to a positive number")
        return (counts / counts.sum()) @ g
    return g.mean(axis=0)


# -- global gradient ---------------------------------------------------------


def local_gradients(
    model: SoftmaxModel, data: FederatedDataset, device_ids: Sequence[int]
) -> list[np.ndarray]:
    w = model.weights
    return [
        grad_weights(w, data.devices[k].augmented, data.devices[k].labels).ravel()
        for k in device_ids
    ]


def estimate_global_gradient(
    model: SoftmaxModel,
    data: FederatedDataset,
    k2: int,
    round_devices: Sequence[int],
    rng: np.random.Generator,
) -> GradientEstimate:
    """Estimate the global gradient from ``k2`` devices.

    ``k2 = 0`` reuses the round's devices; ``k2 = N`` uses every device and is
    exact. Gradients are combined with weights proportional to sample counts,
    which is the plain mean when all devices hold the same amount of data.
    """
    n_dev = data.num_devices
    if not 0 <= k2 <= n_dev:
        raise InvalidInputError(f"k2 must be in [0, {n_dev}], got {k2}")
    if k2 == 0:
        if len(round_devices) == 0:
            raise InvalidInputError("k2 = 0 needs the round's devices")
        sources = sorted(int(k) for k in round_devices)
    elif k2 == n_dev:
        sources = list(range(n_dev))
    else:
        sources = sorted(int(k) for k in rng.choice(n_dev, size=k2, replace=False))
    grads = np.stack(local_gradients(model, data, sources))
    counts = data.sizes[sources].astype(np.float64)
    vector = (counts / counts.sum()) @ grads
    return GradientEstimate(vector, k2, tuple(sources))


# -- contextual --------------------------------------------------------------


def bound_value(grad: np.ndarray, g: np.ndarray, alphas: np.ndarray, beta: float) -> float:
    """``g_t(alpha)`` for update matrix ``g`` (rows are deltas)."""
    combined = np.asarray(alphas) @ g
    return float(grad @ combined + 0.5 * beta * (combined @ combined))


def stationarity_residual(
    grad: np.ndarray, g: np.ndarray, alphas: np.ndarray, beta: float
) -> float:
    """``max_k |<dw_k, grad + beta * sum_j alpha_j dw_j>|``."""
    return float(np.max(np.abs(g @ (grad + beta * (alphas @ g))), initial=0.0))


def nullspace_alphas(
    grad: np.ndarray, g: np.ndarray, beta: float, tol: float = linalg.DEFAULT_RANK_TOL
) -> tuple[np.ndarray, int]:
    """Solve ``grad + beta G^T alpha = E^T x`` with ``E`` a nullspace basis of ``G``.

    When ``G`` has full row rank the system is ``n x n``; otherwise it has more
    unknowns than equations and the minimum-norm solution is taken, which
    gives zero weight to updates in the span of the others' null directions.
    """
    k, n = g.shape
    basis = linalg.nullspace_basis(g, tol)
    rank = n - basis.shape[0]
    system = np.hstack([beta * g.T, -basis.T])
    if system.shape[1] == n:
        sol = linalg.solve_square(system, -grad)
    else:
        sol = linalg.least_squares(system, -grad)
    return sol[:k], rank


def normal_equation_alphas(
    grad: np.ndarray, g: np.ndarray, beta: float, rcond: float = NORMAL_RCOND
) -> tuple[np.ndarray, int]:
    """Min-norm solution of ``beta G G^T alpha = -G grad``."""
    gram = g @ g.T
    sol, _, rank, _ = np.linalg.lstsq(beta * gram, -(g @ grad), rcond=rcond)
    return sol, int(rank)


def _weights(updates, alphas, g) -> dict[int, float]:
    return {u.device_id: float(a) for u, a in zip(updates, alphas)}


def _solve(grad_vec, g, beta, route, dense_limit, tol):
    n = g.shape[1]
    if route == "auto":
        route = "nullspace" if n <= dense_limit else "normal"
        if route == "normal":
            log.info("n=%d exceeds dense limit %d, using normal equations", n, dense_limit)
    if route == "nullspace":
        alphas, rank = nullspace_alphas(grad_vec, g, beta, tol)
    elif route == "normal":
        alphas, rank = normal_equation_alphas(grad_vec, g, beta)
    else:
        raise InvalidInputError(f"unknown route {route!r}")
    if not np.all(np.isfinite(alphas)):
        raise AggregationError("aggregation solve produced non-finite weights")
    return alphas, rank, route


def contextual_weights(
    grad: GradientEstimate | np.ndarray,
    updates: Sequence[DeviceUpdate],
    cfg: SmoothnessConfig,
    route: str = "auto",
    dense_limit: int = DEFAULT_DENSE_LIMIT,
    tol: float = linalg.DEFAULT_RANK_TOL,
) -> AggregationWeights:
    """Weights minimizing the context-dependent bound ``g_t``.

    ``route`` is ``"nullspace"``, ``"normal"`` or ``"auto"`` (nullspace up
    to ``dense_limit`` parameters). An all-zero update set yields zero
    weights and a zero bound.
    """
    grad_vec = linalg.as_vector(getattr(grad, "vector", grad), "gradient")
    g = _stack(updates)
    k, n = g.shape
    if grad_vec.shape[0] != n:
        raise InvalidInputError(f"gradient has dim {grad_vec.shape[0]}, updates have {n}")
    if k > n:
        raise InvalidInputError(f"{k} updates exceed parameter dimension {n}")
    if not np.any(g):
        return AggregationWeights(
            _weights(updates, np.zeros(k), g), np.zeros(n), 0.0, 0.0, 0, "noop"
        )
    alphas, rank, used = _solve(grad_vec, g, cfg.beta, route, dense_limit, tol)
    return AggregationWeights(
        alphas=_weights(updates, alphas, g),
        combined_delta=alphas @ g,
        bound_value=bound_value(grad_vec, g, alphas, cfg.beta),
        stationarity_residual=stationarity_residual(grad_vec, g, alphas, cfg.beta),
        matrix_rank=rank,
        route=used,
    )


def expected_factors(k: int, pool_size: int) -> tuple[float, float]:
    """Linear and quadratic scale factors of the expected bound."""
    linear = k / pool_size
    quadratic = k * (k - 1) / (pool_size * (pool_size - 1)) if pool_size > 1 else 0.0
    return linear, quadratic


def contextual_expected_weights(
    grad: GradientEstimate | np.ndarray,
    updates: Sequence[DeviceUpdate],
    cfg: SmoothnessConfig,
    k: int,
    pool_size: int,
    route: str = "auto",
    dense_limit: int = DEFAULT_DENSE_LIMIT,
    tol: float = linalg.DEFAULT_RANK_TOL,
) -> AggregationWeights:
    """Weights for the bound averaged over random selection of ``k`` of ``pool_size``.

    Stationarity reads ``<dw_j, a g + b beta G^T alpha> = 0`` with
    ``a = k/N'`` and ``b = k(k-1)/(N'(N'-1))``, which is the plain contextual
    system with ``beta`` rescaled by ``b/a``.
    """
    if len(updates) != pool_size:
        raise InvalidInputError(f"expected {pool_size} pool updates, got {len(updates)}")
    if not 1 <= k <= pool_size:
        raise InvalidInputError(f"k must be in [1, {pool_size}], got {k}")
    linear, quadratic = expected_factors(k, pool_size)
    if quadratic == 0.0:
        raise DegenerateError("k = 1 leaves a linear objective with no minimizer")
    grad_vec = linalg.as_vector(getattr(grad, "vector", grad), "gradient")
    beta_eff = cfg.beta * quadratic / linear
    inner_w = contextual_weights(grad_vec, updates, SmoothnessConfig(beta_eff), route, dense_limit, tol)
    g = _stack(updates)
    alphas = inner_w.alpha_vector()
    combined = inner_w.combined_delta
    value = float(linear * (grad_vec @ combined) + 0.5 * cfg.beta * quadratic * (combined @ combined))
    resid = float(
        np.max(np.abs(g @ (linear * grad_vec + cfg.beta * quadratic * combined)), initial=0.0)
    )
    return AggregationWeights(
        alphas=_weights(updates, alphas, g),
        combined_delta=combined,
        bound_value=value,
        stationarity_residual=resid,
        matrix_rank=inner_w.matrix_rank,
        route=inner_w.route,
    )


# -- inner-product weighting -------------------------------------------------


def folb_weights(
    grad: GradientEstimate | np.ndarray,
    updates: Sequence[DeviceUpdate],
    local_grads: Sequence[np.ndarray],
) -> AggregationWeights:
    """Weight each update by its local gradient's inner product with ``grad``.

    ``alpha_k = <grad_k, grad> / sum_j |<grad_j, grad>|``; the sign is kept so
    that devices whose gradient opposes the global one are subtracted. Falls
    back to ``1/K`` when every inner product is zero.
    """
    if len(updates) != len(local_grads):
        raise InvalidInputError("need one local gradient per update")
    grad_vec = linalg.as_vector(getattr(grad, "vector", grad), "gradient")
    g = _stack(updates)
    lg = linalg.as_matrix(np.stack(local_grads), "local gradients")
    if lg.shape[1] != grad_vec.shape[0] or g.shape[1] != grad_vec.shape[0]:
        raise InvalidInputError("gradient dimensions do not match")
    ips = lg @ grad_vec
    denom = np.abs(ips).sum()
    if denom == 0.0:
        alphas = np.full(len(updates), 1.0 / len(updates))
    else:
        alphas = ips / denom
    return AggregationWeights(_weights(updates, alphas, g), alphas @ g, route="folb")


def apply(global_params, weights: AggregationWeights | np.ndarray):
    """``w + sum_k alpha_k dw_k``; keeps the type of ``global_params``."""
    delta = weights.combined_delta if isinstance(weights, AggregationWeights) else weights
    delta = linalg.as_vector(delta, "delta")
    if isinstance(global_params, SoftmaxModel):
        if delta.shape != global_params.params.shape:
            raise InvalidInputError("delta and model dimensions differ")
        return global_params.with_params(global_params.params + delta)
    params = linalg.as_vector(global_params, "params")
    if delta.shape != params.shape:
        raise InvalidInputError("delta and params dimensions differ")
    return params + delta
