"""DP-SGD primitives and a Renyi-DP accountant for the subsampled Gaussian
mechanism.

The privatized batch gradient is

    g_bar = (sum_i Clip(g_i, C) + z) / |B|,   z ~ N(0, C^2 sigma^2 I),

with one joint l2 clip over each sample's full flattened trainable gradient.

Accounting uses the integer-order Renyi bound for the sampled Gaussian
mechanism: at order lambda >= 2 and sampling rate q, a single step costs

    (1/(lambda-1)) * log( sum_{j=0}^{lambda} C(lambda,j) (1-q)^(lambda-j) q^j
                          * exp(j(j-1) / (2 sigma^2)) )

computed in log-space. Steps compose additively in RDP; conversion to
(epsilon, delta) takes the minimum over an integer order grid of
T * rdp(lambda) + log(1/delta)/(lambda - 1). The accountant assumes Poisson
subsampling while the trainer draws fixed-size batches; this standard
approximation is reported by the CLI alongside its outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .linalg import RngStream

__all__ = [
    "DpConfig",
    "RdpCurve",
    "CalibrationError",
    "DEFAULT_ORDERS",
    "clip_grad",
    "privatize_batch",
    "rdp_sampled_gaussian",
    "rdp_curve",
    "epsilon_from_sigma",
    "optimal_order",
    "sigma_for_budget",
]

DEFAULT_ORDERS = tuple(range(2, 257))

SIGMA_SEARCH_LO = 0.3
SIGMA_SEARCH_HI = 64.0
SIGMA_SEARCH_TOL = 1e-3


class CalibrationError(ValueError):
    """The privacy budget cannot be met within the sigma search range."""


@dataclass(frozen=True)
class DpConfig:
    """Clipping norm, noise multiplier and the budget it should meet.

    ``sigma`` may be None, meaning "calibrate from (epsilon, delta, q, steps)
    before training". ``sample_rate`` and ``steps`` may also be None when the
    trainer derives them from its own schedule.
    """

    epsilon: float
    delta: float
    clip: float
    sigma: float | None = None
    sample_rate: float | None = None
    steps: int | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be > 0 when given")
        if self.sample_rate is not None and not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample_rate must be in (0, 1]")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1 when given")


@dataclass(frozen=True)
class RdpCurve:
    """Per-step RDP values on a strictly increasing order grid."""

    orders: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values must align")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly increasing")
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("rdp values must be finite")


def clip_grad(g: np.ndarray, c: float) -> np.ndarray:
    """Rescale g to l2 norm at most c: g * min(1, c / ||g||)."""
    if c <= 0:
        raise ValueError("clip norm must be > 0")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return g.copy()
    return g * min(1.0, c / norm)


def privatize_batch(per_sample_grads, c: float, sigma: float, rng: RngStream) -> np.ndarray:
    """Clip each sample's gradient, sum, add N(0, c^2 sigma^2 I), divide by
    the batch size. Noise is drawn once per call from ``rng``."""
    if c <= 0:
        raise ValueError("clip norm must be > 0")
    grads = [np.asarray(g, dtype=np.float64).ravel() for g in per_sample_grads]
    if not grads:
        raise ValueError("privatize_batch needs a nonempty batch")
    p = grads[0].size
    if any(g.size != p for g in grads):
        raise ValueError("all per-sample gradients must have equal length")
    stacked = np.stack(grads)
    norms = np.linalg.norm(stacked, axis=1)
    scales = np.ones_like(norms)
    positive = norms > 0.0
    scales[positive] = np.minimum(1.0, c / norms[positive])
    total = (stacked * scales[:, None]).sum(axis=0)
    if sigma > 0.0:
        total += rng.normal(p, c * sigma)
    return total / len(grads)


def rdp_sampled_gaussian(q: float, sigma: float, order: int) -> float:
    """Per-step RDP of the sampled Gaussian mechanism at an integer order."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    order = int(order)
    if order < 2:
        raise ValueError("order must be an integer >= 2")
    if q == 1.0:
        # Plain Gaussian mechanism: the binomial sum collapses to its j=order
        # term and the bound is order / (2 sigma^2).
        return order / (2.0 * sigma * sigma)
    j = np.arange(order + 1)
    log_binom = gammaln(order + 1) - gammaln(j + 1) - gammaln(order - j + 1)
    exponents = (
        log_binom
        + (order - j) * math.log1p(-q)
        + j * math.log(q)
        + j * (j - 1) / (2.0 * sigma * sigma)
    )
    return float(logsumexp(exponents)) / (order - 1)


def _rdp_values(q: float, sigma: float, orders: tuple[int, ...]) -> np.ndarray:
    """Vectorized rdp_sampled_gaussian over an integer order grid.

    Builds the full (orders x j) exponent table once, masking j > order with
    -inf so each row's logsumexp matches the scalar routine bit for bit.
    """
    if q == 1.0:
        return np.asarray(orders, dtype=np.float64) / (2.0 * sigma * sigma)
    lam = np.asarray(orders, dtype=np.float64)[:, None]
    j = np.arange(max(orders) + 1, dtype=np.float64)[None, :]
    log_binom = gammaln(lam + 1) - gammaln(j + 1) - gammaln(np.maximum(lam - j, 0) + 1)
    exponents = (
        log_binom
        + (lam - j) * math.log1p(-q)
        + j * math.log(q)
        + j * (j - 1) / (2.0 * sigma * sigma)
    )
    exponents = np.where(j <= lam, exponents, -np.inf)
    return logsumexp(exponents, axis=1) / (lam.ravel() - 1)


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP across an order grid."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    orders = tuple(int(o) for o in orders)
    if any(o < 2 for o in orders):
        raise ValueError("orders must be integers >= 2")
    return RdpCurve(orders=orders, values=tuple(_rdp_values(q, sigma, orders)))


def _epsilon_scan(sigma, q, steps, delta, orders):
    orders = tuple(int(o) for o in orders)
    curve = rdp_curve(q, sigma, orders)
    eps = steps * np.asarray(curve.values) \
        + math.log(1.0 / delta) / (np.asarray(orders, dtype=np.float64) - 1)
    best = int(np.argmin(eps))
    return float(eps[best]), orders[best]


def epsilon_from_sigma(sigma: float, q: float, steps: int, delta: float,
                       orders=DEFAULT_ORDERS) -> float:
    """Smallest (epsilon, delta) conversion over the order grid after
    composing ``steps`` identical sampled-Gaussian steps."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return 0.0
    eps, _ = _epsilon_scan(sigma, q, steps, delta, orders)
    return eps


def optimal_order(sigma: float, q: float, steps: int, delta: float,
                  orders=DEFAULT_ORDERS) -> int:
    """The grid order achieving the epsilon_from_sigma minimum."""
    _, order = _epsilon_scan(sigma, q, max(steps, 1), delta, orders)
    return order


def sigma_for_budget(epsilon: float, delta: float, q: float, steps: int,
                     orders=DEFAULT_ORDERS) -> float:
    """Smallest sigma in [0.3, 64] meeting epsilon, by bisection to 1e-3.

    Raises CalibrationError when even sigma = 64 cannot meet the budget.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    lo, hi = SIGMA_SEARCH_LO, SIGMA_SEARCH_HI
    if epsilon_from_sigma(hi, q, steps, delta, orders) > epsilon:
        raise CalibrationError(
            f"budget epsilon={epsilon} unattainable with sigma <= {hi} "
            f"at q={q}, steps={steps}, delta={delta}"
        )
    if epsilon_from_sigma(lo, q, steps, delta, orders) <= epsilon:
        return lo
    while hi - lo > SIGMA_SEARCH_TOL:
        mid = 0.5 * (lo + hi)
        if epsilon_from_sigma(mid, q, steps, delta, orders) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi
