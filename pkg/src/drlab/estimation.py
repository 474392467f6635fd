"""Online least-squares learning of the demand model and the residual quantile."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .demand import DemandParams, ParamBox

__all__ = [
    "SingularInformation",
    "QuantileEstimate",
    "EstimatorState",
    "truncate",
    "empirical_quantile",
    "quantile_error_chain",
]


class SingularInformation(ArithmeticError):
    """The 2x2 information matrix is (numerically) singular."""


@dataclass(frozen=True)
class QuantileEstimate:
    value: float
    index: int  # 1-based order-statistic rank
    price: float  # price of the observation that carries the selected residual


def truncate(theta: DemandParams, box: ParamBox) -> DemandParams:
    """Euclidean projection onto the parameter box (componentwise clamp)."""
    return box.clamp(theta)


def empirical_quantile(values, alpha: float, prices=None) -> QuantileEstimate:
    """Order statistic of rank ``ceil(t * alpha)``.

    Ties are resolved as a stable sort would: among equal values, earlier
    observations rank first. ``prices`` (same length as ``values``) supplies
    the price paired with the selected observation; NaN when omitted.
    """
    values = np.asarray(values, dtype=float)
    t = values.size
    if t == 0:
        raise ValueError("empirical quantile of an empty sample")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha out of (0,1]: {alpha!r}")
    # guard ceil against t*alpha landing a hair above an integer
    rank = min(t, max(1, math.ceil(t * alpha - 1e-9 * t * alpha)))
    v = float(np.partition(values, rank - 1)[rank - 1])
    below = int(np.count_nonzero(values < v))
    ties = np.flatnonzero(values == v)
    k = int(ties[rank - below - 1])
    price = float(prices[k]) if prices is not None else math.nan
    return QuantileEstimate(v, rank, price)


class EstimatorState:
    """Price/demand history with the running sums of the normal equations.

    ``estimate`` caches the truncated estimate and residual quantile for the
    current observation count; any ``observe`` invalidates the cache.
    """

    def __init__(self, capacity: int = 1024):
        self._p = np.empty(capacity)
        self._d = np.empty(capacity)
        self.t = 0
        self.sum_p = 0.0
        self.sum_p2 = 0.0
        self.sum_d = 0.0
        self.sum_pd = 0.0
        self._cache = None

    @property
    def prices(self) -> np.ndarray:
        return self._p[: self.t]

    @property
    def demands(self) -> np.ndarray:
        return self._d[: self.t]

    def observe(self, p: float, d: float) -> None:
        if self.t == self._p.size:
            self._p = np.resize(self._p, 2 * self._p.size)
            self._d = np.resize(self._d, 2 * self._d.size)
        self._p[self.t] = p
        self._d[self.t] = d
        self.t += 1
        self.sum_p += p
        self.sum_p2 += p * p
        self.sum_d += d
        self.sum_pd += p * d
        self._cache = None

    def lse(self) -> DemandParams:
        """Unconstrained least-squares fit of ``D = a p + b``."""
        t = self.t
        det = t * self.sum_p2 - self.sum_p**2
        if t < 2 or det <= 1e-12 * max(1.0, t * self.sum_p2):
            raise SingularInformation(f"information matrix singular at t={t} (det={det:.3e})")
        a = (t * self.sum_pd - self.sum_p * self.sum_d) / det
        b = (self.sum_p2 * self.sum_d - self.sum_p * self.sum_pd) / det
        return DemandParams(a, b)

    def residuals(self, theta: DemandParams) -> np.ndarray:
        return self.demands - (theta.a * self.prices + theta.b)

    def estimate(self, box: ParamBox, alpha: float) -> tuple[DemandParams, QuantileEstimate]:
        """Truncated LSE and the residual ``alpha``-quantile from all data so far."""
        if self._cache is not None and self._cache[0] == self.t:
            return self._cache[1], self._cache[2]
        theta_hat = truncate(self.lse(), box)
        q_hat = empirical_quantile(self.residuals(theta_hat), alpha, self.prices)
        self._cache = (self.t, theta_hat, q_hat)
        return theta_hat, q_hat

    def price_dispersion(self) -> float:
        """Sum of squared deviations of the prices from their running mean."""
        if self.t == 0:
            return 0.0
        return max(0.0, self.sum_p2 - self.sum_p**2 / self.t)

    def info_min_eigenvalue(self) -> float:
        """Smallest eigenvalue of ``[[sum p^2, sum p], [sum p, t]]``."""
        trace = self.t + self.sum_p2
        det = self.t * self.price_dispersion()
        if det <= 0.0:
            return 0.0
        disc = math.sqrt(max(0.0, trace * trace - 4.0 * det))
        # det / lambda_max avoids cancellation in (trace - disc) / 2
        return 2.0 * det / (trace + disc)


def quantile_error_chain(
    theta_hat: DemandParams,
    q_hat: QuantileEstimate,
    theta: DemandParams,
    true_q: float,
    shock_quantile: float,
) -> tuple[float, float, float]:
    """Terms of ``|q_hat - q| <= |F_t^-1 - q| + sqrt(1 + p_(i)^2) * |theta_hat - theta|``.

    ``shock_quantile`` is the empirical quantile of the true shocks seen so far.
    """
    lhs = abs(q_hat.value - true_q)
    term1 = abs(shock_quantile - true_q)
    term2 = math.sqrt(1.0 + q_hat.price**2) * theta_hat.distance(theta)
    return lhs, term1, term2
