"""Risk-sensitive revenue, the oracle / myopic / perturbed-myopic pricing rules."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .demand import DemandParams, ParamBox
from .estimation import EstimatorState, QuantileEstimate, SingularInformation

__all__ = [
    "CLAMP_MODES",
    "POLICY_KINDS",
    "PolicyConfig",
    "EstimatorUnavailable",
    "risk_revenue",
    "clamp_price",
    "oracle_price",
    "myopic_price",
    "perturbation_delta",
    "warm_start_prices",
    "OraclePolicy",
    "MyopicPolicy",
    "PerturbedMyopicPolicy",
    "make_policy",
]

CLAMP_MODES = ("none", "interval")
POLICY_KINDS = ("oracle", "myopic", "perturbed")


class EstimatorUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 0.1
    rho: float = 0.19
    r: float = 0.25
    clamp: str = "interval"
    warm_start: tuple[float, float] | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha out of (0,1)")
        if not self.rho >= 0.0:
            raise ValueError("rho must be nonnegative")
        if not 0.0 <= self.r < 0.5:
            raise ValueError("r out of [0, 1/2)")
        if self.clamp not in CLAMP_MODES:
            raise ValueError(f"clamp must be one of {CLAMP_MODES}, got {self.clamp!r}")
        if self.warm_start is not None:
            p1, p2 = self.warm_start
            if p1 == p2:
                raise ValueError("warm-start prices must differ")


def risk_revenue(p, c, theta: DemandParams, q):
    """Revenue guaranteed with probability ``1 - alpha`` when ``q`` is the shock quantile."""
    return (c - p) * (theta.a * p + theta.b + q)


def clamp_price(p: float, c: float, mode: str) -> tuple[float, bool]:
    if mode == "none":
        return p, False
    clamped = min(max(p, 0.0), c)
    return clamped, clamped != p


def oracle_price(c: float, theta: DemandParams, q: float, clamp: str = "interval") -> float:
    return clamp_price(c / 2.0 - (theta.b + q) / (2.0 * theta.a), c, clamp)[0]


def myopic_price(c_next: float, theta_hat: DemandParams, q_hat: float, clamp: str = "interval") -> float:
    # same first-order condition as the oracle, with estimates plugged in
    return oracle_price(c_next, theta_hat, q_hat, clamp)


def perturbation_delta(t: int, c_t: float, c_prev: float, r: float) -> float:
    """``sgn(c_t - c_prev) * t**-r`` with ``sgn(0) = +1``."""
    sign = -1.0 if c_t < c_prev else 1.0
    return sign * t ** (-r)


def warm_start_prices(config: PolicyConfig, c1: float, c2: float, c_bar: float) -> tuple[float, float]:
    """Deterministic first two prices.

    ``p1 = c1/2`` and ``p2 = c2/2 + rho' * delta_2``. ``rho'`` is ``rho``
    except when ``rho == 0`` and ``c1 == c2``; then ``0.05 * c_bar`` is used so
    that the two prices differ and the least-squares fit exists at ``t = 2``.
    """
    if config.warm_start is not None:
        return config.warm_start
    rho = config.rho
    if rho == 0.0 and c1 == c2:
        rho = 0.05 * c_bar
    return c1 / 2.0, c2 / 2.0 + rho * perturbation_delta(2, c2, c1, config.r)


class _Policy:
    kind = ""

    def __init__(self, config: PolicyConfig):
        self.config = config
        self.period = 0
        self.last_clamped = False
        # observations behind the estimate that set the last price (0 = none)
        self.last_basis = 0

    def _post(self, price: float, c: float, basis: int) -> float:
        price, self.last_clamped = clamp_price(price, c, self.config.clamp)
        self.last_basis = basis
        return price

    def _advance(self, t_next: int) -> None:
        if t_next != self.period + 1:
            raise ValueError(f"policy at period {self.period} asked for period {t_next}")
        self.period = t_next


class OraclePolicy(_Policy):
    kind = "oracle"

    def __init__(self, config: PolicyConfig, theta: DemandParams, true_q: float):
        super().__init__(config)
        self.theta = theta
        self.true_q = true_q

    def next_price(self, t_next: int, c_next: float, c_prev: float | None = None) -> float:
        self._advance(t_next)
        p = self.theta.b + self.true_q
        return self._post(c_next / 2.0 - p / (2.0 * self.theta.a), c_next, 0)


class _Learning(_Policy):
    def __init__(self, config: PolicyConfig, box: ParamBox, estimator: EstimatorState, c_bar: float):
        super().__init__(config)
        self.box = box
        self.estimator = estimator
        self.c_bar = c_bar
        self._warm = None
        self._c1 = None
        self._fallback: tuple[DemandParams, QuantileEstimate, int] | None = None

    def _estimate(self) -> tuple[DemandParams, QuantileEstimate, int]:
        """Fresh estimate from all data, or the last valid one if the fit is singular."""
        try:
            theta_hat, q_hat = self.estimator.estimate(self.box, self.config.alpha)
        except SingularInformation:
            if self._fallback is None:
                raise EstimatorUnavailable(
                    f"no valid estimate after {self.estimator.t} observations"
                ) from None
            return self._fallback
        self._fallback = (theta_hat, q_hat, self.estimator.t)
        return self._fallback

    def _warm_price(self, t_next: int, c_next: float, c_prev: float | None) -> float:
        if t_next == 1:
            self._c1 = c_next
            return c_next / 2.0
        self._warm = warm_start_prices(self.config, self._c1, c_next, self.c_bar)
        return self._warm[1]

    def _check_data(self, t_next: int) -> None:
        if self.estimator.t != t_next - 1:
            raise ValueError(
                f"estimator holds {self.estimator.t} observations, period {t_next} needs {t_next - 1}"
            )


class MyopicPolicy(_Learning):
    """Greedy plug-in price, re-estimated every period."""

    kind = "myopic"

    def next_price(self, t_next: int, c_next: float, c_prev: float | None = None) -> float:
        self._advance(t_next)
        if t_next <= 2:
            if self.config.warm_start is not None:
                return self._post(self.config.warm_start[t_next - 1], c_next, 0)
            return self._post(self._warm_price(t_next, c_next, c_prev), c_next, 0)
        self._check_data(t_next)
        theta_hat, q_hat, basis = self._estimate()
        return self._post(myopic_price(c_next, theta_hat, q_hat.value, "none"), c_next, basis)


class PerturbedMyopicPolicy(_Learning):
    """Myopic price after odd periods; stored myopic price plus offset after even ones.

    With ``t = t_next - 1``: odd ``t`` refreshes the estimates and posts (and
    stores) the myopic price; even ``t`` posts the stored price shifted by half
    the cost change plus ``rho * delta_{t+1}`` without touching the estimates.
    """

    kind = "perturbed"

    def __init__(self, config: PolicyConfig, box: ParamBox, estimator: EstimatorState, c_bar: float):
        super().__init__(config, box, estimator, c_bar)
        self.stored_price: float | None = None
        self._stored_basis = 0

    def next_price(self, t_next: int, c_next: float, c_prev: float | None = None) -> float:
        self._advance(t_next)
        if t_next <= 2:
            if self.config.warm_start is not None:
                price = self.config.warm_start[t_next - 1]
                self.stored_price = price
            else:
                price = self._warm_price(t_next, c_next, c_prev)
                # the base of the warm-start pair plays the stored myopic price at t = 2
                self.stored_price = c_next / 2.0
            return self._post(price, c_next, 0)
        t = t_next - 1
        if t % 2 == 1:
            self._check_data(t_next)
            theta_hat, q_hat, basis = self._estimate()
            self.stored_price = myopic_price(c_next, theta_hat, q_hat.value, "none")
            self._stored_basis = basis
            return self._post(self.stored_price, c_next, basis)
        offset = 0.5 * (c_next - c_prev) + self.config.rho * perturbation_delta(
            t_next, c_next, c_prev, self.config.r
        )
        return self._post(self.stored_price + offset, c_next, self._stored_basis)


def make_policy(
    kind: str,
    config: PolicyConfig,
    *,
    box: ParamBox,
    estimator: EstimatorState,
    c_bar: float,
    theta: DemandParams,
    true_q: float,
):
    if kind == "oracle":
        return OraclePolicy(config, theta, true_q)
    if kind == "myopic":
        return MyopicPolicy(config, box, estimator, c_bar)
    if kind == "perturbed":
        return PerturbedMyopicPolicy(config, box, estimator, c_bar)
    raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
