"""Episode simulation, Monte Carlo replication, regret and bound checks."""

from __future__ import annotations

import bisect
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import ExperimentConfig
from .demand import (
    DemandModel,
    DemandParams,
    ParamBox,
    ShockDistribution,
    make_population,
    normal_approx_quantile,
    price_bound,
)
from .estimation import EstimatorState, SingularInformation
from .policy import PolicyConfig, make_policy, oracle_price, perturbation_delta, risk_revenue

log = logging.getLogger(__name__)

__all__ = [
    "Scenario",
    "EpisodeTrace",
    "EpisodeError",
    "CheckResult",
    "MonteCarloSummary",
    "run_episode",
    "realized_regret",
    "revenue_gap",
    "lemma2_lower_bound",
    "running_empirical_quantile",
    "check_lemma2",
    "check_price_error_bound",
    "check_quantile_chain",
    "price_error_constants",
    "dkw_experiment",
    "dkw_bound",
    "run_monte_carlo",
    "loglog_slope",
    "mse_decay_check",
    "replication_seed",
    "seed_stream",
    "trace_checks",
    "worker_count",
    "DkwCell",
]


class EpisodeError(RuntimeError):
    def __init__(self, period: int, cause: Exception):
        super().__init__(f"period {period}: {cause}")
        self.period = period
        self.cause = cause


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything fixed across the periods of an episode."""

    model: DemandModel
    costs: np.ndarray
    c_bar: float
    policy: PolicyConfig
    true_q: float
    digest: str = ""

    @property
    def horizon(self) -> int:
        return len(self.costs)

    @property
    def shock_support(self) -> tuple[float, float]:
        return self.model.shock.support

    @property
    def p_bar(self) -> float:
        lo, hi = self.shock_support
        return price_bound(self.model.box, self.c_bar, lo, hi)

    def with_model(self, model: DemandModel) -> "Scenario":
        return Scenario(model, self.costs, self.c_bar, self.policy, self.true_q, self.digest)

    @classmethod
    def from_config(cls, config: ExperimentConfig, population_seed=None, true_q: float | None = None):
        """Build the world; population mode draws customers from ``population_seed``."""
        box = config.param_box()
        if config.model.kind == "population":
            rng = np.random.default_rng(seed_stream(config.run.seed, 0) if population_seed is None else population_seed)
            model = DemandModel.from_population(make_population(config.population_spec(), rng), box)
        else:
            model = DemandModel(DemandParams(config.model.a, config.model.b), box, config.shock_law())
        if true_q is None:
            true_q = model.shock.quantile(config.policy.alpha)
        seq = config.costs()
        return cls(model, seq.values(config.run.horizon), seq.bound, config.policy_config(), true_q, config.digest())


def seed_stream(master_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=key)


def replication_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Stream for replication ``rep``; shared by every policy so shocks are paired."""
    return seed_stream(master_seed, 1, rep)


@dataclass
class EpisodeTrace:
    kind: str
    theta: DemandParams
    true_q: float
    p_bar: float
    alpha: float
    rho: float
    r: float
    t: np.ndarray
    c: np.ndarray
    p: np.ndarray
    p_star: np.ndarray
    demand: np.ndarray
    shock: np.ndarray
    a_hat: np.ndarray  # estimate from data through t (NaN while unavailable)
    b_hat: np.ndarray
    q_hat: np.ndarray
    q_price: np.ndarray  # price paired with the selected residual
    lmin: np.ndarray
    J: np.ndarray
    L: np.ndarray
    clamped: np.ndarray
    basis: np.ndarray  # observations behind the estimate that set p_t
    seed: object = None
    digest: str = ""

    def __len__(self) -> int:
        return len(self.t)

    @property
    def theta_sq_err(self) -> np.ndarray:
        return (self.a_hat - self.theta.a) ** 2 + (self.b_hat - self.theta.b) ** 2


def lemma2_lower_bound(costs: np.ndarray, rho: float, r: float) -> np.ndarray:
    """``(rho^2 floor(t/2)^(1-2r) + sum_{k<=floor(t/2)} (c_2k - c_2k-1)^2) / 8`` for t = 1..T."""
    T = len(costs)
    half = np.arange(1, T + 1) // 2
    diffs = np.diff(costs)[0::2] ** 2  # c_2 - c_1, c_4 - c_3, ...
    csum = np.concatenate(([0.0], np.cumsum(diffs)))
    return (rho**2 * half.astype(float) ** (1.0 - 2.0 * r) + csum[half]) / 8.0


def run_episode(scenario: Scenario, kind: str, seed=None, shocks: np.ndarray | None = None) -> EpisodeTrace:
    """Simulate one episode of ``kind`` ("oracle", "myopic" or "perturbed").

    Shocks are drawn up front from ``seed`` (they never depend on prices), so
    every policy run with the same seed faces the same shock sequence.
    """
    model, costs, cfg = scenario.model, scenario.costs, scenario.policy
    T = scenario.horizon
    if shocks is None:
        shocks = model.shock.sample(np.random.default_rng(seed), T)
    est = EstimatorState(capacity=T)
    policy = make_policy(
        kind, cfg, box=model.box, estimator=est, c_bar=scenario.c_bar, theta=model.params, true_q=scenario.true_q
    )
    a, b = model.params
    p = np.empty(T)
    d = np.empty(T)
    a_hat = np.full(T, np.nan)
    b_hat = np.full(T, np.nan)
    q_hat = np.full(T, np.nan)
    q_price = np.full(T, np.nan)
    lmin = np.empty(T)
    J = np.empty(T)
    clamped = np.zeros(T, dtype=bool)
    basis = np.zeros(T, dtype=np.int64)
    c_prev = None
    for i in range(T):
        t = i + 1
        c = float(costs[i])
        try:
            price = policy.next_price(t, c, c_prev)
            demand = a * price + b + shocks[i]
            est.observe(price, demand)
            p[i], d[i] = price, demand
            clamped[i] = policy.last_clamped
            basis[i] = policy.last_basis
            lmin[i] = est.info_min_eigenvalue()
            J[i] = est.price_dispersion()
            if t >= 2:
                try:
                    th, qh = est.estimate(model.box, cfg.alpha)
                except SingularInformation:
                    pass
                else:
                    a_hat[i], b_hat[i], q_hat[i], q_price[i] = th.a, th.b, qh.value, qh.price
        except Exception as exc:
            raise EpisodeError(t, exc) from exc
        c_prev = c
    p_star = np.array([oracle_price(float(c), model.params, scenario.true_q, cfg.clamp) for c in costs])
    L = lemma2_lower_bound(costs, cfg.rho, cfg.r) if kind == "perturbed" else np.full(T, np.nan)
    return EpisodeTrace(
        kind=kind,
        theta=model.params,
        true_q=scenario.true_q,
        p_bar=scenario.p_bar,
        alpha=cfg.alpha,
        rho=cfg.rho,
        r=cfg.r,
        t=np.arange(1, T + 1),
        c=np.asarray(costs, dtype=float),
        p=p,
        p_star=p_star,
        demand=d,
        shock=np.asarray(shocks, dtype=float),
        a_hat=a_hat,
        b_hat=b_hat,
        q_hat=q_hat,
        q_price=q_price,
        lmin=lmin,
        J=J,
        L=L,
        clamped=clamped,
        basis=basis,
        seed=seed,
        digest=scenario.digest,
    )


# --------------------------------------------------------------------------
# Regret
# --------------------------------------------------------------------------


def realized_regret(trace: EpisodeTrace) -> np.ndarray:
    """Cumulative ``a * sum_k (p_k - p*_k)^2``."""
    return trace.theta.a * np.cumsum((trace.p - trace.p_star) ** 2)


def revenue_gap(trace: EpisodeTrace) -> np.ndarray:
    """Cumulative oracle-minus-policy risk-sensitive revenue, computed directly."""
    opt = risk_revenue(trace.p_star, trace.c, trace.theta, trace.true_q)
    got = risk_revenue(trace.p, trace.c, trace.theta, trace.true_q)
    return np.cumsum(opt - got)


# --------------------------------------------------------------------------
# Exact-inequality checks
# --------------------------------------------------------------------------


def _tol(bound) -> np.ndarray:
    return 1e-9 * (1.0 + np.abs(bound))


@dataclass
class CheckResult:
    name: str
    periods: int = 0
    violations: int = 0
    min_slack: float = math.inf
    max_slack: float = -math.inf
    max_bound: float = -math.inf

    def add(self, lhs: np.ndarray, rhs: np.ndarray) -> "CheckResult":
        """Record periods where ``lhs <= rhs`` should hold."""
        lhs, rhs = np.asarray(lhs, float), np.asarray(rhs, float)
        if lhs.size:
            slack = rhs - lhs
            self.periods += int(lhs.size)
            self.violations += int(np.count_nonzero(slack < -_tol(rhs)))
            self.min_slack = min(self.min_slack, float(slack.min()))
            self.max_slack = max(self.max_slack, float(slack.max()))
            self.max_bound = max(self.max_bound, float(rhs.max()))
        return self

    def merge(self, other: "CheckResult") -> "CheckResult":
        self.periods += other.periods
        self.violations += other.violations
        self.min_slack = min(self.min_slack, other.min_slack)
        self.max_slack = max(self.max_slack, other.max_slack)
        self.max_bound = max(self.max_bound, other.max_bound)
        return self


def check_lemma2(trace: EpisodeTrace, rho: float | None = None, r: float | None = None, p_bar: float | None = None) -> CheckResult:
    """``lambda_min(J_t) * (1 + p_bar^2) >= L_t`` at every period.

    The ``max_bound`` field of the result is the largest ``L_t`` seen.
    """
    rho = trace.rho if rho is None else rho
    r = trace.r if r is None else r
    p_bar = trace.p_bar if p_bar is None else p_bar
    L = lemma2_lower_bound(trace.c, rho, r)
    res = CheckResult("lemma2")
    res.periods += len(L)
    lhs = trace.lmin * (1.0 + p_bar**2)
    slack = lhs - L
    res.violations += int(np.count_nonzero(slack < -_tol(L)))
    res.min_slack = float(slack.min())
    res.max_slack = float(slack.max())
    res.max_bound = float(L.max())
    return res


def price_error_constants(box: ParamBox, eps_hi: float, p_bar: float) -> tuple[float, float, float]:
    k1 = math.sqrt(box.a_lo**2 + (box.b_hi + eps_hi) ** 2) / (2.0 * box.a_lo**2)
    k2 = 1.0 / (2.0 * box.a_lo)
    return k1, k2, k1 + k2 * math.sqrt(1.0 + p_bar**2)


def running_empirical_quantile(values: np.ndarray, alpha: float) -> np.ndarray:
    """``out[t-1]`` is the rank-``ceil(t alpha)`` order statistic of ``values[:t]``."""
    ordered: list[float] = []
    out = np.empty(len(values))
    for i, v in enumerate(values):
        bisect.insort(ordered, float(v))
        t = i + 1
        rank = min(t, max(1, math.ceil(t * alpha - 1e-9 * t * alpha)))
        out[i] = ordered[rank - 1]
    return out


def check_price_error_bound(
    trace: EpisodeTrace, kappa1: float, kappa2: float, kappa3: float, shock_quantiles: np.ndarray | None = None
) -> CheckResult:
    """Odd-period pricing error of the perturbed policy against its three-term bound.

    At even ``t`` the posted ``p_{t+1}`` rests on the estimate from data
    through ``t-1`` (the ``basis`` column), and the bound is
    ``kappa3 |theta_hat - theta| + kappa2 |F_{t-1}^-1 - q| + rho |delta_{t+1}|``.
    Periods priced from the warm start are skipped.
    """
    if shock_quantiles is None:
        shock_quantiles = running_empirical_quantile(trace.shock, trace.alpha)
    T = len(trace)
    nxt = np.arange(3, T + 1, 2)  # p_{t+1} for even t
    k = trace.basis[nxt - 1]
    nxt, k = nxt[k > 0], k[k > 0]
    theta_err = np.hypot(trace.a_hat[k - 1] - trace.theta.a, trace.b_hat[k - 1] - trace.theta.b)
    quant_err = np.abs(shock_quantiles[k - 1] - trace.true_q)
    delta = np.array(
        [abs(perturbation_delta(int(n), trace.c[n - 1], trace.c[n - 2], trace.r)) for n in nxt]
    )
    lhs = np.abs(trace.p[nxt - 1] - trace.p_star[nxt - 1])
    rhs = kappa3 * theta_err + kappa2 * quant_err + trace.rho * delta
    return CheckResult("price_error_bound").add(lhs, rhs)


def check_quantile_chain(
    trace: EpisodeTrace, shock_quantiles: np.ndarray | None = None, price_rule: str = "paired"
) -> CheckResult:
    """``|q_hat_t - q| <= |F_t^-1 - q| + sqrt(1 + p^2) |theta_hat_t - theta|`` wherever an estimate exists.

    ``price_rule="paired"`` takes ``p`` as the price carrying the selected
    residual. That form can fail: the residual order statistic may shift by
    the estimation error evaluated at a different price. ``"max"`` takes the
    largest ``|p_k|`` observed so far, which always bounds the shift.
    """
    if price_rule not in ("paired", "max"):
        raise ValueError(f"price_rule must be 'paired' or 'max', got {price_rule!r}")
    if shock_quantiles is None:
        shock_quantiles = running_empirical_quantile(trace.shock, trace.alpha)
    ok = np.isfinite(trace.q_hat)
    if price_rule == "paired":
        price = trace.q_price[ok]
        name = "quantile_chain"
    else:
        price = np.maximum.accumulate(np.abs(trace.p))[ok]
        name = "quantile_chain_maxprice"
    lhs = np.abs(trace.q_hat[ok] - trace.true_q)
    term1 = np.abs(shock_quantiles[ok] - trace.true_q)
    term2 = np.sqrt(1.0 + price**2) * np.sqrt(trace.theta_sq_err[ok])
    return CheckResult(name).add(lhs, term1 + term2)


# --------------------------------------------------------------------------
# Empirical-quantile concentration
# --------------------------------------------------------------------------


def dkw_bound(t: int, gamma: float, lipschitz: float) -> float:
    mu1 = 2.0 / (lipschitz**2 * math.log(2.0))
    return 2.0 * math.exp(-mu1 * gamma**2 * t)


@dataclass(frozen=True)
class DkwCell:
    t: int
    gamma: float
    empirical: float
    bound: float
    sigma: float  # binomial standard error at the bound
    reps: int

    @property
    def ok(self) -> bool:
        return self.bound >= 1.0 or self.empirical <= self.bound + 3.0 * self.sigma


def dkw_experiment(
    dist: ShockDistribution,
    alpha: float,
    t_grid,
    gamma_grid,
    reps: int,
    seed=0,
    lipschitz: float | None = None,
) -> list[DkwCell]:
    """Monte Carlo tail probability of the shock empirical-quantile error."""
    L = dist.bilipschitz_constant() if lipschitz is None else lipschitz
    if L is None:
        raise ValueError("bi-Lipschitz constant unavailable for this law; pass lipschitz=")
    q = dist.quantile(alpha)
    rng = np.random.default_rng(seed)
    cells = []
    for t in t_grid:
        rank = math.ceil(t * alpha - 1e-9 * t * alpha)
        draws = dist.sample(rng, (reps, t))
        err = np.abs(np.partition(draws, rank - 1, axis=1)[:, rank - 1] - q)
        for gamma in gamma_grid:
            bound = dkw_bound(t, gamma, L)
            pb = min(bound, 1.0)
            cells.append(
                DkwCell(t, gamma, float(np.mean(err > gamma)), bound, math.sqrt(pb * (1.0 - pb) / reps), reps)
            )
    return cells


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass
class MonteCarloSummary:
    kind: str
    reps: int
    horizon: int
    completed: int = 0
    regret_sum: np.ndarray = None
    regret_sq_sum: np.ndarray = None
    price_sq_err_sum: np.ndarray = None
    theta_sq_err_sum: np.ndarray = None
    q_sq_err_sum: np.ndarray = None
    a_abs_err_sum: np.ndarray = None
    b_abs_err_sum: np.ndarray = None
    q_abs_err_sum: np.ndarray = None
    final_regret: list = field(default_factory=list)
    clamp_count: int = 0
    checks: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def __post_init__(self):
        for name in (
            "regret_sum",
            "regret_sq_sum",
            "price_sq_err_sum",
            "theta_sq_err_sum",
            "q_sq_err_sum",
            "a_abs_err_sum",
            "b_abs_err_sum",
            "q_abs_err_sum",
        ):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.horizon))

    def add(self, trace: EpisodeTrace, checks: list[CheckResult] = ()) -> None:
        regret = realized_regret(trace)
        self.completed += 1
        self.regret_sum += regret
        self.regret_sq_sum += regret**2
        self.price_sq_err_sum += (trace.p - trace.p_star) ** 2
        self.theta_sq_err_sum += trace.theta_sq_err
        self.q_sq_err_sum += (trace.q_hat - trace.true_q) ** 2
        self.a_abs_err_sum += np.abs(trace.a_hat - trace.theta.a)
        self.b_abs_err_sum += np.abs(trace.b_hat - trace.theta.b)
        self.q_abs_err_sum += np.abs(trace.q_hat - trace.true_q)
        self.final_regret.append(float(regret[-1]))
        self.clamp_count += int(trace.clamped.sum())
        for res in checks:
            if res.name in self.checks:
                self.checks[res.name].merge(res)
            else:
                self.checks[res.name] = CheckResult(res.name).merge(res)

    def _mean(self, total: np.ndarray) -> np.ndarray:
        return total / max(self.completed, 1)

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.horizon + 1)

    @property
    def regret_mean(self) -> np.ndarray:
        return self._mean(self.regret_sum)

    @property
    def regret_ci(self) -> np.ndarray:
        """95% normal half-width from the per-replication regret paths."""
        n = self.completed
        if n < 2:
            return np.zeros(self.horizon)
        var = np.maximum(self.regret_sq_sum - n * self.regret_mean**2, 0.0) / (n - 1)
        return 1.96 * np.sqrt(var / n)

    price_sq_err = property(lambda self: self._mean(self.price_sq_err_sum))
    theta_sq_err = property(lambda self: self._mean(self.theta_sq_err_sum))
    q_sq_err = property(lambda self: self._mean(self.q_sq_err_sum))
    a_abs_err = property(lambda self: self._mean(self.a_abs_err_sum))
    b_abs_err = property(lambda self: self._mean(self.b_abs_err_sum))
    q_abs_err = property(lambda self: self._mean(self.q_abs_err_sum))

    @property
    def violations(self) -> int:
        return sum(c.violations for c in self.checks.values())


def trace_checks(trace: EpisodeTrace, scenario: Scenario) -> list[CheckResult]:
    """Exact inequalities that apply to ``trace``'s policy."""
    if trace.kind == "oracle":
        return []
    quantiles = running_empirical_quantile(trace.shock, trace.alpha)
    out = [check_quantile_chain(trace, quantiles), check_quantile_chain(trace, quantiles, "max")]
    if trace.kind == "perturbed":
        _, eps_hi = scenario.shock_support
        k1, k2, k3 = price_error_constants(scenario.model.box, eps_hi, scenario.p_bar)
        out.append(check_lemma2(trace))
        out.append(check_price_error_bound(trace, k1, k2, k3, quantiles))
    return out


def _replicate(job):
    """One replication across policies; exceptions are returned, not raised."""
    scenario, kinds, seed, rep, with_checks = job
    shocks = scenario.model.shock.sample(np.random.default_rng(seed), scenario.horizon)
    out = []
    for kind in kinds:
        try:
            trace = run_episode(scenario, kind, seed, shocks=shocks)
            trace.seed = rep
            checks = trace_checks(trace, scenario) if with_checks else []
            out.append((kind, trace, checks, None))
        except EpisodeError as exc:
            out.append((kind, None, [], exc))
    return out


def worker_count() -> int:
    env = os.environ.get("DRLAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_monte_carlo(
    config: ExperimentConfig,
    kinds=None,
    reps: int | None = None,
    master_seed: int | None = None,
    *,
    with_checks: bool = True,
    on_trace=None,
    workers: int | None = None,
    scenario: Scenario | None = None,
) -> dict[str, MonteCarloSummary]:
    """Replicate episodes for each policy kind on paired shock streams.

    Replication ``k`` draws shocks from ``replication_seed(master_seed, k)``;
    the customer population is drawn once from the master seed unless
    ``model.redraw_population`` is set. ``on_trace(kind, rep, trace)`` is
    called in replication order.
    """
    kinds = tuple(config.run.policies if kinds is None else kinds)
    reps = config.run.reps if reps is None else reps
    master_seed = config.run.seed if master_seed is None else master_seed
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if scenario is None:
        scenario = Scenario.from_config(config, population_seed=seed_stream(master_seed, 0))
    jobs = []
    for rep in range(reps):
        scen = scenario
        if config.model.kind == "population" and config.model.redraw_population:
            pop = make_population(config.population_spec(), np.random.default_rng(seed_stream(master_seed, 2, rep)))
            scen = scenario.with_model(DemandModel.from_population(pop, scenario.model.box))
        jobs.append((scen, kinds, replication_seed(master_seed, rep), rep, with_checks))

    summaries = {k: MonteCarloSummary(k, reps, scenario.horizon) for k in kinds}
    n_workers = min(workers or worker_count(), reps)
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            results = pool.map(_replicate, jobs)
            _reduce(results, summaries, on_trace)
    else:
        _reduce(map(_replicate, jobs), summaries, on_trace)
    return summaries


def _reduce(results, summaries, on_trace) -> None:
    for rep, outcome in enumerate(results):
        for kind, trace, checks, err in outcome:
            if err is not None:
                log.warning("replication %d (%s) aborted: %s", rep, kind, err)
                summaries[kind].errors.append((rep, str(err)))
                continue
            summaries[kind].add(trace, checks)
            if on_trace is not None:
                on_trace(kind, rep, trace)


# --------------------------------------------------------------------------
# Growth-rate diagnostics
# --------------------------------------------------------------------------


def loglog_slope(t, values, t_lo: float, t_hi: float) -> tuple[float, float]:
    """OLS slope (and its standard error) of ``log values`` on ``log t`` over ``[t_lo, t_hi]``."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (t >= t_lo) & (t <= t_hi)
    if np.count_nonzero(sel) < 3:
        raise ValueError(f"window [{t_lo}, {t_hi}] holds fewer than 3 points")
    if not np.all(values[sel] > 0):
        raise ValueError("log-log fit needs positive values throughout the window")
    fit = stats.linregress(np.log(t[sel]), np.log(values[sel]))
    return float(fit.slope), float(fit.stderr)


def mse_decay_check(summary: MonteCarloSummary, lo_frac: float = 0.1) -> tuple[float, float]:
    """Fitted exponent of the replication-mean squared parameter error over ``[lo_frac T, T]``."""
    T = summary.horizon
    return loglog_slope(summary.t, summary.theta_sq_err, lo_frac * T, T)


def normal_quantile_crosscheck(scenario: Scenario, alpha: float) -> float:
    return normal_approx_quantile(scenario.model.shock, alpha)
