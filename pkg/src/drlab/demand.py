"""Ground-truth world: shock laws, the affine demand model, customer
populations, cost sequences and the derived price bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import optimize, special

__all__ = [
    "Uniform",
    "TruncatedNormal",
    "AggregateIID",
    "ShockDistribution",
    "DemandParams",
    "ParamBox",
    "CustomerPopulation",
    "PopulationSpec",
    "DemandModel",
    "ConstantCost",
    "AlternatingCost",
    "SequenceCost",
    "CostSequence",
    "mean_response",
    "make_population",
    "price_bound",
    "cost_at",
    "aggregate_quantile_mc",
    "normal_approx_quantile",
]


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha out of (0,1): {alpha!r}")


# --------------------------------------------------------------------------
# Shock distributions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    """Zero-mean uniform law on ``[lo, hi]`` with ``hi == -lo``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"uniform support must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if self.hi != -self.lo:
            raise ValueError("uniform shock must be zero-mean (hi == -lo)")

    @property
    def support(self) -> tuple[float, float]:
        return self.lo, self.hi

    @property
    def variance(self) -> float:
        return (self.hi - self.lo) ** 2 / 12.0

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)[()]

    def quantile(self, alpha: float) -> float:
        _check_alpha(alpha)
        return self.lo + alpha * (self.hi - self.lo)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.lo, self.hi, size)

    def char_fn(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.sinc(u * self.hi / np.pi)

    def density_range(self) -> tuple[float, float]:
        d = 1.0 / (self.hi - self.lo)
        return d, d

    def bilipschitz_constant(self) -> float:
        return _bilipschitz(*self.density_range())


@dataclass(frozen=True)
class TruncatedNormal:
    """Zero-mean normal with standard deviation ``scale`` conditioned on ``[lo, hi]``.

    Only symmetric truncation is accepted so the law stays zero-mean.
    Sampling is by inverse-CDF transform of one uniform draw per value.
    """

    scale: float
    lo: float
    hi: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"truncation must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if self.hi != -self.lo:
            raise ValueError("truncated normal shock must be zero-mean (hi == -lo)")

    @property
    def support(self) -> tuple[float, float]:
        return self.lo, self.hi

    @property
    def _z(self) -> float:
        # mass of the parent inside [lo, hi]; 1 - 2*Phi(lo/s) keeps precision for wide cuts
        return 1.0 - 2.0 * special.ndtr(self.lo / self.scale)

    @property
    def variance(self) -> float:
        b = self.hi / self.scale
        return self.scale**2 * (1.0 - 2.0 * b * _std_pdf(b) / self._z)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        lower = special.ndtr(self.lo / self.scale)
        # evaluate the left half directly and mirror the right half for tail accuracy
        left = (special.ndtr(-np.abs(x) / self.scale) - lower) / self._z
        out = np.where(x <= 0, left, 1.0 - left)
        return np.clip(out, 0.0, 1.0)[()]

    def _ppf(self, u):
        u = np.asarray(u, dtype=float)
        lower = special.ndtr(self.lo / self.scale)
        m = np.minimum(u, 1.0 - u)
        x = self.scale * special.ndtri(lower + m * self._z)
        x = np.where(u <= 0.5, x, -x)
        return np.clip(x, self.lo, self.hi)

    def quantile(self, alpha: float) -> float:
        _check_alpha(alpha)
        return float(self._ppf(alpha))

    def sample(self, rng: np.random.Generator, size=None):
        out = self._ppf(rng.random(size))
        return out if size is not None else float(out)

    def char_fn(self, u):
        # symmetric law: phi(u) = 2 * int_0^hi cos(u x) f(x) dx, by composite Gauss-Legendre
        u = np.atleast_1d(np.asarray(u, dtype=float))
        nodes, weights = np.polynomial.legendre.leggauss(32)
        panels = 64
        edges = np.linspace(0.0, self.hi, panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        w = (half[:, None] * weights[None, :]).ravel()
        dens = _std_pdf(x / self.scale) / (self.scale * self._z)
        return 2.0 * np.cos(np.outer(u, x)) @ (w * dens)

    def density_range(self) -> tuple[float, float]:
        norm = self.scale * self._z
        return _std_pdf(self.hi / self.scale) / norm, _std_pdf(0.0) / norm

    def bilipschitz_constant(self) -> float:
        return _bilipschitz(*self.density_range())


@dataclass(frozen=True)
class AggregateIID:
    """Sum of ``count`` independent copies of ``base``.

    The CDF has no closed form; it is evaluated by Gil-Pelaez inversion of
    ``char_fn(u)**count`` on a fixed quadrature grid built at construction.
    Accuracy is ~1e-12 once ``count`` is large enough for the characteristic
    function to decay quickly (population runs); small counts of uniform
    laws converge slowly and are only accurate to a few digits.
    """

    base: Union[Uniform, TruncatedNormal]
    count: int
    _nodes: np.ndarray = field(init=False, repr=False, compare=False)
    _weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise ValueError(f"count must be a positive integer, got {self.count}")
        if self.count == 1:
            return
        sd = math.sqrt(self.variance)
        # first u beyond which |phi|^N stays below 1e-17 on a probe grid
        cutoff = 1.0 / sd
        while cutoff < 1e4 / sd:
            if np.abs(self.char_fn(np.linspace(cutoff, 4.0 * cutoff, 64))).max() < 1e-17:
                break
            cutoff *= 1.5
        # composite Gauss-Legendre on [0, cutoff]; panels resolve sin(u x) for |x| <= 40 sd
        panels = int(min(20000, max(64, math.ceil(cutoff * 40.0 * sd / 2.0))))
        nodes, weights = np.polynomial.legendre.leggauss(16)
        edges = np.linspace(0.0, cutoff, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        u = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        w = (half[:, None] * weights[None, :]).ravel()
        object.__setattr__(self, "_nodes", u)
        object.__setattr__(self, "_weights", w * self.char_fn(u) / u)

    @property
    def support(self) -> tuple[float, float]:
        lo, hi = self.base.support
        return self.count * lo, self.count * hi

    @property
    def variance(self) -> float:
        return self.count * self.base.variance

    def char_fn(self, u):
        return self.base.char_fn(u) ** self.count

    def _cdf_scalar(self, x: float) -> float:
        lo, hi = self.support
        if x <= lo:
            return 0.0
        if x >= hi:
            return 1.0
        if self.count == 1:
            return float(self.base.cdf(x))
        # Gil-Pelaez for a symmetric law: F(x) = 1/2 + (1/pi) int_0^inf sin(u x) phi(u) / u du
        val = float(np.dot(self._weights, np.sin(self._nodes * x)))
        return min(1.0, max(0.0, 0.5 + val / math.pi))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.vectorize(self._cdf_scalar, otypes=[float])(x)
        return out[()]

    def quantile(self, alpha: float) -> float:
        _check_alpha(alpha)
        if self.count == 1:
            return self.base.quantile(alpha)
        lo, hi = self.support
        sd = math.sqrt(self.variance)
        a, b = max(lo, -40.0 * sd), min(hi, 40.0 * sd)
        return optimize.brentq(lambda v: self._cdf_scalar(v) - alpha, a, b, xtol=1e-13, rtol=1e-14)

    def sample(self, rng: np.random.Generator, size=None, chunk: int = 1 << 22):
        if size is None:
            return float(np.sum(self.base.sample(rng, self.count)))
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        out = np.empty(n)
        step = max(1, chunk // self.count)
        for start in range(0, n, step):
            stop = min(n, start + step)
            out[start:stop] = self.base.sample(rng, (stop - start, self.count)).sum(axis=1)
        return out.reshape(shape)

    def bilipschitz_constant(self):
        return None


ShockDistribution = Union[Uniform, TruncatedNormal, AggregateIID]


def _std_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def _bilipschitz(dmin: float, dmax: float) -> float:
    # (1/L)|x-y| <= |F(x)-F(y)| <= L|x-y| needs L >= dmax and L >= 1/dmin
    return float(max(dmax, 1.0 / dmin, 1.0)) if dmin > 0 else math.inf


def aggregate_quantile_mc(dist: AggregateIID, alpha: float, samples: int, seed: int = 0) -> float:
    """Monte Carlo estimate of ``dist.quantile(alpha)`` (independent cross-check)."""
    _check_alpha(alpha)
    draws = np.sort(dist.sample(np.random.default_rng(seed), samples))
    return float(draws[math.ceil(samples * alpha) - 1])


def normal_approx_quantile(dist: ShockDistribution, alpha: float) -> float:
    _check_alpha(alpha)
    return float(math.sqrt(dist.variance) * special.ndtri(alpha))


# --------------------------------------------------------------------------
# Demand model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DemandParams:
    a: float
    b: float

    def __iter__(self):
        yield self.a
        yield self.b

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b])

    def distance(self, other: "DemandParams") -> float:
        return math.hypot(self.a - other.a, self.b - other.b)


@dataclass(frozen=True)
class ParamBox:
    """Known parameter set ``[a_lo, a_hi] x [0, b_hi]``."""

    a_lo: float
    a_hi: float
    b_hi: float

    def __post_init__(self):
        if not 0.0 < self.a_lo <= self.a_hi < math.inf:
            raise ValueError(f"need 0 < a_lo <= a_hi < inf, got [{self.a_lo}, {self.a_hi}]")
        if not 0.0 <= self.b_hi < math.inf:
            raise ValueError(f"need 0 <= b_hi < inf, got {self.b_hi}")

    def contains(self, theta: DemandParams) -> bool:
        return self.a_lo <= theta.a <= self.a_hi and 0.0 <= theta.b <= self.b_hi

    def clamp(self, theta: DemandParams) -> DemandParams:
        return DemandParams(min(max(theta.a, self.a_lo), self.a_hi), min(max(theta.b, 0.0), self.b_hi))


def mean_response(p, theta: DemandParams):
    """Expected curtailment ``a p + b`` at price ``p``."""
    return theta.a * p + theta.b


@dataclass(frozen=True)
class CustomerPopulation:
    a: np.ndarray
    b: np.ndarray
    shock: Union[Uniform, TruncatedNormal]

    def __post_init__(self):
        if len(self.a) != len(self.b) or len(self.a) < 1:
            raise ValueError("population needs matching, nonempty a and b arrays")
        if not np.sum(self.a) > 0:
            raise ValueError("aggregate price sensitivity must be positive")

    @property
    def count(self) -> int:
        return len(self.a)

    @property
    def params(self) -> DemandParams:
        return DemandParams(float(np.sum(self.a)), float(np.sum(self.b)))

    @property
    def aggregate_shock(self) -> AggregateIID:
        return AggregateIID(self.shock, self.count)


@dataclass(frozen=True)
class PopulationSpec:
    count: int = 1000
    a_min: float = 0.04
    a_max: float = 0.20
    b_mean: float = 0.01
    b_max: float = 0.1
    shock: Union[Uniform, TruncatedNormal] = TruncatedNormal(0.04, -0.4, 0.4)

    def param_box(self) -> ParamBox:
        return ParamBox(self.count * self.a_min, self.count * self.a_max, self.count * self.b_max)


def make_population(spec: PopulationSpec, rng: np.random.Generator) -> CustomerPopulation:
    """Draw per-customer parameters.

    ``a_i`` is uniform on ``[a_min, a_max]``; ``b_i`` follows an exponential
    law with mean ``b_mean`` (rate ``1/b_mean``) conditioned on ``[0, b_max]``.
    """
    if spec.count < 1:
        raise ValueError(f"population needs at least one customer, got {spec.count}")
    a = rng.uniform(spec.a_min, spec.a_max, spec.count)
    u = rng.random(spec.count)
    if spec.b_max == 0.0:
        b = np.zeros(spec.count)
    else:
        b = -spec.b_mean * np.log1p(-u * -np.expm1(-spec.b_max / spec.b_mean))
    return CustomerPopulation(a=a, b=b, shock=spec.shock)


@dataclass(frozen=True)
class DemandModel:
    params: DemandParams
    box: ParamBox
    shock: ShockDistribution
    population: CustomerPopulation | None = None

    def __post_init__(self):
        if not self.params.a > 0:
            raise ValueError("price sensitivity a must be positive")

    @classmethod
    def from_population(cls, population: CustomerPopulation, box: ParamBox) -> "DemandModel":
        return cls(population.params, box, population.aggregate_shock, population)

    def demand(self, p: float, shock) -> float:
        """Realized curtailment for a given shock (scalar, or one per customer)."""
        # the aggregate form a*p + b + sum(eps_i) is the population sum by definition
        return mean_response(p, self.params) + float(np.sum(shock))

    def sample_demand(self, p: float, rng: np.random.Generator) -> float:
        if self.population is not None:
            return self.demand(p, self.population.shock.sample(rng, self.population.count))
        return self.demand(p, self.shock.sample(rng))


def price_bound(box: ParamBox, c_bar: float, eps_lo: float, eps_hi: float) -> float:
    """Uniform bound on posted prices when estimates stay in ``box``."""
    return 0.5 * max(
        c_bar - eps_lo / box.a_lo,
        c_bar - eps_lo / box.a_hi,
        (box.b_hi + eps_hi) / box.a_lo,
    )


# --------------------------------------------------------------------------
# Wholesale-minus-retail cost sequences
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantCost:
    c: float
    bound: float | None = None

    def __post_init__(self):
        if self.bound is None:
            object.__setattr__(self, "bound", self.c)
        if not 0.0 <= self.c <= self.bound:
            raise ValueError(f"cost {self.c} outside [0, {self.bound}]")

    def at(self, t: int) -> float:
        if t < 1:
            raise ValueError("periods are numbered from 1")
        return self.c

    def values(self, horizon: int) -> np.ndarray:
        return np.full(horizon, self.c)


@dataclass(frozen=True)
class AlternatingCost:
    """``center - sigma/2`` on odd periods and ``center + sigma/2`` on even ones.

    The high level is nudged up by ulps if needed so that the step between
    consecutive periods is never below ``sigma`` in floating point.
    """

    center: float
    sigma: float
    bound: float | None = None
    _low: float = field(init=False, repr=False, compare=False)
    _high: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        low = self.center - 0.5 * self.sigma
        high = low + self.sigma
        while high - low < self.sigma:
            high = math.nextafter(high, math.inf)
        object.__setattr__(self, "_low", low)
        object.__setattr__(self, "_high", high)
        if self.bound is None:
            object.__setattr__(self, "bound", high)
        if not 0.0 <= low or not high <= self.bound:
            raise ValueError(f"alternating costs [{low}, {high}] leave [0, {self.bound}]")

    def at(self, t: int) -> float:
        if t < 1:
            raise ValueError("periods are numbered from 1")
        return self._low if t % 2 else self._high

    def values(self, horizon: int) -> np.ndarray:
        out = np.full(horizon, self._low)
        out[1::2] = self._high
        return out


@dataclass(frozen=True)
class SequenceCost:
    seq: tuple[float, ...]
    bound: float | None = None

    def __post_init__(self):
        seq = tuple(float(v) for v in self.seq)
        object.__setattr__(self, "seq", seq)
        if not seq:
            raise ValueError("cost sequence is empty")
        if self.bound is None:
            object.__setattr__(self, "bound", max(seq))
        bad = [v for v in seq if not 0.0 <= v <= self.bound]
        if bad:
            raise ValueError(f"cost values {bad[:3]} outside [0, {self.bound}]")

    def at(self, t: int) -> float:
        if not 1 <= t <= len(self.seq):
            raise IndexError(f"period {t} outside the explicit cost sequence (length {len(self.seq)})")
        return self.seq[t - 1]

    def values(self, horizon: int) -> np.ndarray:
        if horizon > len(self.seq):
            raise IndexError(f"horizon {horizon} exceeds explicit cost sequence (length {len(self.seq)})")
        return np.array(self.seq[:horizon])


CostSequence = Union[ConstantCost, AlternatingCost, SequenceCost]


def cost_at(seq: CostSequence, t: int) -> float:
    return seq.at(t)
