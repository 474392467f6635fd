"""Experiment configuration: flat ``section.key = value`` files.

Every omitted key takes the case-study default, so an empty file is the
case study. ``None`` fields are written ``auto`` and derived at build time.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .demand import (
    AlternatingCost,
    ConstantCost,
    CostSequence,
    ParamBox,
    PopulationSpec,
    SequenceCost,
    TruncatedNormal,
    Uniform,
)
from .policy import CLAMP_MODES, POLICY_KINDS, PolicyConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "casestudy_path",
    "IGNORED_PREFIXES",
]

# manifest sections that load_config skips, so a manifest re-parses as its config
IGNORED_PREFIXES = ("derived.", "meta.")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto_float(text: str):
    return None if text.strip().lower() == "auto" else float(text)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _opt(default, parse):
    return field(default=default, metadata={"parse": parse})


@dataclass(frozen=True)
class ModelSection:
    kind: str = _opt("population", str)  # population | direct
    customers: int = _opt(1000, int)
    a_min: float = _opt(0.04, float)
    a_max: float = _opt(0.20, float)
    b_mean: float = _opt(0.01, float)
    b_max: float = _opt(0.1, float)
    # per-customer shock in population mode, aggregate shock in direct mode
    shock: str = _opt("truncnorm", str)  # truncnorm | uniform
    shock_scale: float = _opt(0.04, float)
    shock_bound: float = _opt(0.4, float)
    a: float | None = _opt(None, _auto_float)
    b: float | None = _opt(None, _auto_float)
    redraw_population: bool = _opt(False, _bool)


@dataclass(frozen=True)
class BoxSection:
    a_lo: float | None = _opt(None, _auto_float)
    a_hi: float | None = _opt(None, _auto_float)
    b_hi: float | None = _opt(None, _auto_float)


@dataclass(frozen=True)
class PolicySection:
    alpha: float = _opt(0.1, float)
    rho: float = _opt(0.19, float)
    r: float = _opt(0.25, float)
    clamp: str = _opt("interval", str)
    p1: float | None = _opt(None, _auto_float)
    p2: float | None = _opt(None, _auto_float)


@dataclass(frozen=True)
class CostSection:
    kind: str = _opt("constant", str)  # constant | alternating | sequence
    retail: float = _opt(0.17, float)
    wholesale: float = _opt(1.67, float)
    center: float | None = _opt(None, _auto_float)
    sigma: float = _opt(0.2, float)
    values: tuple[float, ...] = _opt((), _floats)
    bound: float | None = _opt(None, _auto_float)


@dataclass(frozen=True)
class RunSection:
    horizon: int = _opt(10_000, int)
    reps: int = _opt(50, int)
    seed: int = _opt(0, int)
    out: str = _opt("out", str)
    policies: tuple[str, ...] = _opt(("myopic", "perturbed"), _names)


@dataclass(frozen=True)
class DkwSection:
    lo: float = _opt(-0.5, float)
    hi: float = _opt(0.5, float)
    alpha: float | None = _opt(None, _auto_float)
    t_grid: tuple[int, ...] = _opt((4, 16, 64, 256), _ints)
    gamma_grid: tuple[float, ...] = _opt((0.05, 0.1, 0.2), _floats)
    reps: int = _opt(10_000, int)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    box: BoxSection = field(default_factory=BoxSection)
    policy: PolicySection = field(default_factory=PolicySection)
    cost: CostSection = field(default_factory=CostSection)
    run: RunSection = field(default_factory=RunSection)
    dkw: DkwSection = field(default_factory=DkwSection)

    def __post_init__(self):
        self.validate()

    # -- serialization -------------------------------------------------

    def items(self) -> list[tuple[str, str]]:
        out = []
        for sec in fields(self):
            section = getattr(self, sec.name)
            for f in fields(section):
                out.append((f"{sec.name}.{f.name}", _fmt(getattr(section, f.name))))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def digest(self) -> str:
        canon = "\n".join(f"{k}={v}" for k, v in sorted(self.items()))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(run={"reps": 5})`` returns a validated copy."""
        changes = {name: replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return replace(self, **changes)

    # -- validation ----------------------------------------------------

    def validate(self) -> None:
        m, p, c, run = self.model, self.policy, self.cost, self.run
        if not 0.0 < p.alpha < 1.0:
            raise ConfigError("alpha out of (0,1)")
        if p.rho < 0:
            raise ConfigError("rho must be nonnegative")
        if not 0.0 <= p.r < 0.5:
            raise ConfigError("r out of [0, 1/2)")
        if p.clamp not in CLAMP_MODES:
            raise ConfigError(f"policy.clamp must be one of {CLAMP_MODES}")
        if (p.p1 is None) != (p.p2 is None):
            raise ConfigError("policy.p1 and policy.p2 must be given together")
        if p.p1 is not None and p.p1 == p.p2:
            raise ConfigError("warm-start prices p1 and p2 must differ")
        if run.horizon < 3:
            raise ConfigError("horizon must be at least 3")
        if run.reps < 1:
            raise ConfigError("reps must be at least 1")
        bad = [k for k in run.policies if k not in POLICY_KINDS]
        if bad:
            raise ConfigError(f"unknown policies {bad}; expected {POLICY_KINDS}")
        if m.kind not in ("population", "direct"):
            raise ConfigError("model.kind must be population or direct")
        if m.shock not in ("truncnorm", "uniform"):
            raise ConfigError("model.shock must be truncnorm or uniform")
        if m.kind == "population":
            if m.customers < 1:
                raise ConfigError("model.customers must be at least 1")
            if not 0.0 <= m.a_min <= m.a_max or not m.a_max > 0:
                raise ConfigError("need 0 <= a_min <= a_max with a_max > 0")
            if not (m.b_mean > 0 and m.b_max >= 0):
                raise ConfigError("need b_mean > 0 and b_max >= 0")
        elif m.a is None or m.b is None:
            raise ConfigError("direct model needs model.a and model.b")
        if c.kind not in ("constant", "alternating", "sequence"):
            raise ConfigError("cost.kind must be constant, alternating or sequence")
        if c.kind == "sequence" and len(c.values) < run.horizon:
            raise ConfigError("cost.values shorter than the horizon")
        if self.dkw.reps < 1 or any(t < 2 for t in self.dkw.t_grid):
            raise ConfigError("dkw needs reps >= 1 and every t >= 2")
        try:
            self.shock_law()
            box = self.param_box()
            self.costs()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if m.kind == "direct" and not (box.a_lo <= m.a <= box.a_hi and 0.0 <= m.b <= box.b_hi):
            raise ConfigError("true parameters (model.a, model.b) outside the parameter box")

    # -- builders ------------------------------------------------------

    def shock_law(self):
        """Per-customer law (population) or aggregate law (direct)."""
        m = self.model
        if m.shock == "uniform":
            return Uniform(-m.shock_bound, m.shock_bound)
        return TruncatedNormal(m.shock_scale, -m.shock_bound, m.shock_bound)

    def population_spec(self) -> PopulationSpec:
        m = self.model
        return PopulationSpec(m.customers, m.a_min, m.a_max, m.b_mean, m.b_max, self.shock_law())

    def param_box(self) -> ParamBox:
        b, m = self.box, self.model
        if m.kind == "population":
            d = self.population_spec().param_box()
            return ParamBox(
                d.a_lo if b.a_lo is None else b.a_lo,
                d.a_hi if b.a_hi is None else b.a_hi,
                d.b_hi if b.b_hi is None else b.b_hi,
            )
        if None in (b.a_lo, b.a_hi, b.b_hi):
            raise ValueError("direct model needs box.a_lo, box.a_hi and box.b_hi")
        return ParamBox(b.a_lo, b.a_hi, b.b_hi)

    def costs(self) -> CostSequence:
        c = self.cost
        if c.kind == "constant":
            return ConstantCost(c.wholesale - c.retail, c.bound)
        if c.kind == "alternating":
            center = c.wholesale - c.retail if c.center is None else c.center
            return AlternatingCost(center, c.sigma, c.bound)
        return SequenceCost(c.values, c.bound)

    def policy_config(self) -> PolicyConfig:
        p = self.policy
        warm = None if p.p1 is None else (p.p1, p.p2)
        return PolicyConfig(p.alpha, p.rho, p.r, p.clamp, warm)


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (s.strip() for s in line.partition("="))
        if key.startswith(IGNORED_PREFIXES):
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        sec_fields = {f.name: f for f in fields(_SECTIONS[section].default_factory)}
        if name not in sec_fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            parsed = sec_fields[name].metadata["parse"](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        if isinstance(parsed, float) and not math.isfinite(parsed):
            raise ConfigError(f"{source}:{lineno}: {key} must be finite")
        values.setdefault(section, {})[name] = parsed
    sections = {name: _SECTIONS[name].default_factory(**vals) for name, vals in values.items()}
    return ExperimentConfig(**sections)


def casestudy_path() -> Path:
    return Path(str(resources.files("drlab") / "data" / "casestudy.cfg"))


def load_config(path) -> ExperimentConfig:
    """Parse a config file; a bare ``casestudy.cfg`` not found on disk is the bundled one."""
    path = Path(path)
    if not path.exists() and path.name == "casestudy.cfg" and len(path.parts) == 1:
        path = casestudy_path()
    return parse_config(path.read_text(), str(path))
