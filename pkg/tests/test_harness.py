from __future__ import annotations

import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest

from drlab import harness
from drlab.config import ExperimentConfig
from drlab.demand import DemandParams, Uniform
from drlab.estimation import EstimatorState
from drlab.harness import (
    EpisodeError,
    MonteCarloSummary,
    Scenario,
    check_lemma2,
    check_price_error_bound,
    check_quantile_chain,
    dkw_bound,
    dkw_experiment,
    lemma2_lower_bound,
    loglog_slope,
    mse_decay_check,
    price_error_constants,
    realized_regret,
    replication_seed,
    revenue_gap,
    run_episode,
    run_monte_carlo,
    running_empirical_quantile,
)
from drlab.policy import make_policy, perturbation_delta

TRACE_ARRAYS = [f.name for f in dataclasses.fields(harness.EpisodeTrace) if f.type == "np.ndarray"]


def scenario(config: ExperimentConfig) -> Scenario:
    return Scenario.from_config(config, population_seed=harness.seed_stream(config.run.seed, 0))


def kappas(sc: Scenario):
    return price_error_constants(sc.model.box, sc.shock_support[1], sc.p_bar)


@pytest.fixture(scope="module")
def case(small_config):
    sc = scenario(small_config)
    seed = replication_seed(small_config.run.seed, 0)
    return sc, {k: run_episode(sc, k, seed) for k in ("oracle", "myopic", "perturbed")}


class TestEpisode:
    def test_oracle_zero_shock_no_regret(self, direct_config):
        sc = scenario(direct_config)
        sc = dataclasses.replace(sc, true_q=0.0)
        tr = run_episode(sc, "oracle", shocks=np.zeros(sc.horizon))
        assert np.all(realized_regret(tr) == 0.0)

    def test_deterministic(self, small_config):
        sc = scenario(small_config)
        a = run_episode(sc, "perturbed", replication_seed(1, 4))
        b = run_episode(sc, "perturbed", replication_seed(1, 4))
        for name in TRACE_ARRAYS:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_paired_shocks(self, case):
        _, traces = case
        np.testing.assert_array_equal(traces["myopic"].shock, traces["perturbed"].shock)
        np.testing.assert_array_equal(traces["oracle"].shock, traces["perturbed"].shock)

    def test_record_shape_and_oracle_column(self, case):
        sc, traces = case
        for tr in traces.values():
            assert len(tr) == sc.horizon
            np.testing.assert_array_equal(tr.p_star, traces["oracle"].p)
            assert tr.digest == sc.digest != ""

    def test_demand_realization(self, case):
        sc, traces = case
        tr = traces["perturbed"]
        np.testing.assert_array_equal(tr.demand, sc.model.params.a * tr.p + sc.model.params.b + tr.shock)

    def test_failing_period_reported(self, direct_config, monkeypatch):
        sc = scenario(direct_config)
        original = EstimatorState.estimate

        def flaky(self, box, alpha):
            if self.t == 7:
                raise RuntimeError("forced failure")
            return original(self, box, alpha)

        monkeypatch.setattr(EstimatorState, "estimate", flaky)
        with pytest.raises(EpisodeError) as err:
            run_episode(sc, "myopic", 0)
        # the diagnostic refresh after period 7's observation fails first
        assert err.value.period == 7
        assert isinstance(err.value.cause, RuntimeError)

    def test_causal_replay(self, case):
        # rebuilding the policy from the recorded (p, D) history reproduces every price
        sc, traces = case
        for kind in ("myopic", "perturbed"):
            tr = traces[kind]
            est = EstimatorState(capacity=4)
            pol = make_policy(kind, sc.policy, box=sc.model.box, estimator=est, c_bar=sc.c_bar, theta=sc.model.params, true_q=sc.true_q)
            c_prev = None
            for i in range(len(tr)):
                assert pol.next_price(i + 1, tr.c[i], c_prev) == tr.p[i]
                est.observe(tr.p[i], tr.demand[i])
                c_prev = tr.c[i]

    def test_clamp_never_binds_case_study(self, case):
        _, traces = case
        assert not any(tr.clamped.any() for tr in traces.values())

    def test_bounded_without_clamp(self, small_config):
        cfg = small_config.with_overrides(policy={"clamp": "none"})
        sc = scenario(cfg)
        for kind in ("myopic", "perturbed"):
            tr = run_episode(sc, kind, 3)
            assert np.all(np.abs(tr.p) <= sc.p_bar)

    def test_frozen_step(self, direct_config):
        cfg = direct_config.with_overrides(cost={"kind": "alternating", "center": 1.5, "sigma": 0.2}, policy={"clamp": "none"})
        sc = scenario(cfg)
        tr = run_episode(sc, "perturbed", 2)
        for t in range(4, len(tr), 2):
            # p_{t+1} - p_t = (c_{t+1} - c_t)/2 + rho delta_{t+1}
            step = 0.5 * (tr.c[t] - tr.c[t - 1]) + tr.rho * perturbation_delta(t + 1, tr.c[t], tr.c[t - 1], tr.r)
            assert tr.p[t] - tr.p[t - 1] == pytest.approx(step, abs=1e-12)


class TestRegret:
    def test_example(self):
        tr = SimpleNamespace(theta=DemandParams(2.0, 0.0), p=np.array([0.1, 0.2]), p_star=np.zeros(2))
        np.testing.assert_allclose(realized_regret(tr), [0.02, 0.1])

    def test_zero(self):
        tr = SimpleNamespace(theta=DemandParams(2.0, 0.0), p=np.ones(5), p_star=np.ones(5))
        assert np.all(realized_regret(tr) == 0)

    def test_matches_revenue_gap(self, case):
        _, traces = case
        for tr in traces.values():
            reg, gap = realized_regret(tr), revenue_gap(tr)
            assert np.all(np.diff(reg) >= 0)
            np.testing.assert_allclose(reg, gap, rtol=1e-7, atol=1e-9 * max(1.0, reg[-1]))


class TestLemma2:
    def test_zero_rho_constant_cost(self):
        assert np.all(lemma2_lower_bound(np.full(50, 1.5), 0.0, 0.25) == 0.0)

    def test_formula_value(self):
        assert lemma2_lower_bound(np.ones(4), 1.0, 0.25)[3] == pytest.approx(math.sqrt(2) / 8, abs=1e-15)

    def test_cost_changes(self):
        c = np.array([1.0, 1.2, 1.0, 1.5, 2.0])
        L = lemma2_lower_bound(c, 0.0, 0.25)
        np.testing.assert_allclose(L, [0, 0.04 / 8, 0.04 / 8, 0.29 / 8, 0.29 / 8])

    def test_case_study_trace(self, case):
        sc, traces = case
        res = check_lemma2(traces["perturbed"])
        assert res.violations == 0 and res.periods == sc.horizon

    def test_rho_zero_trace(self, small_config):
        cfg = small_config.with_overrides(policy={"rho": 0.0})
        tr = run_episode(scenario(cfg), "perturbed", 1)
        res = check_lemma2(tr)
        assert res.violations == 0 and res.max_bound == 0.0

    def test_dispersion_bound_on_trace(self, case):
        sc, traces = case
        for kind in ("myopic", "perturbed"):
            tr = traces[kind]
            assert np.all(tr.lmin >= tr.J / (1 + sc.p_bar**2) - 1e-12 * (1 + tr.J))


class TestPriceErrorBound:
    def test_exact_knowledge(self, direct_config):
        # zero shocks: the fit is exact, so odd-period errors are the bare offsets
        sc = dataclasses.replace(scenario(direct_config), true_q=0.0)
        tr = run_episode(sc, "perturbed", shocks=np.zeros(sc.horizon))
        res = check_price_error_bound(tr, *kappas(sc))
        assert res.violations == 0 and res.periods > 0
        for n in range(5, len(tr), 2):
            off = tr.rho * abs(perturbation_delta(n, tr.c[n - 1], tr.c[n - 2], tr.r))
            assert abs(tr.p[n - 1] - tr.p_star[n - 1]) == pytest.approx(off, abs=1e-9)
        # refresh periods land on the oracle
        np.testing.assert_allclose(tr.p[5::2], tr.p_star[5::2], atol=1e-9)

    def test_case_study_trace(self, case):
        sc, traces = case
        res = check_price_error_bound(traces["perturbed"], *kappas(sc))
        assert res.violations == 0

    def test_constants(self):
        from drlab.demand import ParamBox

        k1, k2, k3 = price_error_constants(ParamBox(1.0, 2.0, 1.0), 1.0, 1.5)
        assert k1 == pytest.approx(math.sqrt(1 + 4) / 2)
        assert k2 == 0.5
        assert k3 == pytest.approx(k1 + 0.5 * math.sqrt(1 + 2.25))


class TestQuantileChainOnTraces:
    def test_max_price_form_holds(self, case):
        _, traces = case
        for kind in ("myopic", "perturbed"):
            assert check_quantile_chain(traces[kind], price_rule="max").violations == 0

    def test_paired_form_counts(self, case):
        _, traces = case
        res = check_quantile_chain(traces["perturbed"])
        assert res.periods == len(traces["perturbed"]) - 1
        assert res.name == "quantile_chain"

    def test_rejects_unknown_rule(self, case):
        with pytest.raises(ValueError):
            check_quantile_chain(case[1]["myopic"], price_rule="median")

    def test_running_quantile(self, rng):
        x = rng.normal(size=300)
        got = running_empirical_quantile(x, 0.1)
        for t in (1, 2, 9, 10, 11, 57, 300):
            assert got[t - 1] == np.sort(x[:t])[math.ceil(0.1 * t) - 1]


class TestDkw:
    def test_constant(self):
        assert 2 / (Uniform(-0.5, 0.5).bilipschitz_constant() ** 2 * math.log(2)) == pytest.approx(2.88539, abs=1e-5)
        assert dkw_bound(1, 0.0, 1.0) == 2.0

    def test_trivial_cells(self):
        cells = dkw_experiment(Uniform(-0.5, 0.5), 0.1, (4,), (0.05,), 200, seed=0)
        assert cells[0].bound >= 1 and cells[0].ok

    def test_grid(self):
        cells = dkw_experiment(Uniform(-0.5, 0.5), 0.1, (4, 16, 64, 256), (0.05, 0.1, 0.2), 2000, seed=1)
        assert len(cells) == 12 and all(c.ok for c in cells)
        for c in cells:
            assert c.bound == pytest.approx(2 * math.exp(-2 / math.log(2) * c.gamma**2 * c.t))

    def test_needs_lipschitz(self):
        from drlab.demand import AggregateIID

        with pytest.raises(ValueError):
            dkw_experiment(AggregateIID(Uniform(-0.5, 0.5), 3), 0.1, (4,), (0.1,), 10)


class TestMonteCarlo:
    def test_single_rep_equals_trace(self, direct_config):
        sc = scenario(direct_config)
        s = run_monte_carlo(direct_config, ("perturbed",), reps=1, master_seed=9, scenario=sc)["perturbed"]
        tr = run_episode(sc, "perturbed", replication_seed(9, 0))
        np.testing.assert_array_equal(s.regret_mean, realized_regret(tr))
        np.testing.assert_array_equal(s.theta_sq_err, tr.theta_sq_err)
        assert s.completed == 1 and np.all(s.regret_ci == 0)

    def test_rerun_identical(self, direct_config):
        a = run_monte_carlo(direct_config, ("myopic", "perturbed"), reps=2, master_seed=4)
        b = run_monte_carlo(direct_config, ("myopic", "perturbed"), reps=2, master_seed=4)
        for k in a:
            np.testing.assert_array_equal(a[k].regret_sum, b[k].regret_sum)
            np.testing.assert_array_equal(a[k].q_sq_err_sum, b[k].q_sq_err_sum)
            assert a[k].final_regret == b[k].final_regret

    def test_paired_and_ordered(self, direct_config):
        seen = []
        run_monte_carlo(direct_config, ("myopic", "perturbed"), reps=3, master_seed=2,
                        on_trace=lambda k, rep, tr: seen.append((k, rep, tr.shock)))
        assert [(k, r) for k, r, _ in seen] == [(k, r) for r in range(3) for k in ("myopic", "perturbed")]
        for r in range(3):
            np.testing.assert_array_equal(seen[2 * r][2], seen[2 * r + 1][2])
        assert not np.array_equal(seen[0][2], seen[2][2])

    def test_parallel_matches_serial(self, direct_config):
        a = run_monte_carlo(direct_config, ("perturbed",), reps=3, master_seed=1, workers=1)["perturbed"]
        b = run_monte_carlo(direct_config, ("perturbed",), reps=3, master_seed=1, workers=2)["perturbed"]
        np.testing.assert_array_equal(a.regret_sum, b.regret_sum)

    def test_counters_bounded(self, direct_config):
        s = run_monte_carlo(direct_config, ("perturbed",), reps=2, master_seed=1)["perturbed"]
        for res in s.checks.values():
            assert 0 <= res.violations <= res.periods <= 2 * direct_config.run.horizon
        assert s.clamp_count <= 2 * direct_config.run.horizon

    def test_ci_shrinks(self, direct_config):
        cfg = direct_config.with_overrides(run={"horizon": 100})
        widths = [
            run_monte_carlo(cfg, ("myopic",), reps=r, master_seed=0, with_checks=False)["myopic"].regret_ci[-1]
            for r in (10, 40, 160)
        ]
        # each 4x in R should roughly halve the half-width
        assert 0.3 < widths[1] / widths[0] < 0.8
        assert 0.3 < widths[2] / widths[1] < 0.8

    def test_errors_abort_replication(self, direct_config, monkeypatch):
        real = harness.run_episode

        def flaky(scenario, kind, seed=None, shocks=None):
            if kind == "myopic" and seed.spawn_key[-1] == 1:
                raise EpisodeError(5, RuntimeError("forced"))
            return real(scenario, kind, seed, shocks)

        monkeypatch.setattr(harness, "run_episode", flaky)
        s = run_monte_carlo(direct_config, ("myopic", "perturbed"), reps=3, master_seed=0, workers=1)
        assert s["myopic"].completed == 2 and len(s["myopic"].errors) == 1
        assert s["perturbed"].completed == 3

    def test_redraw_population(self, small_config):
        cfg = small_config.with_overrides(model={"redraw_population": True}, run={"horizon": 50})
        thetas = []
        run_monte_carlo(cfg, ("oracle",), reps=2, on_trace=lambda k, r, tr: thetas.append(tr.theta))
        assert thetas[0] != thetas[1]

    def test_rejects_zero_reps(self, direct_config):
        with pytest.raises(ValueError):
            run_monte_carlo(direct_config, ("myopic",), reps=0)


class TestSlopes:
    t = np.arange(1, 10_001, dtype=float)

    def test_linear(self):
        assert loglog_slope(self.t, 3 * self.t, 10, 10_000)[0] == pytest.approx(1.0, abs=1e-12)

    def test_sqrt(self):
        assert loglog_slope(self.t, np.sqrt(self.t), 10, 10_000)[0] == pytest.approx(0.5, abs=1e-12)

    def test_log_squared(self):
        sel = self.t >= 1000
        slope, _ = loglog_slope(self.t, np.log(self.t) ** 2, 1000, 10_000)
        x = np.log(self.t[sel])
        assert slope == pytest.approx(np.polyfit(x, np.log(x**2), 1)[0], rel=1e-10)
        # d log(log^2 t) / d log t = 2 / log t, roughly averaged over the window
        assert slope == pytest.approx(2 / np.mean(x), rel=0.05)
        assert slope < 0.5

    def test_rejects(self):
        with pytest.raises(ValueError):
            loglog_slope(self.t, self.t - 50, 10, 100)
        with pytest.raises(ValueError):
            loglog_slope(self.t, self.t, 5, 6)

    def test_mse_decay(self):
        s = MonteCarloSummary("perturbed", 1, 10_000)
        s.completed = 1
        s.theta_sq_err_sum[:] = np.log(self.t + 1) / np.sqrt(self.t)
        slope, _ = mse_decay_check(s)
        sel = self.t >= 1000
        assert slope == pytest.approx(-0.5 + 1 / np.mean(np.log(self.t[sel])), abs=0.01)
        s.theta_sq_err_sum[:] = 0.3
        assert mse_decay_check(s)[0] == pytest.approx(0.0, abs=1e-12)
