from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from coarsekit import functionals as fn
from coarsekit.core import Dataset, KernelSpec, Observation
from coarsekit.dgp import (
    oracle_nuisances,
    population_quantile_binning,
    sample_dataset,
    true_delta_h,
    true_delta_tilde_h,
    true_gamma,
    true_psi,
)
from coarsekit.errors import ConfigError, FitError
from coarsekit.estimators import (
    EstimationPlan,
    EstimatorId,
    bootstrap_ci,
    build_scheme,
    eif_smoothed,
    estimate,
    onestep_psi,
    onestep_psi_h,
    onestep_psi_tilde_h1,
    onestep_psi_tilde_h2,
    onestep_psi_tilde_hb,
    plugin_gamma,
    plugin_psi,
    psi_tilde_hb_population,
)
from coarsekit.nuisance import MisspecConfig, fit_nuisances

PSI = 1.563984


def _population(Q, values):
    return float(Q.c_probs @ values)


def _psi_h(spec, scheme):
    Q = oracle_nuisances(spec, scheme)
    return _population(Q, fn.theta_h(Q, scheme, Q.c_levels))


@pytest.fixture(scope="module")
def big(spec):
    return sample_dataset(spec, 10**6, 4242)


# -- ids ------------------------------------------------------------------------------


def test_estimator_ids():
    assert EstimatorId.parse("psi_h_onestep") is EstimatorId.PSI_H_ONESTEP
    with pytest.raises(ConfigError, match="valid ids: .*gamma_seq_plugin"):
        EstimatorId.parse("psi_magic")
    required = {
        "psi_plugin_exact", "psi_h_plugin", "psi_tilde_h_plugin", "psi_onestep", "psi_h_onestep",
        "psi_tilde_h1_onestep", "psi_tilde_h2_onestep", "psi_tilde_hb_onestep_fixed",
        "gamma_h_plugin", "gamma_tilde_h_plugin", "gamma_seq_plugin",
    }
    assert required <= {e.value for e in EstimatorId}


# -- plug-ins ------------------------------------------------------------------------------


def test_coarsened_plugin_oracle(spec, scheme2, big):
    Q = oracle_nuisances(spec, scheme2)
    res = plugin_psi(big, Q, "coarsened", scheme2)
    rows = fn.theta_h(Q, scheme2, big.c)
    se = rows.std() / math.sqrt(big.n)
    target = true_psi(spec) + _population(Q, true_delta_h(spec, scheme2, Q.c_levels))
    assert abs(res.point - target) < 3 * se
    assert res.ci_method == "none" and res.se is None


def test_debiased_plugin_oracle_k8(spec, big):
    s = population_quantile_binning(spec, 8)
    Q = oracle_nuisances(spec, s)
    res = plugin_psi(big, Q, "debiased", s)
    se = fn.theta_tilde_h(Q, s, big.c).std() / math.sqrt(big.n)
    gap = abs(_population(Q, true_delta_tilde_h(spec, s, Q.c_levels)))
    assert abs(res.point - PSI) < gap + 3 * se


def test_plugin_single_row(oracle6, scheme6):
    one = Dataset([1.0], [0], [0.3], [2.0])
    assert plugin_psi(one, oracle6, "debiased", scheme6).point == pytest.approx(float(fn.theta_tilde_h(oracle6, scheme6, 1.0)))
    assert plugin_psi(one, oracle6, "exact").point == pytest.approx(float(fn.theta(oracle6, 1.0)))


def test_plugin_variant_checks(data5000, oracle6):
    with pytest.raises(ConfigError):
        plugin_psi(data5000, oracle6, "median")
    with pytest.raises(ConfigError):
        plugin_psi(data5000, oracle6, "smoothed")
    with pytest.raises(ConfigError):
        plugin_gamma(data5000, oracle6, "exact")


@pytest.mark.parametrize("K", range(2, 11))
def test_debiased_plugin_dominates_at_truth(spec, K):
    s = population_quantile_binning(spec, K)
    Q = oracle_nuisances(spec, s)
    th = fn.theta(Q, Q.c_levels)
    bias_h = _population(Q, fn.theta_h(Q, s, Q.c_levels) - th)
    bias_t = _population(Q, fn.theta_tilde_h(Q, s, Q.c_levels) - th)
    assert abs(bias_t) < abs(bias_h)


# -- front door ----------------------------------------------------------------------------


def test_gamma_debiased_vs_sequential(spec, oracle6, scheme6):
    d = sample_dataset(spec, 10**5, 31)
    deb = plugin_gamma(d, oracle6, "debiased", scheme6)
    seq = plugin_gamma(d, oracle6, "sequential", scheme6)
    rows = (d.a == 0) * d.y + fn.theta_tilde_h(oracle6, scheme6, d.c) * spec.propensity(1, d.c)
    se = rows.std() / math.sqrt(d.n)
    # the debiased variant carries its population coarsening gap
    gap = abs(_population(oracle6, true_delta_tilde_h(spec, scheme6, oracle6.c_levels) * spec.propensity(1, oracle6.c_levels)))
    assert abs(deb.point - seq.point) < gap + 3 * math.sqrt(2) * se
    assert abs(seq.point - true_gamma(spec)) < 3 * se


def test_gamma_degenerate_propensity(data5000, oracle6, scheme6):
    Q = dataclasses.replace(oracle6, pi=lambda a, c: np.where(np.asarray(a) == 1, 0.0, 1.0) * np.ones(np.shape(c)))
    expected = np.mean(data5000.y * (data5000.a == 0))
    assert plugin_gamma(data5000, Q, "debiased", scheme6).point == pytest.approx(expected, abs=1e-12)


def test_gamma_coarsened_exceeds_debiased(spec, scheme2, big):
    Q = oracle_nuisances(spec, scheme2)
    gap = plugin_gamma(big, Q, "coarsened", scheme2).point - plugin_gamma(big, Q, "debiased", scheme2).point
    expected = _population(Q, (fn.theta_h(Q, scheme2, Q.c_levels) - fn.theta_tilde_h(Q, scheme2, Q.c_levels)) * spec.propensity(1, Q.c_levels))
    assert gap > 0
    assert gap == pytest.approx(expected, rel=0.1)


def test_sequential_needs_control_rows(oracle6, scheme6):
    d = Dataset([0.0, 1.0, -1.0], [1, 1, 1], [0.2, 0.4, 0.1], [1.0, 2.0, 0.5])
    with pytest.raises(FitError):
        plugin_gamma(d, oracle6, "sequential", scheme6)


# -- one-step estimators -------------------------------------------------------------------


def test_onestep_oracle_n5000(spec, oracle6, data5000):
    res = onestep_psi(data5000, oracle6)
    assert abs(res.point - PSI) < 3 * res.se
    assert res.ci_lo < res.point < res.ci_hi


def test_summands_center_exactly(oracle6, data5000):
    res = onestep_psi(data5000, oracle6)
    summand = res.plugin + res.influence
    assert np.mean(summand - res.point) == pytest.approx(0.0, abs=1e-12)


def test_onestep_condition1_robust(spec, data50k):
    s = build_scheme(data50k.m, 4)
    Q = fit_nuisances(data50k, s, MisspecConfig.named("condition1"), components={"mu", "f_mac", "pi", "g_amc"})
    res = onestep_psi(data50k, Q)
    assert abs(res.point - PSI) < 3 * res.se


def test_coarsened_onestep_targets_psi_h(spec, scheme2, big):
    Q = oracle_nuisances(spec, scheme2)
    res = onestep_psi_h(big, Q, scheme2)
    gap = _population(Q, true_delta_h(spec, scheme2, Q.c_levels))
    assert abs((res.point - PSI) - gap) < 3 * res.se


@pytest.mark.parametrize("bad", ["mu_k", "g_k", "pi"])
def test_triple_robustness(spec, data50k, bad):
    s = build_scheme(data50k.m, 4)
    Q = fit_nuisances(data50k, s, MisspecConfig.from_flags(bad), components={"mu_k", "g_k", "pi"})
    res = onestep_psi_h(data50k, Q, s)
    assert abs(res.point - _psi_h(spec, s)) < 4 * res.se


def test_onestep_h_residual_free(spec, oracle6, scheme6, data5000):
    d = data5000
    k = scheme6.assign(d.m)
    y = oracle6.mu_k(k, 1, d.c)
    d0 = Dataset(d.c, d.a, d.m, y)
    res = onestep_psi_h(d0, oracle6, scheme6)
    th = fn.theta_h(oracle6, scheme6, d.c)
    aug = (d.a == 0) / spec.propensity(0, d.c) * (oracle6.mu_k(k, 1, d.c) - th)
    assert res.point == pytest.approx(np.mean(th + aug), abs=1e-12)


def test_h1_and_h2(spec, scheme4, oracle4):
    d = sample_dataset(spec, 5000, 1)
    h1 = onestep_psi_tilde_h1(d, oracle4, scheme4)
    h2 = onestep_psi_tilde_h2(d, oracle4, scheme4)
    h = onestep_psi_h(d, oracle4, scheme4)
    assert abs(h2.point - PSI) < 3 * h2.se
    assert abs(h1.point - _psi_h(spec, scheme4)) < 3 * h1.se
    assert abs(h1.point - PSI) > 3 * h1.se
    assert abs(h1.point - PSI) == pytest.approx(abs(h.point - PSI), rel=0.5)


def test_h1_h2_residual_free(spec, oracle4, scheme4, data5000):
    d = data5000
    k = scheme4.assign(d.m)
    y1 = oracle4.mu(oracle4.m_k(k, 0, d.c), 1, d.c)
    r1 = onestep_psi_tilde_h1(Dataset(d.c, d.a, d.m, y1), oracle4, scheme4)
    th = fn.theta_tilde_h(oracle4, scheme4, d.c)
    aug = (d.a == 0) / spec.propensity(0, d.c) * (y1 - th)
    assert r1.point == pytest.approx(np.mean(th + aug), abs=1e-12)
    y2 = oracle4.mu(d.m, 1, d.c)
    r2 = onestep_psi_tilde_h2(Dataset(d.c, d.a, d.m, y2), oracle4, scheme4)
    aug2 = (d.a == 0) / spec.propensity(0, d.c) * (oracle4.mu(d.m, 1, d.c) - th)
    assert r2.point == pytest.approx(np.mean(th + aug2), abs=1e-12)


def test_onestep_is_plugin_plus_mean_influence(oracle6, scheme6, data5000):
    kern = KernelSpec(0.3)
    for res in (
        onestep_psi(data5000, oracle6),
        onestep_psi_h(data5000, oracle6, scheme6),
        onestep_psi_tilde_h1(data5000, oracle6, scheme6),
        onestep_psi_tilde_h2(data5000, oracle6, scheme6),
        onestep_psi_tilde_hb(data5000, oracle6, kern, scheme6),
        onestep_psi_tilde_hb(data5000, oracle6, kern, scheme6, fixed_centers=False),
    ):
        assert res.point == pytest.approx(res.plugin + float(np.mean(res.influence)), abs=1e-12)
        assert res.se == pytest.approx(np.std(res.influence, ddof=1) / math.sqrt(data5000.n), rel=1e-12)


# -- smoothed functional --------------------------------------------------------------------


def test_smoothed_onestep_oracle(spec, oracle6, scheme6, data5000):
    kern = KernelSpec(0.25)
    res = onestep_psi_tilde_hb(data5000, oracle6, kern, scheme6)
    gap = abs(psi_tilde_hb_population(oracle6, kern, scheme6) - PSI)
    assert abs(res.point - PSI) < 3 * res.se + gap


def test_fixed_center_toggle_is_additive(oracle6, scheme6, data5000):
    kern = KernelSpec(0.25)
    fixed = onestep_psi_tilde_hb(data5000, oracle6, kern, scheme6)
    full = onestep_psi_tilde_hb(data5000, oracle6, kern, scheme6, fixed_centers=False)
    assert full.point - fixed.point == pytest.approx(float(np.mean(fixed.extras["phi_omega"])), abs=1e-12)


def test_eif_mean_zero(spec, oracle6, scheme6):
    kern = KernelSpec(0.25)
    d = sample_dataset(spec, 2 * 10**5, 55)
    for fixed in (True, False):
        v = eif_smoothed(oracle6, kern, scheme6, d, fixed_centers=fixed)
        assert abs(v.mean()) < 3 * v.std() / math.sqrt(d.n)


def test_eif_control_observation(spec, oracle6, scheme6):
    kern = KernelSpec(0.25)
    obs = Observation(1.0, 0, 0.4, -3.0)
    k = int(scheme6.assign(np.array([0.4]))[0])
    psi = psi_tilde_hb_population(oracle6, kern, scheme6)
    th = float(fn.theta_tilde_hb(oracle6, kern, scheme6, 1.0))
    mub = float(fn.mu_bk(oracle6, kern, scheme6, k, 1.0))
    expected = (mub - th) / spec.propensity(0, 1.0) + th - psi
    assert eif_smoothed(oracle6, kern, scheme6, obs) == pytest.approx(float(expected), abs=1e-10)
    # the Y-value of a control row never enters
    assert eif_smoothed(oracle6, kern, scheme6, Observation(1.0, 0, 0.4, 9.0)) == pytest.approx(float(expected), abs=1e-10)


# -- pipeline --------------------------------------------------------------------------------


ALL_IDS = [e for e in EstimatorId]


def test_estimate_runs_every_estimator(data5000):
    out = estimate(data5000, ALL_IDS, EstimationPlan(K=4, bandwidth=0.3))
    assert list(out) == ALL_IDS
    for eid, res in out.items():
        assert res.estimator_id == eid.value
        assert math.isfinite(res.point)
        assert abs(res.point - (PSI if eid.value.startswith("psi") else true_gamma_value())) < 1.5


def true_gamma_value():
    return 0.8531953726315912


def test_estimate_row_permutation_invariant(data5000):
    perm = np.random.default_rng(0).permutation(data5000.n)
    ids = ["psi_h_plugin", "psi_tilde_h_plugin", "psi_onestep", "psi_h_onestep", "psi_tilde_h2_onestep", "gamma_seq_plugin"]
    plan = EstimationPlan(K=4)
    a = estimate(data5000, ids, plan)
    b = estimate(data5000.take(perm), ids, plan)
    for eid in a:
        assert a[eid].point == pytest.approx(b[eid].point, abs=1e-10)
        if a[eid].se is not None:
            assert a[eid].se == pytest.approx(b[eid].se, rel=1e-8)


def test_plugin_influence_interval(data5000):
    plan = EstimationPlan(K=4, plugin_ci="influence_function")
    out = estimate(data5000, ["psi_tilde_h_plugin", "psi_tilde_h2_onestep"], plan)
    plug, os_ = out[EstimatorId.PSI_TILDE_H_PLUGIN], out[EstimatorId.PSI_TILDE_H2_ONESTEP]
    assert plug.ci_method == "influence_function"
    assert plug.se == pytest.approx(os_.se)
    assert plug.point == pytest.approx((plug.ci_lo + plug.ci_hi) / 2)
    assert plug.point == pytest.approx(os_.plugin)


def test_estimate_records_failures(spec):
    d = sample_dataset(spec, 300, 5)
    out = estimate(d, ["psi_h_plugin", "psi_onestep"], EstimationPlan(K=12), errors="record")
    assert isinstance(out[EstimatorId.PSI_H_PLUGIN], FitError)
    assert math.isfinite(out[EstimatorId.PSI_ONESTEP].point)
    with pytest.raises(FitError):
        estimate(d, ["psi_h_plugin"], EstimationPlan(K=12))


def test_estimate_argument_checks(data5000):
    with pytest.raises(ConfigError):
        EstimationPlan(K=1)
    with pytest.raises(ConfigError):
        estimate(data5000, ["psi_tilde_hb_onestep_fixed"], EstimationPlan())
    with pytest.raises(ConfigError):
        estimate(data5000, ["nope"])
    with pytest.raises(ConfigError):
        build_scheme(data5000.m, 4, "kmeans")


def test_equal_width_scheme(data5000):
    s = build_scheme(data5000.m, 5, "equal_width")
    np.testing.assert_allclose(np.diff(s.cuts), np.diff(s.cuts)[0])
    assert s.support[0] < data5000.m.min() and s.support[1] > data5000.m.max()


def test_crossfit(data5000):
    plan = EstimationPlan(K=4, crossfit=True, crossfit_seed=3)
    a = estimate(data5000, ["psi_onestep", "psi_tilde_h2_onestep"], plan)
    b = estimate(data5000, ["psi_onestep", "psi_tilde_h2_onestep"], plan)
    for eid in a:
        assert a[eid].point == b[eid].point
        assert abs(a[eid].point - PSI) < 4 * a[eid].se


# -- bootstrap --------------------------------------------------------------------------------


def test_bootstrap_deterministic(spec):
    d = sample_dataset(spec, 1500, 9)
    plan = EstimationPlan(K=4)
    a = bootstrap_ci("psi_tilde_h_plugin", d, plan, B=20, seed=4)
    b = bootstrap_ci("psi_tilde_h_plugin", d, plan, B=20, seed=4)
    assert a == b or (a.ci_lo, a.ci_hi, a.point) == (b.ci_lo, b.ci_hi, b.point)
    assert a.ci_method == "bootstrap_percentile"
    assert a.ci_lo <= a.ci_hi
    assert a.extras["B"] == 20


def test_bootstrap_constant_outcome(spec):
    d = sample_dataset(spec, 800, 3)
    flat = Dataset(d.c, d.a, d.m, np.full(d.n, 2.5))
    res = bootstrap_ci("psi_tilde_h_plugin", flat, EstimationPlan(K=3), B=10, seed=1)
    assert res.point == pytest.approx(2.5, abs=1e-8)
    assert res.ci_hi - res.ci_lo == pytest.approx(0.0, abs=1e-8)


def test_bootstrap_argument_checks(data5000):
    with pytest.raises(ConfigError):
        bootstrap_ci("psi_h_plugin", data5000, B=1)


def test_bootstrap_failure_threshold(spec, monkeypatch):
    import coarsekit.estimators as est

    d = sample_dataset(spec, 500, 8)
    real = est.estimate
    calls = []

    def flaky(data, ids, plan=None, **kw):
        calls.append(1)
        if len(calls) > 1 and len(calls) % 4 == 0:
            raise FitError("synthetic")
        return real(data, ids, plan, **kw)

    monkeypatch.setattr(est, "estimate", flaky)
    with pytest.raises(FitError, match="resamples failed"):
        bootstrap_ci("psi_tilde_h_plugin", d, EstimationPlan(K=3), B=20, seed=0)


# -- large-K agreement -----------------------------------------------------------------------


def test_large_k_coarsened_onestep_approaches_exact(spec):
    s = population_quantile_binning(spec, 64)
    Q = oracle_nuisances(spec, s)
    d = sample_dataset(spec, 10**6, 0)
    a, b = onestep_psi(d, Q), onestep_psi_h(d, Q, s)
    assert abs(a.point - b.point) < 3 * math.hypot(a.se, b.se)


@pytest.mark.parametrize("scenario", ["correct", "condition3"])
def test_h2_coverage_under_propensity_misspecification(spec, scenario):
    plan = EstimationPlan(K=4, config=MisspecConfig.named(scenario))
    hits = []
    for seq in np.random.SeedSequence(0).spawn(300):
        res = estimate(sample_dataset(spec, 5000, seq), ["psi_tilde_h2_onestep"], plan)[EstimatorId.PSI_TILDE_H2_ONESTEP]
        hits.append(res.ci_lo <= PSI <= res.ci_hi)
    assert 0.92 <= np.mean(hits) <= 0.975
