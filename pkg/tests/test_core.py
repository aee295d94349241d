from __future__ import annotations

import numpy as np
import pytest
from scipy import integrate

from coarsekit.core import (
    BinningScheme,
    Dataset,
    EstimateResult,
    KernelSpec,
    Observation,
    assign_bin,
    make_equal_width_binning,
    make_quantile_binning,
)
from coarsekit.dgp import population_quantile_binning, sample_dataset
from coarsekit.errors import ConfigError, DomainError


# -- observations and datasets ------------------------------------------------


def test_observation_validates_treatment_and_finiteness():
    Observation(0.0, 1, 0.5, 2.0)
    with pytest.raises(DomainError):
        Observation(0.0, 2, 0.5, 2.0)
    with pytest.raises(DomainError):
        Observation(0.0, 0, float("nan"), 2.0)
    with pytest.raises(DomainError):
        Observation(float("inf"), 0, 0.0, 2.0)


def test_dataset_columns_are_read_only():
    d = Dataset([0.0, 1.0], [0, 1], [0.1, 0.2], [1.0, 2.0])
    assert d.n == len(d) == 2
    with pytest.raises(ValueError):
        d.m[0] = 3.0


def test_dataset_rejects_ragged_and_bad_columns():
    with pytest.raises(DomainError):
        Dataset([0.0], [0, 1], [0.1, 0.2], [1.0, 2.0])
    with pytest.raises(DomainError):
        Dataset([0.0, 1.0], [0, 3], [0.1, 0.2], [1.0, 2.0])


def test_dataset_rows_round_trip():
    rows = [Observation(1.0, 0, -0.5, 3.0), Observation(-2.0, 1, 2.5, -1.0)]
    d = Dataset.from_rows(rows)
    assert list(d.rows) == rows


def test_csv_round_trip_is_exact(tmp_path, spec):
    d = sample_dataset(spec, 50, 3)
    path = tmp_path / "d.csv"
    text = d.to_csv(path)
    assert text.splitlines()[0] == "c,a,m,y"
    assert len(text.splitlines()) == 51
    back = Dataset.read_csv(path)
    for col in "camy":
        np.testing.assert_array_equal(getattr(back, col), getattr(d, col))


def test_read_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,a,m,y\n1,0,0,0\n")
    with pytest.raises(ConfigError):
        Dataset.read_csv(p)


def test_read_csv_rejects_bad_field(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("c,a,m,y\n1,0,zero,0\n")
    with pytest.raises(ConfigError, match=":2"):
        Dataset.read_csv(p)


# -- binning ------------------------------------------------------------------


def test_assign_bin_below_single_cut():
    assert assign_bin(BinningScheme([0.0], (-10, 10)), -1.0) == 1


def test_assign_bin_boundary_goes_to_upper_bin():
    assert assign_bin(BinningScheme([0.0], (-10, 10)), 0.0) == 2


def test_assign_bin_interior():
    assert assign_bin(BinningScheme([-0.5, 0.5], (-10, 10)), 0.1) == 2


def test_assign_bin_rejects_non_finite():
    with pytest.raises(DomainError):
        assign_bin(BinningScheme([0.0], (-10, 10)), float("nan"))


def test_assign_covers_the_real_line():
    s = BinningScheme([-1.0, 0.0, 2.0], (-5, 5))
    m = np.array([-1e9, -1.0, -0.5, 0.0, 1.999, 2.0, 1e9])
    np.testing.assert_array_equal(s.assign(m), [1, 2, 2, 3, 3, 4, 4])


def test_scheme_widths_use_support_for_edge_bins():
    s = BinningScheme([-1.0, 0.0, 2.0], (-5, 5))
    np.testing.assert_allclose(s.widths, [4.0, 1.0, 2.0, 3.0])
    assert s.w_max == 4.0
    assert s.K == 4


def test_scheme_validation():
    with pytest.raises(ConfigError):
        BinningScheme([1.0, 0.0], (-5, 5))
    with pytest.raises(ConfigError):
        BinningScheme([0.0, 0.0], (-5, 5))
    with pytest.raises(ConfigError):
        BinningScheme([6.0], (-5, 5))


def test_single_bin_scheme():
    s = BinningScheme([], (-1, 1))
    assert s.K == 1
    assert assign_bin(s, 100.0) == 1


def test_quantile_binning_median_interpolates():
    s = make_quantile_binning([1, 2, 3, 4], 2)
    np.testing.assert_allclose(s.cuts, [2.5])


def test_quantile_binning_rejects_constant_values():
    with pytest.raises(ConfigError):
        make_quantile_binning([1, 1, 1, 1], 2)


def test_quantile_binning_argument_checks():
    with pytest.raises(ConfigError):
        make_quantile_binning([1, 2, 3], 1)
    with pytest.raises(ConfigError):
        make_quantile_binning([1, 2], 3)


def test_quantile_binning_collapses_duplicate_cuts(caplog):
    values = [0, 0, 0, 0, 0, 0, 1, 2, 3]
    s = make_quantile_binning(values, 4)
    assert s.K < 4
    assert "collapsed" in caplog.text


def test_quantile_binning_median_matches_population_oracle(spec):
    # population median of the mixture from independent CDF root-finding
    d = sample_dataset(spec, 10**6, 99)
    s = make_quantile_binning(d.m, 2)
    assert abs(s.cuts[0] - 1.2074712821279403) < 0.01
    assert abs(population_quantile_binning(spec, 2).cuts[0] - 1.2074712821279403) < 1e-9


def test_equal_frequency_bins_have_nearly_equal_mass(spec):
    n, K = 10**5, 8
    d = sample_dataset(spec, n, 5)
    s = make_quantile_binning(d.m, K)
    freq = np.bincount(s.assign(d.m) - 1, minlength=K) / n
    assert np.all(np.abs(freq - 1 / K) <= 3 * np.sqrt(1 / (4 * n * K)))
    assert np.bincount(s.assign(d.m)).sum() == n


def test_equal_width_binning():
    s = make_equal_width_binning(4, (0.0, 8.0))
    np.testing.assert_allclose(s.cuts, [2.0, 4.0, 6.0])
    np.testing.assert_allclose(s.widths, 2.0)


# -- kernel -------------------------------------------------------------------


@pytest.mark.parametrize("b", [0.1, 0.5, 2.0])
def test_kernel_moments(b):
    k = KernelSpec(b)
    lim = 12 * b
    mass = integrate.quad(k, -lim, lim)[0]
    first = integrate.quad(lambda u: u * k(u), -lim, lim)[0]
    second = integrate.quad(lambda u: u * u * k(u), -lim, lim)[0]
    assert abs(mass - 1) < 1e-6
    assert abs(first) < 1e-6
    assert abs(second - b * b) < 1e-6
    assert k(0.3) == k(-0.3)


def test_kernel_derivative_matches_finite_difference():
    k = KernelSpec(0.4)
    u, h = np.linspace(-1, 1, 11), 1e-6
    np.testing.assert_allclose(k.derivative(u), (k(u + h) - k(u - h)) / (2 * h), rtol=1e-6, atol=1e-8)


def test_kernel_validation():
    with pytest.raises(ConfigError):
        KernelSpec(0.0)
    with pytest.raises(ConfigError):
        KernelSpec(0.5, family="epanechnikov")


# -- results ------------------------------------------------------------------


def test_estimate_result_serializes_required_fields():
    r = EstimateResult("psi_h_plugin", 1.0, 0.1, 0.8, 1.2, "influence_function", 3)
    assert set(r.to_dict()) == {"id", "point", "se", "ci_lo", "ci_hi", "ci_method", "clip_count"}
    assert '"id": "psi_h_plugin"' in r.to_json()


def test_estimate_result_allows_asymmetric_interval():
    EstimateResult("x", 1.0, 0.1, 1.05, 1.3, "bootstrap_percentile")


def test_estimate_result_validation():
    with pytest.raises(ConfigError):
        EstimateResult("x", 1.0, -0.1)
    with pytest.raises(ConfigError):
        EstimateResult("x", 1.0, 0.1, 2.0, 1.0, "influence_function")
    with pytest.raises(ConfigError):
        EstimateResult("x", 1.0, ci_method="wald")
