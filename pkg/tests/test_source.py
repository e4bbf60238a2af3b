import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from spadreadout.source import (
    CountRecord,
    IonState,
    PmfKind,
    RateModel,
    Trajectory,
    bin_mean_profile,
    log_pmf,
    pmf,
    sample_count_matrix,
    sample_counts,
    sample_trajectory,
)


def test_ion_state_has_two_values():
    assert {s.name for s in IonState} == {"BRIGHT", "DARK"}


@pytest.mark.invariant
def test_rate_model_validation():
    with pytest.raises(ValueError):
        RateModel(10.0, 20.0)
    with pytest.raises(ValueError):
        RateModel(10.0, 1.0, dispersion=0.9)
    with pytest.raises(ValueError):
        RateModel(10.0, 1.0, bin_width=0.0)
    with pytest.raises(ValueError):
        RateModel(10.0, 1.0, decay_rate=-1.0)


def test_background_breakdown_tolerance():
    # contributions quoted before saturation add to slightly more than the dark rate
    parts = {"422": 24.22e3, "1092": 14.29e3, "lab": 0.84e3, "rf": 0.16e3, "dcr": 0.11e3}
    RateModel(106e3, 38e3, background_breakdown=parts)
    with pytest.raises(ValueError, match="away from dark_rate"):
        RateModel(106e3, 30e3, background_breakdown=parts)


@pytest.mark.invariant
def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(IonState.BRIGHT, 1e-3)
    with pytest.raises(ValueError):
        Trajectory(IonState.DARK, -1.0)
    assert Trajectory(IonState.BRIGHT).switch_time == 0.0
    assert Trajectory(IonState.DARK).switch_time == math.inf


@pytest.mark.invariant
def test_count_record_invariants():
    with pytest.raises(ValueError):
        CountRecord([], Trajectory(IonState.DARK))
    with pytest.raises(ValueError):
        CountRecord([1, -1], Trajectory(IonState.DARK))


def test_sample_trajectory_trivial_cases(rng):
    assert sample_trajectory(IonState.BRIGHT, 2.564, 1e-3, rng).decay_time is None
    assert sample_trajectory(IonState.DARK, 0.0, 1e-3, rng).decay_time is None
    with pytest.raises(ValueError):
        sample_trajectory(IonState.DARK, -1.0, 1e-3, rng)
    with pytest.raises(ValueError):
        sample_trajectory(IonState.DARK, 1.0, 0.0, rng)


def test_decay_within_window_fraction():
    # closed-form exponential CDF as oracle, 1e6 draws through sample_trajectory
    gamma, window, n = 1 / 0.390, 950e-6, 1_000_000
    rng = np.random.default_rng(7)
    hits = sum(sample_trajectory(IonState.DARK, gamma, window, rng).decay_time is not None for _ in range(n))
    p = -math.expm1(-gamma * window)
    assert p == pytest.approx(2.43e-3, rel=2e-3)
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


@pytest.mark.invariant
def test_decay_time_ks():
    rng = np.random.default_rng(9)
    gamma, n = 1 / 0.390, 100_000
    t = np.array([sample_trajectory(IonState.DARK, gamma, 1e9, rng).decay_time for _ in range(n)])
    d = stats.kstest(t, "expon", args=(0, 1 / gamma)).statistic
    assert d < 1.63 / math.sqrt(n)  # 1% critical value


def test_bin_mean_profile_examples(regime_rates):
    bright = bin_mean_profile(Trajectory(IonState.BRIGHT), regime_rates, 10)
    assert np.allclose(bright, 2.65)
    dark = bin_mean_profile(Trajectory(IonState.DARK), regime_rates, 10)
    assert np.allclose(dark, 0.95)
    edge = bin_mean_profile(Trajectory(IonState.DARK, 3 * 25e-6), regime_rates, 6)
    assert np.allclose(edge, [0.95] * 3 + [2.65] * 3)


def test_mixed_bin_mean(regime_rates):
    prof = bin_mean_profile(Trajectory(IonState.DARK, 2.4 * 25e-6), regime_rates, 4)
    assert prof[2] == pytest.approx(38e3 * 0.4 * 25e-6 + 106e3 * 0.6 * 25e-6)


@pytest.mark.invariant
@given(td=st.floats(0, 5e-3), n_bins=st.integers(1, 200))
def test_profile_sum_is_exact(td, n_bins):
    m = RateModel(106e3, 38e3)
    prof = bin_mean_profile(Trajectory(IonState.DARK, td), m, n_bins)
    window = n_bins * m.bin_width
    dark_time = min(td, window)
    expected = m.dark_rate * dark_time + m.bright_rate * (window - dark_time)
    assert prof.sum() == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_poisson_limit_variance():
    m = RateModel(106e3, 38e3, dispersion=1.0)
    c = sample_count_matrix(np.full(10_000, np.inf), m, 100, np.random.default_rng(1)).ravel()
    ratio = c.var() / c.mean()
    # variance of the sample variance of a Poisson(mu) is ~ mu(1 + 2 mu)/n
    assert abs(ratio - 1.0) < 3 * math.sqrt((1 + 2 * 0.95) / 0.95 / c.size)


def test_negative_binomial_variance():
    m = RateModel(106e3, 38e3, dispersion=1.2)
    c = sample_count_matrix(np.full(10_000, np.inf), m, 100, np.random.default_rng(2)).ravel()
    assert c.mean() == pytest.approx(0.95, abs=0.005)
    assert c.var() == pytest.approx(1.14, abs=0.01)


def test_bright_bins_are_poisson_by_default():
    m = RateModel(106e3, 38e3, dispersion=1.5)
    c = sample_count_matrix(np.zeros(10_000), m, 100, np.random.default_rng(3)).ravel()
    assert c.var() / c.mean() == pytest.approx(1.0, abs=0.02)
    md = m.replace(disperse_bright=True)
    c = sample_count_matrix(np.zeros(10_000), md, 100, np.random.default_rng(3)).ravel()
    assert c.var() / c.mean() == pytest.approx(1.5, abs=0.03)


def test_zero_mean_gives_zero_counts():
    m = RateModel(106e3, 0.0, dispersion=1.2)
    rec = sample_counts(Trajectory(IonState.DARK), m, 50, np.random.default_rng(0))
    assert rec.total == 0


@pytest.mark.invariant
def test_empirical_mean_matches_profile(regime_rates):
    traj = Trajectory(IonState.DARK, 3.3 * 25e-6)
    prof = bin_mean_profile(traj, regime_rates, 8)
    c = sample_count_matrix(np.full(100_000, traj.switch_time), regime_rates, 8, np.random.default_rng(4))
    se = np.sqrt(1.2 * prof / c.shape[0])
    assert np.all(np.abs(c.mean(axis=0) - prof) < 3.5 * se)


def test_sample_counts_record(regime_rates, rng):
    rec = sample_counts(Trajectory(IonState.BRIGHT), regime_rates, 12, rng, detector_label="spad")
    assert len(rec) == 12 and rec.detector_label == "spad" and rec.rate_model_id == "paper-passive"


@pytest.mark.invariant
def test_pmf_examples():
    assert pmf(PmfKind.POISSON, 2.65, 1.0, 0) == pytest.approx(math.exp(-2.65), rel=1e-14)
    assert pmf(PmfKind.POISSON, 2.65, 1.0, 0) == pytest.approx(0.0706, abs=1e-4)
    total = pmf(PmfKind.NEG_BINOMIAL, 0.95, 1.2, np.arange(201)).sum()
    assert abs(total - 1.0) < 1e-12


def test_pmf_negative_binomial_limit():
    k = np.arange(40)
    nb = pmf(PmfKind.NEG_BINOMIAL, 2.65, 1 + 1e-6, k)
    po = pmf(PmfKind.POISSON, 2.65, 1.0, k)
    assert np.max(np.abs(nb - po)) < 1e-6


def test_pmf_matches_scipy_parameterisation():
    mu, f = 0.95, 1.2
    r, p = mu / (f - 1), 1 / f
    k = np.arange(30)
    assert np.allclose(pmf("negbinomial", mu, f, k), stats.nbinom.pmf(k, r, p), rtol=1e-12)


def test_pmf_errors_and_zero_mean():
    with pytest.raises(ValueError):
        pmf(PmfKind.NEG_BINOMIAL, 1.0, 0.5, 0)
    with pytest.raises(ValueError):
        pmf(PmfKind.POISSON, -1.0, 1.0, 0)
    assert pmf(PmfKind.POISSON, 0.0, 1.0, 0) == 1.0
    assert pmf(PmfKind.NEG_BINOMIAL, 0.0, 1.2, 3) == 0.0


def test_log_pmf_no_underflow():
    assert np.isfinite(log_pmf(PmfKind.POISSON, 2.65, 1.0, 900))


@pytest.mark.invariant
@given(mu=st.floats(0.01, 200), f=st.floats(1.0, 4.0))
def test_pmf_normalisation_property(mu, f):
    k_max = int(mu + 40 * math.sqrt(f * mu) + 60)
    total = pmf(PmfKind.NEG_BINOMIAL, mu, f, np.arange(k_max)).sum()
    assert abs(total - 1.0) < 1e-10
