import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from spadreadout.histogram import PARAMETERS, fit_histogram, mixture_pmf
from spadreadout.stats import FitError

W = 2.9e-3


def _nb(k, mean, f):
    if f == 1.0:
        return stats.poisson.pmf(k, mean)
    return stats.nbinom.pmf(k, mean / (f - 1), 1 / f)


@pytest.mark.invariant
@given(w=st.floats(0, 1), mb=st.floats(1, 400), md=st.floats(0.5, 150), f=st.floats(1.0, 2.0),
       g=st.floats(0, 50))
def test_mixture_normalised(w, mb, md, f, g):
    k_max = int(max(mb, md) + 15 * math.sqrt(f * max(mb, md)) + 40)
    p = mixture_pmf(k_max, W, w, mb, md, f, g)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6


def test_mixture_without_decay_is_two_component():
    k = np.arange(500)
    p = mixture_pmf(499, W, 0.3, 307.4, 110.2, 1.2, 0.0)
    expected = 0.3 * stats.poisson.pmf(k, 307.4) + 0.7 * _nb(k, 110.2, 1.2)
    assert np.allclose(p, expected, rtol=1e-10, atol=1e-300)


@pytest.mark.parametrize("k", [60, 150, 200, 280])
def test_plateau_matches_adaptive_quadrature(k):
    # oracle: adaptive quadrature over the decay time of the explicit convolution sum
    mb, md, f, g = 307.4, 110.2, 1.2, 30.0
    j = np.arange(k + 1)

    def integrand(t):
        a = _nb(j, md * t / W, f) if t > 0 else (j == 0).astype(float)
        b = stats.poisson.pmf(k - j, mb * (W - t) / W)
        return g * math.exp(-g * t) * float(np.dot(a, b))

    decayed, _ = integrate.quad(integrand, 0, W, limit=200, epsabs=1e-14)
    oracle = math.exp(-g * W) * _nb(k, md, f) + decayed
    assert mixture_pmf(400, W, 0.0, mb, md, f, g)[k] == pytest.approx(oracle, rel=1e-6)


@pytest.mark.slow
def test_exact_recovery_and_plateau_linearity():
    fits = []
    for g in (1 / 0.390, 2 / 0.390):
        h = 40_000 * mixture_pmf(700, W, 0.5, 307.4, 110.2, 1.2, g)[:500]
        fit = fit_histogram(h, W, 25e-6)
        truth = dict(zip(PARAMETERS, (0.5, 307.4, 110.2, 1.2, g)))
        for name, value in truth.items():
            assert fit.values()[name] == pytest.approx(value, rel=1e-4), name
        assert fit.chi2_per_dof < 1e-6
        fits.append(fit)
    # plateau height doubles with the decay rate to first order in gamma W
    ratio = fits[1].plateau_fraction / fits[0].plateau_fraction
    assert ratio == pytest.approx(2.0, rel=0.01)
    assert fits[0].bright_rate == pytest.approx(106e3, rel=1e-3)
    assert fits[0].dark_rate == pytest.approx(38e3, rel=1e-3)


@pytest.mark.invariant
def test_pure_bright_histogram_flags_dark_parameters():
    rng = np.random.default_rng(4)
    h = np.bincount(rng.poisson(307.4, 5000))
    fit = fit_histogram(h, W, 25e-6)
    assert set(fit.unidentifiable) == {"dark_mean", "dispersion", "decay_rate"}
    assert fit.bright_weight == 1.0
    assert fit.bright_mean == pytest.approx(307.4, rel=0.01)
    assert abs(fit.bright_mean - 307.4) < 3 * fit.stderr["bright_mean"]
    for name, value in fit.values().items():
        if name in fit.unidentifiable:
            assert math.isnan(value)
        else:
            assert value >= 0
    assert "unidentifiable = dark_mean,dispersion,decay_rate" in fit.summary()


def test_pure_dark_histogram():
    h = np.bincount(stats.nbinom.rvs(110.2 / 0.2, 1 / 1.2, size=5000, random_state=5))
    fit = fit_histogram(h, W, 25e-6)
    assert fit.bright_weight == 0.0 and set(fit.unidentifiable) == {"bright_mean", "decay_rate"}
    assert abs(fit.dispersion - 1.2) < 3 * fit.stderr["dispersion"]


def test_fit_failure_reports_last_iterate():
    h = 2000 * mixture_pmf(500, W, 0.5, 307.4, 110.2, 1.2, 2.6)[:450]
    with pytest.raises(FitError) as e:
        fit_histogram(h, W, 25e-6, max_iterations=5)
    assert set(e.value.diagnostics["last"]) == set(PARAMETERS)


def test_fit_argument_errors():
    with pytest.raises(ValueError):
        fit_histogram(np.ones(10), W, 25e-6)
    with pytest.raises(ValueError):
        fit_histogram(-np.ones(2000), W, 25e-6)
