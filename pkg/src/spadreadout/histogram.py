"""Maximum-likelihood fit of a total-count histogram.

The model is a two-component mixture over the whole detection window W:

* bright ions: Poisson with mean ``bright_mean``;
* dark ions: with probability exp(-gamma W) a negative binomial with mean
  ``dark_mean`` and dispersion f; otherwise the ion decays at t in (0, W)
  and the total is NB(dark_mean t/W, f) convolved with
  Poisson(bright_mean (W - t)/W).  The decay-time integral is done by
  Gauss-Legendre quadrature and produces the plateau between the peaks.

The dispersed/Poisson split inside the decay bin is taken at t itself, which
differs from the bin-level simulator only within one bin per decayed trial.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import gammaln, xlogy
from scipy.stats import chi2 as chi2_dist

from .stats import FitError

__all__ = ["HistogramFit", "fit_histogram", "mixture_pmf", "PARAMETERS"]

PARAMETERS = ("bright_weight", "bright_mean", "dark_mean", "dispersion", "decay_rate")
_NODES = 48
# likelihood-ratio level at which a single component is preferred to the mixture
_SINGLE_COMPONENT_LEVEL = 0.99
# stand-ins for unidentifiable values: no decay, and unit means that carry no weight
_PLACEHOLDERS = np.array([1.0, 1.0, 1.0, 1.0, 0.0])


def _nb_logpmf(k, mean, f):
    k = np.asarray(k, dtype=float)
    mean = np.asarray(mean, dtype=float)[..., None]
    if f - 1.0 <= 1e-12:
        return xlogy(k, mean) - mean - gammaln(k + 1)
    r = mean / (f - 1.0)
    out = gammaln(k + r) - gammaln(r) - gammaln(k + 1) + xlogy(k, (f - 1.0) / f) - r * math.log(f)
    return np.where(mean == 0, np.where(k == 0, 0.0, -np.inf), out)


def _poisson_logpmf(k, mean):
    k = np.asarray(k, dtype=float)
    mean = np.asarray(mean, dtype=float)[..., None]
    return xlogy(k, mean) - mean - gammaln(k + 1)


def mixture_pmf(k_max: int, window: float, bright_weight, bright_mean, dark_mean, dispersion, decay_rate,
                nodes: int = _NODES) -> np.ndarray:
    """P(total = k) for k = 0..k_max under the mixture model."""
    k = np.arange(k_max + 1)
    bright = np.exp(_poisson_logpmf(k, np.array(bright_mean)))
    p_stay = math.exp(-decay_rate * window)
    dark = p_stay * np.exp(_nb_logpmf(k, np.array(dark_mean), dispersion))
    if decay_rate > 0:
        x, w = np.polynomial.legendre.leggauss(nodes)
        t = 0.5 * window * (x + 1.0)
        dens = 0.5 * window * w * decay_rate * np.exp(-decay_rate * t)
        a = np.exp(_nb_logpmf(k, dark_mean * t / window, dispersion))
        b = np.exp(_poisson_logpmf(k, bright_mean * (window - t) / window))
        n = 2 * (k_max + 1)
        conv = np.fft.irfft(np.fft.rfft(a, n) * np.fft.rfft(b, n), n)[:, : k_max + 1]
        dark = dark + np.clip(dens @ conv, 0.0, None)
    return bright_weight * bright + (1.0 - bright_weight) * dark


@dataclass
class HistogramFit:
    bright_weight: float
    bright_mean: float  # total counts over the window
    dark_mean: float
    dispersion: float
    decay_rate: float  # 1/s
    stderr: dict
    log_likelihood: float
    chi2_per_dof: float
    n_trials: int
    window: float
    bin_width: float
    unidentifiable: tuple = ()
    covariance: np.ndarray = field(default=None, repr=False)

    @property
    def bright_rate(self) -> float:
        return self.bright_mean / self.window

    @property
    def dark_rate(self) -> float:
        return self.dark_mean / self.window

    @property
    def plateau_fraction(self) -> float:
        """Fraction of all trials that are dark ions decaying inside the window."""
        return (1.0 - self.bright_weight) * -math.expm1(-self.decay_rate * self.window)

    def values(self) -> dict:
        return {name: getattr(self, name) for name in PARAMETERS}

    def model_pmf(self, k_max: int) -> np.ndarray:
        """Fitted P(total = k), k = 0..k_max; unidentifiable parameters carry no weight."""
        x = np.array([getattr(self, name) for name in PARAMETERS], dtype=float)
        x = np.where(np.isnan(x), _PLACEHOLDERS, x)
        return mixture_pmf(k_max, self.window, *x)

    def summary(self) -> str:
        lines = []
        for name in PARAMETERS:
            lines.append(f"{name} = {getattr(self, name)!r}")
            lines.append(f"{name}_err = {self.stderr[name]!r}")
        lines.append(f"chi2_per_dof = {self.chi2_per_dof!r}")
        lines.append(f"unidentifiable = {','.join(self.unidentifiable) or 'none'}")
        return "\n".join(lines) + "\n"


def _initial_guess(k, h):
    """Two-cluster split of the histogram for starting values."""
    n = h.sum()
    cut = float((k * h).sum() / n)
    for _ in range(50):
        lo, hi = k <= cut, k > cut
        if h[lo].sum() == 0 or h[hi].sum() == 0:
            break
        m_lo = (k[lo] * h[lo]).sum() / h[lo].sum()
        m_hi = (k[hi] * h[hi]).sum() / h[hi].sum()
        new = 0.5 * (m_lo + m_hi)
        if new == cut:
            break
        cut = new
    lo = k <= cut
    n_lo = h[lo].sum()
    if n_lo == 0 or n_lo == n:
        m = (k * h).sum() / n
        return [1.0 if n_lo == 0 else 0.0, max(m, 1e-3), max(m, 1e-3), 1.0]
    m_lo = (k[lo] * h[lo]).sum() / n_lo
    v_lo = ((k[lo] - m_lo) ** 2 * h[lo]).sum() / max(n_lo - 1, 1)
    m_hi = (k[~lo] * h[~lo]).sum() / h[~lo].sum()
    f0 = min(max(v_lo / max(m_lo, 1e-9), 1.0), 5.0)
    return [1.0 - n_lo / n, max(m_hi, 1e-3), max(m_lo, 1e-3), f0]


def _numerical_hessian(fun, x, rel=1e-4):
    n = len(x)
    h = rel * np.maximum(np.abs(x), 1e-3)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h[i]
            ej[j] = h[j]
            val = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    return H


def _single_component(k, h, n):
    """Best single-component description: pure Poisson (bright) or pure NB (dark, no decay).

    Returns (log_likelihood, natural parameters with NaN for the unidentifiable
    ones, unidentifiable names, number of free parameters).
    """
    occ = h > 0
    mean = float((k * h).sum() / n)
    ll_poisson = float(np.sum(h[occ] * _poisson_logpmf(k[occ], np.array(mean))))

    def nb_nll(u):
        return -float(np.sum(h[occ] * _nb_logpmf(k[occ], np.array(mean), 1.0 + math.exp(u))))

    res = minimize_scalar(nb_nll, bounds=(-14.0, 3.0), method="bounded")
    f = 1.0 + math.exp(res.x)
    ll_nb = -float(res.fun)
    # a Poisson component reads as bright unless extra dispersion is significant
    if 2.0 * (ll_nb - ll_poisson) < chi2_dist.ppf(_SINGLE_COMPONENT_LEVEL, 1):
        return (ll_poisson, np.array([1.0, mean, np.nan, np.nan, np.nan]),
                ["dark_mean", "dispersion", "decay_rate"], 1)
    return ll_nb, np.array([0.0, np.nan, mean, f, np.nan]), ["bright_mean", "decay_rate"], 2


def fit_histogram(hist, window: float, bin_width: float, max_iterations: int = 2000) -> HistogramFit:
    """Maximum-likelihood mixture fit to a histogram of total counts (index = count)."""
    h = np.asarray(hist, dtype=float)
    if h.ndim != 1 or np.any(h < 0):
        raise ValueError("histogram must be a 1-D array of non-negative frequencies")
    n = int(round(h.sum()))
    if n < 1000:
        raise ValueError("histogram must contain at least 1000 trials")
    if window <= 0 or bin_width <= 0:
        raise ValueError("window and bin_width must be positive")
    k = np.arange(h.size)
    k_max = int(h.size - 1 + 10 * math.sqrt(h.size + 10))
    occupied = h > 0
    w0, mb0, md0, f0 = _initial_guess(k, h)

    def nll_natural(x):
        w, mb, md, f, g = x
        if not (0 <= w <= 1 and mb > 0 and md > 0 and f >= 1 and g >= 0):
            return np.inf
        p = mixture_pmf(k_max, window, w, mb, md, f, g)[: h.size]
        with np.errstate(divide="ignore"):
            return -float(np.sum(h[occupied] * np.log(p[occupied])))

    # unconstrained coordinates: logit w, log means, log(f - 1), log gamma
    def to_nat(z):
        return np.array([1 / (1 + math.exp(-z[0])), math.exp(z[1]), math.exp(z[2]),
                         1 + math.exp(z[3]), math.exp(z[4])])

    def nll(z):
        try:
            return nll_natural(to_nat(z))
        except OverflowError:
            return np.inf

    wc = min(max(w0, 1e-4), 1 - 1e-4)
    starts = []
    for g0 in (0.3, 3.0, 30.0):
        starts.append([math.log(wc / (1 - wc)), math.log(mb0), math.log(md0),
                       math.log(max(f0 - 1, 0.02)), math.log(g0)])
    results = [
        minimize(nll, z0, method="Nelder-Mead",
                 options={"maxiter": max_iterations, "maxfev": 2 * max_iterations, "xatol": 1e-8, "fatol": 1e-10})
        for z0 in starts
    ]
    best = min(results, key=lambda r: r.fun)
    converged = [r for r in results if r.success and np.isfinite(r.fun) and r.fun <= best.fun + 1e-6]
    if not converged:
        raise FitError("histogram fit did not converge",
                       {"last": dict(zip(PARAMETERS, to_nat(best.x).tolist())), "message": best.message})
    best = min(converged, key=lambda r: r.fun)
    x = to_nat(best.x)

    # a single component that explains the data as well is reported instead
    ll_single, x_single, flags, n_single = _single_component(k, h, n)
    lr = 2.0 * (-best.fun - ll_single)
    single = lr < chi2_dist.ppf(_SINGLE_COMPONENT_LEVEL, len(PARAMETERS) - n_single)
    if single:
        x = x_single
        unidentifiable = flags
    else:
        unidentifiable = []
        if n * (1 - x[0]) < 10:
            unidentifiable += ["dark_mean", "dispersion", "decay_rate"]
        elif x[3] - 1 < 1e-6:
            unidentifiable.append("dispersion")
        if n * x[0] < 10:
            unidentifiable.append("bright_mean")

    free = [i for i, name in enumerate(PARAMETERS) if name not in unidentifiable]
    if single:
        free = [i for i in free if i != 0]  # the weight sits on its bound
    x_eval = np.where(np.isnan(x), _PLACEHOLDERS, x)
    cov = np.full((5, 5), np.nan)
    try:
        def sub(y):
            xx = x_eval.copy()
            xx[free] = y
            return nll_natural(xx)

        H = _numerical_hessian(sub, x_eval[free])
        c = np.linalg.inv(H)
        cov[np.ix_(free, free)] = c
    except np.linalg.LinAlgError:
        pass
    err = np.sqrt(np.where(np.diag(cov) >= 0, np.diag(cov), np.nan))
    log_likelihood = ll_single if single else -float(best.fun)

    # chi-square with bins pooled until the expected count reaches 5
    expected = n * mixture_pmf(k_max, window, *x_eval)[: h.size]
    expected[-1] += n - expected.sum()
    chi2, dof, o_acc, e_acc = 0.0, 0, 0.0, 0.0
    for o, e in zip(h, expected):
        o_acc += o
        e_acc += e
        if e_acc >= 5:
            chi2 += (o_acc - e_acc) ** 2 / e_acc
            dof += 1
            o_acc = e_acc = 0.0
    if e_acc > 0 and dof > 0:
        chi2 += (o_acc - e_acc) ** 2 / max(e_acc, 1e-300)
    dof = max(dof - 1 - len(free), 1)

    return HistogramFit(
        bright_weight=float(x[0]),
        bright_mean=float(x[1]),
        dark_mean=float(x[2]),
        dispersion=float(x[3]),
        decay_rate=float(x[4]),
        stderr=dict(zip(PARAMETERS, err.tolist())),
        log_likelihood=log_likelihood,
        chi2_per_dof=float(chi2 / dof),
        n_trials=n,
        window=window,
        bin_width=bin_width,
        unidentifiable=tuple(unidentifiable),
        covariance=cov,
    )
