"""Thermal-state carrier Rabi model and the fits built on it.

The ion is taken to occupy a single motional mode in a thermal state.  The
carrier Rabi frequency of Fock state n is reduced by the Lamb-Dicke factor
``exp(-eta^2/2) L_n(eta^2)``, and averaging over the thermal distribution
dephases the flopping.  Transfer means population moved to the (dark)
metastable level, so the bright-state probability is its complement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import constants
from scipy.optimize import least_squares
from scipy.signal import lombscargle

from .stats import FitError

__all__ = [
    "SR88_MASS",
    "CoherenceParams",
    "RabiFit",
    "HeatingFit",
    "lamb_dicke",
    "thermal_weights",
    "laguerre_table",
    "carrier_frequencies",
    "rabi_transfer",
    "rabi_thermal",
    "fit_rabi",
    "fit_heating",
]

ATOMIC_MASS = constants.atomic_mass
SR88_MASS = 87.9056 * ATOMIC_MASS


def lamb_dicke(wavelength: float, projection_angle: float, mass: float, mode_frequency: float) -> float:
    """eta = k cos(angle) sqrt(hbar / (2 m omega))."""
    if wavelength <= 0 or mass <= 0 or mode_frequency <= 0:
        raise ValueError("wavelength, mass and mode_frequency must be positive")
    k = 2 * math.pi / wavelength
    return k * math.cos(projection_angle) * math.sqrt(constants.hbar / (2 * mass * mode_frequency))


@dataclass(frozen=True)
class CoherenceParams:
    rabi_frequency: float  # rad/s
    nbar: float = 0.0
    lamb_dicke: float = 0.0
    contrast: float = 1.0
    mode_frequency: Optional[float] = None  # rad/s, informational

    def __post_init__(self):
        if self.rabi_frequency < 0 or self.nbar < 0 or self.lamb_dicke < 0:
            raise ValueError("rabi_frequency, nbar and lamb_dicke must be non-negative")
        if not 0 <= self.contrast <= 1:
            raise ValueError("contrast must lie in [0, 1]")
        if self.lamb_dicke >= 1:
            raise ValueError("lamb_dicke must be < 1")

    @property
    def pi_time(self) -> float:
        return math.pi / self.rabi_frequency


def thermal_weights(nbar: float, tol: float = 1e-6) -> np.ndarray:
    """Thermal occupation p_n up to the first n where the cumulative weight exceeds 1 - tol."""
    if nbar < 0:
        raise ValueError("nbar must be non-negative")
    if nbar == 0:
        return np.ones(1)
    q = nbar / (nbar + 1.0)
    # cumulative weight through n is 1 - q^(n+1)
    n_max = max(0, math.ceil(math.log(tol) / math.log(q)) - 1)
    n = np.arange(n_max + 1)
    return np.exp(n * math.log(q)) / (nbar + 1.0)


def laguerre_table(n_max: int, x: float) -> np.ndarray:
    """L_0(x) .. L_n_max(x) by the upward three-term recurrence."""
    out = np.empty(n_max + 1)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = 1.0 - x
    for k in range(1, n_max):
        out[k + 1] = ((2 * k + 1 - x) * out[k] - k * out[k - 1]) / (k + 1)
    return out


def carrier_frequencies(params: CoherenceParams, n_max: int) -> np.ndarray:
    eta2 = params.lamb_dicke**2
    return params.rabi_frequency * math.exp(-eta2 / 2) * laguerre_table(n_max, eta2)


def rabi_transfer(t, params: CoherenceParams, tol: float = 1e-6):
    """Probability of transfer to the metastable level after a pulse of length t."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("pulse times must be non-negative")
    p = thermal_weights(params.nbar, tol)
    omega = carrier_frequencies(params, len(p) - 1)
    s = np.sin(0.5 * np.multiply.outer(t, omega)) ** 2
    return params.contrast * (s @ p)


def rabi_thermal(t, params: CoherenceParams, tol: float = 1e-6):
    """Bright-state probability, the complement of the transfer."""
    return 1.0 - rabi_transfer(t, params, tol)


@dataclass
class RabiFit:
    params: CoherenceParams
    stderr: dict
    covariance: np.ndarray
    chi2: float
    dof: int
    nbar_upper: float  # one-sided 95% bound
    residuals: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)

    def summary(self) -> str:
        p = self.params
        lines = [
            f"rabi_frequency_hz = {p.rabi_frequency / (2 * math.pi)!r}",
            f"rabi_frequency_hz_err = {self.stderr['rabi_frequency'] / (2 * math.pi)!r}",
            f"nbar = {p.nbar!r}",
            f"nbar_err = {self.stderr['nbar']!r}",
            f"nbar_upper95 = {self.nbar_upper!r}",
            f"contrast = {p.contrast!r}",
            f"contrast_err = {self.stderr['contrast']!r}",
            f"lamb_dicke = {p.lamb_dicke!r}",
            f"chi2_per_dof = {self.chi2 / max(self.dof, 1)!r}",
        ]
        return "\n".join(lines) + "\n"

    def residuals_csv(self) -> str:
        rows = ["t_us,residual"]
        rows += [f"{float(t) * 1e6!r},{float(r)!r}" for t, r in zip(self.times, self.residuals)]
        return "\n".join(rows) + "\n"


def _spectral_peak(t, y, span):
    """Angular frequency of the strongest oscillation in (t, y)."""
    dt = np.median(np.diff(t))
    w = np.linspace(math.pi / span, math.pi / dt, 4000)
    power = lombscargle(t, y - y.mean(), w)
    return w[int(np.argmax(power))]


def fit_rabi(t, p_bright, sigma, lamb_dicke: float, nbar_max: float = 100.0, mode_frequency=None) -> RabiFit:
    """Weighted least squares for (rabi_frequency, nbar, contrast) with eta held fixed.

    Starts are seeded from the Lomb-Scargle peak of the data; errors come
    from the Jacobian with sigma taken as absolute.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(p_bright, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), t.shape)
    if t.size < 8 or y.shape != t.shape:
        raise ValueError("need at least 8 matching (t, p, sigma) points")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    order = np.argsort(t)
    t, y, sigma = t[order], y[order], sigma[order]
    span = t[-1] - t[0]
    if span <= 0:
        raise ValueError("times must not all coincide")
    w0 = _spectral_peak(t, y, span)
    if 2 * math.pi / w0 > span:
        raise ValueError("data must span at least one oscillation")

    def residual(x):
        par = CoherenceParams(x[0], x[1], lamb_dicke, x[2])
        return (rabi_thermal(t, par) - y) / sigma

    lower, upper = [0.0, 0.0, 0.0], [np.inf, nbar_max, 1.0]
    opts = dict(bounds=(lower, upper), x_scale=[w0, 1.0, 0.1])
    best = None
    for wf in (0.97, 1.0, 1.03):
        for nb in (0.5, 5.0, 20.0):
            x0 = [w0 * wf, min(nb, nbar_max), 0.95]
            res = least_squares(residual, x0, xtol=1e-8, ftol=1e-8, max_nfev=200, **opts)
            if best is None or res.cost < best.cost:
                best = res
    # polish the best start
    best = least_squares(residual, best.x, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=500, **opts)
    if best.status <= 0 or not np.all(np.isfinite(best.x)):
        raise FitError("Rabi fit did not converge", {"x": best.x.tolist(), "message": best.message})
    jac = best.jac
    try:
        cov = np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jac.T @ jac)
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    params = CoherenceParams(float(best.x[0]), float(best.x[1]), lamb_dicke, float(best.x[2]), mode_frequency)
    names = ("rabi_frequency", "nbar", "contrast")
    return RabiFit(
        params=params,
        stderr=dict(zip(names, err.tolist())),
        covariance=cov,
        chi2=float(2 * best.cost),
        dof=t.size - 3,
        nbar_upper=float(best.x[1] + 1.6448536269514722 * err[1]),
        residuals=best.fun * sigma,
        times=t,
    )


@dataclass(frozen=True)
class HeatingFit:
    rate: float  # quanta/s
    intercept: float
    rate_err: float
    intercept_err: float
    chi2: float
    dof: int

    def summary(self) -> str:
        return (
            f"rate_quanta_per_ms = {self.rate * 1e-3!r}\n"
            f"rate_quanta_per_ms_err = {self.rate_err * 1e-3!r}\n"
            f"intercept = {self.intercept!r}\n"
            f"intercept_err = {self.intercept_err!r}\n"
        )


def fit_heating(delay, nbar, sigma) -> HeatingFit:
    """Weighted straight-line fit of nbar against delay; the slope is the heating rate."""
    x = np.asarray(delay, dtype=float)
    y = np.asarray(nbar, dtype=float)
    s = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape)
    if x.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    w = 1.0 / s**2
    sw, sx, sy = w.sum(), (w * x).sum(), (w * y).sum()
    xm, ym = sx / sw, sy / sw
    sxx = (w * (x - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("delays must not all coincide")
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    chi2 = float((w * (y - intercept - slope * x) ** 2).sum())
    return HeatingFit(
        rate=float(slope),
        intercept=float(intercept),
        rate_err=math.sqrt(1.0 / sxx),
        intercept_err=math.sqrt(1.0 / sw + xm * xm / sxx),
        chi2=chi2,
        dof=x.size - 2,
    )
