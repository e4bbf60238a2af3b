"""Detector model: saturation, passive-quench dynamics and characterization.

Two ways of folding dead time into a simulation are provided.  The binned
path converts a true rate into an observed rate with the non-paralyzable
formula; the photon-level path (:func:`apply_dead_time`) filters individual
photon arrival times through a quench/recharge cycle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .dataio import read_columns

__all__ = [
    "SpadParams",
    "IvCurve",
    "PdeEstimate",
    "NoBreakdownError",
    "observed_rate",
    "true_rate",
    "recovery_fraction",
    "apply_dead_time",
    "registered_rate",
    "effective_dead_time",
    "quench_time_constants",
    "estimate_pde_ttfp",
    "first_pulse_times",
    "breakdown_voltage",
    "read_iv_csv",
]


@dataclass(frozen=True)
class SpadParams:
    breakdown_voltage: float = -28.0
    overbias: float = 2.0
    pde: float = 0.3
    dcr: float = 109.0
    quench_tau: float = 500e-9
    recharge_tau: float = 3.5e-6
    effective_dead_time: float = 1.38e-6
    r_internal: float = 25e3
    r_probe: float = 5e3
    r_quench: float = 200e3
    c_total: float = 15e-12
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.pde <= 1.0:
            raise ValueError("pde must lie in [0, 1]")
        if self.overbias < 0:
            raise ValueError("overbias must be non-negative")
        for key in (
            "dcr",
            "quench_tau",
            "recharge_tau",
            "effective_dead_time",
            "r_internal",
            "r_probe",
            "r_quench",
            "c_total",
        ):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative")

    def replace(self, **changes) -> "SpadParams":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class IvCurve:
    voltages: np.ndarray
    currents: np.ndarray
    current_limit: float = 200e-6

    def __post_init__(self):
        v = np.asarray(self.voltages, dtype=float)
        i = np.asarray(self.currents, dtype=float)
        if v.shape != i.shape or v.ndim != 1 or v.size < 2:
            raise ValueError("an IV curve needs at least two (V, I) points")
        dv = np.diff(v)
        if not (np.all(dv > 0) or np.all(dv < 0)):
            raise ValueError("voltages must be strictly monotone")
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "currents", i)


@dataclass(frozen=True)
class PdeEstimate:
    value: float
    stderr: float
    n_samples: int


class NoBreakdownError(ValueError):
    """The IV curve never crosses the breakdown current threshold."""


def observed_rate(true_rate, dead_time):
    """Non-paralyzable dead-time model, R / (1 + R tau)."""
    true_rate = np.asarray(true_rate, dtype=float)
    if np.any(true_rate < 0) or dead_time < 0:
        raise ValueError("rates and dead time must be non-negative")
    out = true_rate / (1.0 + true_rate * dead_time)
    return float(out) if out.ndim == 0 else out


def true_rate(observed, dead_time):
    """Inverse of :func:`observed_rate`."""
    observed = np.asarray(observed, dtype=float)
    if np.any(observed * dead_time >= 1.0):
        raise ValueError("observed rate is at or above the saturation limit 1/dead_time")
    out = observed / (1.0 - observed * dead_time)
    return float(out) if out.ndim == 0 else out


def recovery_fraction(dt, quench_tau: float, recharge_tau: float):
    """Fraction of the overbias restored ``dt`` after a registered pulse.

    Zero while quenching, then an exponential recharge.  Detection probability
    during recharge is taken to be linear in this fraction.
    """
    dt = np.asarray(dt, dtype=float)
    s = dt - quench_tau
    if recharge_tau == 0:
        out = (s >= 0).astype(float)
    else:
        out = np.where(s > 0, -np.expm1(-np.maximum(s, 0.0) / recharge_tau), 0.0)
    return float(out) if out.ndim == 0 else out


def apply_dead_time(photon_times, quench_tau: float, recharge_tau: float, rng, pde: float = 1.0):
    """Photon-level detector filter; returns the registered subsequence of times.

    The detector starts armed.  A photon arriving ``dt`` after the last
    registered pulse is registered with probability
    ``pde * recovery_fraction(dt)`` (``pde`` alone when armed).
    """
    t = np.asarray(photon_times, dtype=float)
    if t.ndim != 1:
        raise ValueError("photon_times must be one-dimensional")
    if t.size and np.any(np.diff(t) < 0):
        raise ValueError("photon_times must be sorted ascending")
    if t.size == 0:
        return t
    u = rng.random(t.size)
    keep = np.zeros(t.size, dtype=bool)
    last = -math.inf
    for i, ti in enumerate(t):
        p = pde if last == -math.inf else pde * recovery_fraction(ti - last, quench_tau, recharge_tau)
        if u[i] < p:
            keep[i] = True
            last = ti
    return t[keep]


def registered_rate(rate: float, quench_tau: float, recharge_tau: float, pde: float = 1.0) -> float:
    """Mean registered rate of the photon-level model for Poisson input (renewal theory).

    After a pulse the hazard is ``rate*pde*recovery(s)``; the mean interval is
    the quench time plus the integral of the survival function.
    """
    r = rate * pde
    if r <= 0:
        return 0.0
    if recharge_tau == 0:
        return 1.0 / (quench_tau + 1.0 / r)

    def survival(s):
        return math.exp(-r * (s - recharge_tau * (-math.expm1(-s / recharge_tau))))

    upper = 60.0 / r + 60.0 * recharge_tau
    mean_wait, _ = quad(survival, 0.0, upper, points=[recharge_tau, 5 * recharge_tau], limit=500)
    return 1.0 / (quench_tau + mean_wait)


def effective_dead_time(quench_tau: float, recharge_tau: float, reference_rate: float = 106e3) -> float:
    """Non-paralyzable dead time matching the photon-level model at ``reference_rate``."""
    return 1.0 / registered_rate(reference_rate, quench_tau, recharge_tau) - 1.0 / reference_rate


def quench_time_constants(params: SpadParams):
    """(quench_tau, recharge_tau) as 1/e RC times of the passive-quench circuit."""
    if params.c_total <= 0:
        raise ValueError("c_total must be positive")
    if params.r_internal + params.r_probe <= 0 or params.r_quench <= 0:
        raise ValueError("resistances must be positive")
    return (params.r_internal + params.r_probe) * params.c_total, params.r_quench * params.c_total


def first_pulse_times(pulse_trains) -> np.ndarray:
    """Time of the first pulse in each armed acquisition (later pulses ignored)."""
    out = []
    for train in pulse_trains:
        train = np.asarray(train, dtype=float)
        if train.size == 0:
            raise ValueError("an acquisition recorded no pulse")
        out.append(train.min())
    return np.asarray(out)


def estimate_pde_ttfp(ttfp_samples, mean_photon_interarrival: float) -> PdeEstimate:
    """Time-to-first-pulse PDE: mean photon interval over mean time to first pulse.

    The standard error follows from the delta method on the sample mean.
    """
    x = np.asarray(ttfp_samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two time-to-first-pulse samples")
    if np.any(x <= 0):
        raise ValueError("time-to-first-pulse samples must be positive")
    mean = x.mean()
    est = mean_photon_interarrival / mean
    se_mean = x.std(ddof=1) / math.sqrt(x.size)
    return PdeEstimate(est, est * se_mean / mean, x.size)


def breakdown_voltage(curve: IvCurve, threshold_fraction: float = 0.01) -> float:
    """Voltage where |I| first exceeds ``threshold_fraction * current_limit``.

    The sweep is followed from the smallest |V| outward and the crossing is
    linearly interpolated between neighbouring samples.
    """
    if not 0 < threshold_fraction <= 1:
        raise ValueError("threshold_fraction must lie in (0, 1]")
    order = np.argsort(np.abs(curve.voltages), kind="stable")
    v = curve.voltages[order]
    i = np.abs(curve.currents[order])
    level = threshold_fraction * curve.current_limit
    above = np.nonzero(i > level)[0]
    if above.size == 0:
        raise NoBreakdownError("no breakdown found")
    j = above[0]
    if j == 0:
        return float(v[0])
    frac = (level - i[j - 1]) / (i[j] - i[j - 1])
    return float(v[j - 1] + frac * (v[j] - v[j - 1]))


def read_iv_csv(path, current_limit: float = 200e-6) -> IvCurve:
    """Two-column CSV (volts, amps); comments and a text header are skipped."""
    volts, amps = read_columns(path, 2)
    return IvCurve(volts, amps, current_limit)
