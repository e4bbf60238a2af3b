"""Photon-emission statistics of a bright or dark ion and count-record sampling.

Rates are observed count rates (after detector saturation) in counts/s, times
are in seconds.  A dark ion may decay to the bright state during the record;
the decay time is sampled in continuous time and the bin containing it gets
the time-weighted mixture of the two means.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.special import gammaln

__all__ = [
    "IonState",
    "PmfKind",
    "RateModel",
    "Trajectory",
    "CountRecord",
    "sample_trajectory",
    "bin_mean_profile",
    "sample_counts",
    "pmf",
    "log_pmf",
    "bin_dark_times",
    "sample_count_matrix",
]

DEFAULT_BIN_WIDTH = 25e-6
METASTABLE_LIFETIME = 0.390


class IonState(enum.Enum):
    BRIGHT = "bright"  # 5S1/2, scatters 422 nm light
    DARK = "dark"  # 4D5/2, metastable

    def __str__(self):
        return self.value


class PmfKind(enum.Enum):
    POISSON = "poisson"
    NEG_BINOMIAL = "negbinomial"


@dataclass(frozen=True)
class RateModel:
    """Mean count rates and bin structure for one detector.

    ``dispersion`` is the variance-to-mean ratio of the per-bin counts in dark
    (background) bins.  ``background_breakdown`` maps named contributions to
    their rates; when present they must add up to ``dark_rate`` within
    ``breakdown_tolerance`` (relative), since the individual contributions are
    quoted before detector saturation.
    """

    bright_rate: float
    dark_rate: float
    bin_width: float = DEFAULT_BIN_WIDTH
    decay_rate: float = 1.0 / METASTABLE_LIFETIME
    dispersion: float = 1.0
    background_breakdown: Mapping[str, float] = field(default_factory=dict)
    disperse_bright: bool = False
    breakdown_tolerance: float = 0.10
    name: str = ""

    def __post_init__(self):
        if not self.bright_rate > self.dark_rate:
            raise ValueError(
                f"bright_rate ({self.bright_rate}) must exceed dark_rate ({self.dark_rate})"
            )
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be non-negative")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if self.decay_rate < 0:
            raise ValueError("decay_rate must be non-negative")
        if self.dispersion < 1:
            raise ValueError("dispersion must be >= 1")
        if self.background_breakdown:
            total = float(sum(self.background_breakdown.values()))
            scale = max(self.dark_rate, 1e-300)
            if abs(total - self.dark_rate) / scale > self.breakdown_tolerance:
                raise ValueError(
                    f"background contributions sum to {total:g} cps, more than "
                    f"{self.breakdown_tolerance:.0%} away from dark_rate {self.dark_rate:g}"
                )

    @property
    def bright_mean(self) -> float:
        """Mean counts per bin for a bright ion."""
        return self.bright_rate * self.bin_width

    @property
    def dark_mean(self) -> float:
        return self.dark_rate * self.bin_width

    @property
    def decay_prob_per_bin(self) -> float:
        return -math.expm1(-self.decay_rate * self.bin_width)

    def n_bins(self, duration: float) -> int:
        """Number of whole bins in ``duration`` (rounded to the nearest bin)."""
        return int(round(duration / self.bin_width))

    def replace(self, **changes) -> "RateModel":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class Trajectory:
    initial_state: IonState
    decay_time: Optional[float] = None

    def __post_init__(self):
        if self.decay_time is not None:
            if self.initial_state is not IonState.DARK:
                raise ValueError("only a dark ion can decay")
            if self.decay_time < 0:
                raise ValueError("decay_time must be non-negative")

    @property
    def switch_time(self) -> float:
        """Time at which the ion is (or becomes) bright; inf if never."""
        if self.initial_state is IonState.BRIGHT:
            return 0.0
        return math.inf if self.decay_time is None else float(self.decay_time)


@dataclass(frozen=True)
class CountRecord:
    counts: np.ndarray
    trajectory: Trajectory
    rate_model_id: str = ""
    detector_label: str = ""

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("a count record needs at least one bin")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def sample_trajectory(initial: IonState, decay_rate: float, window: float, rng) -> Trajectory:
    """Draw the Dark->Bright decay time, or None if it falls outside ``window``."""
    if decay_rate < 0 or window <= 0:
        raise ValueError("decay_rate must be >= 0 and window > 0")
    if initial is IonState.BRIGHT or decay_rate == 0:
        return Trajectory(initial)
    t = rng.exponential(1.0 / decay_rate)
    return Trajectory(initial, t if t <= window else None)


def bin_dark_times(switch_times, n_bins: int, bin_width: float) -> np.ndarray:
    """Time spent dark in each bin, shape ``switch_times.shape + (n_bins,)``."""
    ts = np.asarray(switch_times, dtype=float)[..., None]
    starts = np.arange(n_bins) * bin_width
    return np.clip(ts - starts, 0.0, bin_width)


def bin_mean_profile(traj: Trajectory, model: RateModel, n_bins: int) -> np.ndarray:
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    dark = bin_dark_times(traj.switch_time, n_bins, model.bin_width)
    return model.dark_rate * dark + model.bright_rate * (model.bin_width - dark)


def _draw_counts(means, dispersed, dispersion, rng):
    means = np.asarray(means, dtype=float)
    lam = means
    if dispersion > 1.0 and np.any(dispersed):
        # gamma-Poisson mixture: mean mu, variance f*mu
        shape = np.where(dispersed, means / (dispersion - 1.0), 0.0)
        lam = np.where(dispersed, rng.gamma(shape, dispersion - 1.0), means)
    return rng.poisson(lam)


def sample_count_matrix(switch_times, model: RateModel, n_bins: int, rng) -> np.ndarray:
    """Counts for many trials at once; ``switch_times`` as in Trajectory.switch_time."""
    dark = bin_dark_times(switch_times, n_bins, model.bin_width)
    means = model.dark_rate * dark + model.bright_rate * (model.bin_width - dark)
    dispersed = np.ones_like(dark, dtype=bool) if model.disperse_bright else dark > 0
    return _draw_counts(means, dispersed, model.dispersion, rng)


def sample_counts(
    traj: Trajectory, model: RateModel, n_bins: int, rng, detector_label: str = ""
) -> CountRecord:
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts = sample_count_matrix(np.array([traj.switch_time]), model, n_bins, rng)[0]
    return CountRecord(counts, traj, model.name, detector_label)


def log_pmf(kind, mean, dispersion, k):
    """Log-probability of ``k`` counts; negative binomial has variance ``dispersion*mean``."""
    kind = PmfKind(kind)
    k = np.asarray(k, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if np.any(mean < 0):
        raise ValueError("mean must be non-negative")
    if np.any(k < 0):
        raise ValueError("k must be non-negative")
    if kind is PmfKind.NEG_BINOMIAL:
        if dispersion < 1:
            raise ValueError("negative binomial needs dispersion >= 1")
        if dispersion - 1.0 > 1e-12:
            with np.errstate(divide="ignore", invalid="ignore"):
                r = mean / (dispersion - 1.0)
                out = (
                    gammaln(k + r)
                    - gammaln(r)
                    - gammaln(k + 1)
                    - r * math.log(dispersion)
                    + k * math.log1p(-1.0 / dispersion)
                )
            return np.where(mean == 0, np.where(k == 0, 0.0, -np.inf), out)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = k * np.log(mean) - mean - gammaln(k + 1)
    return np.where(mean == 0, np.where(k == 0, 0.0, -np.inf), out)


def pmf(kind, mean, dispersion, k):
    """P(K = k) for a Poisson or mean/variance-parameterised negative binomial."""
    out = np.exp(log_pmf(kind, mean, dispersion, k))
    return float(out) if out.ndim == 0 else out
