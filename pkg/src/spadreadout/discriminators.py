"""Bright/dark discrimination of binned count records.

The dark-state likelihood allows for a single Dark->Bright decay, discretised
to bin granularity: if the decay happens in bin ``j`` every bin from ``j`` on
is scored with the bright pmf.  Summing over ``j`` (plus the no-decay term)
gives the marginal dark likelihood, computed in log space.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Optional

import numpy as np
from scipy.special import expit, logsumexp

from .source import CountRecord, IonState, PmfKind, RateModel, log_pmf

__all__ = [
    "StopReason",
    "DetectionOutcome",
    "DiscriminatorModel",
    "ThresholdChoice",
    "posterior_from_loglik",
    "outcome_from_loglik",
    "classify_threshold",
    "optimize_threshold",
    "threshold_errors",
    "log_likelihoods",
    "classify_mle",
    "AdaptiveClassifier",
    "classify_adaptive",
    "prefix_log_likelihoods",
    "first_crossing",
]


class StopReason(enum.Enum):
    THRESHOLD_REACHED = "threshold_reached"
    MAX_BINS = "max_bins"
    FIXED_WINDOW = "fixed_window"


@dataclass(frozen=True)
class DetectionOutcome:
    verdict: IonState
    posterior_bright: float
    bins_used: int
    log_likelihood_bright: float
    log_likelihood_dark: float
    stop_reason: StopReason


@dataclass(frozen=True)
class DiscriminatorModel:
    """Likelihood model used by the MLE and adaptive discriminators.

    ``dark_dispersion`` defaults to the rate model's dispersion; bright bins
    are Poisson unless ``bright_dispersion`` is raised above 1.
    """

    rate_model: RateModel
    prior_bright: float = 0.5
    dark_dispersion: Optional[float] = None
    bright_dispersion: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.prior_bright <= 1.0:
            raise ValueError("prior_bright must lie in [0, 1]")
        if self.dark_dispersion is None:
            object.__setattr__(self, "dark_dispersion", self.rate_model.dispersion)
        if self.dark_dispersion < 1 or self.bright_dispersion < 1:
            raise ValueError("dispersion must be >= 1")

    @property
    def decay_prob_per_bin(self) -> float:
        return self.rate_model.decay_prob_per_bin

    @property
    def log_prior_odds(self) -> float:
        p = self.prior_bright
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        return math.log(p) - math.log1p(-p)

    def log_pmf_bright(self, k):
        return log_pmf(PmfKind.NEG_BINOMIAL, self.rate_model.bright_mean, self.bright_dispersion, k)

    def log_pmf_dark(self, k):
        return log_pmf(PmfKind.NEG_BINOMIAL, self.rate_model.dark_mean, self.dark_dispersion, k)

    @cached_property
    def _tables(self):
        k = np.arange(1024)
        return self.log_pmf_bright(k), self.log_pmf_dark(k)

    def log_terms(self, counts):
        """Per-bin (log f_B, log f_D) for an integer count array of any shape."""
        counts = np.asarray(counts, dtype=np.int64)
        tb, td = self._tables
        if counts.size and counts.max() >= tb.size:
            return self.log_pmf_bright(counts), self.log_pmf_dark(counts)
        return tb[counts], td[counts]


class ThresholdChoice(NamedTuple):
    threshold: float
    predicted_fidelity: float
    degenerate: bool = False


def posterior_from_loglik(log_l_bright, log_l_dark, prior_bright: float = 0.5):
    if prior_bright >= 1.0:
        return np.ones_like(np.asarray(log_l_bright, dtype=float))[()]
    if prior_bright <= 0.0:
        return np.zeros_like(np.asarray(log_l_bright, dtype=float))[()]
    lo = np.asarray(log_l_bright) - np.asarray(log_l_dark) + math.log(prior_bright / (1 - prior_bright))
    return expit(lo)[()]


def outcome_from_loglik(
    log_l_bright: float,
    log_l_dark: float,
    prior_bright: float,
    bins_used: int,
    stop_reason: StopReason,
) -> DetectionOutcome:
    post = float(posterior_from_loglik(log_l_bright, log_l_dark, prior_bright))
    # ties go to Bright
    verdict = IonState.BRIGHT if post >= 0.5 else IonState.DARK
    return DetectionOutcome(verdict, post, bins_used, float(log_l_bright), float(log_l_dark), stop_reason)


def _counts_of(record) -> np.ndarray:
    counts = record.counts if isinstance(record, CountRecord) else np.asarray(record, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("count record is empty")
    return counts


def classify_threshold(record, threshold: float, model: Optional[DiscriminatorModel] = None) -> DetectionOutcome:
    """Bright iff the total count strictly exceeds ``threshold``.

    With a ``model`` the posterior fields are filled from total-count
    likelihoods (no decay term).  They are informational only and need not
    agree with the threshold verdict.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    counts = _counts_of(record)
    total = int(counts.sum())
    verdict = IonState.BRIGHT if total > threshold else IonState.DARK
    n = counts.size
    if model is None:
        post = 1.0 if verdict is IonState.BRIGHT else 0.0
        lb = ld = math.nan
    else:
        rm = model.rate_model
        lb = float(log_pmf(PmfKind.NEG_BINOMIAL, n * rm.bright_mean, model.bright_dispersion, total))
        ld = float(log_pmf(PmfKind.NEG_BINOMIAL, n * rm.dark_mean, model.dark_dispersion, total))
        post = float(posterior_from_loglik(lb, ld, model.prior_bright))
    return DetectionOutcome(verdict, post, n, lb, ld, StopReason.FIXED_WINDOW)


def _as_hist(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or h.sum() <= 0:
        raise ValueError("histogram must be a non-empty 1-D array of frequencies")
    return h


def threshold_errors(bright_hist, dark_hist):
    """(thresholds, eps_bright, eps_dark) for every half-integer threshold -0.5 ... K+0.5."""
    b, d = _as_hist(bright_hist), _as_hist(dark_hist)
    size = max(b.size, d.size)
    b = np.pad(b, (0, size - b.size)) / b.sum()
    d = np.pad(d, (0, size - d.size)) / d.sum()
    thresholds = np.arange(-1, size) + 0.5
    eps_b = np.concatenate(([0.0], np.cumsum(b)))  # P(count <= t | bright)
    eps_d = np.concatenate(([1.0], 1.0 - np.cumsum(d)))  # P(count > t | dark)
    eps_b = np.clip(eps_b, 0.0, 1.0)
    eps_d = np.clip(eps_d, 0.0, 1.0)
    return thresholds, eps_b, eps_d


def optimize_threshold(bright_hist, dark_hist) -> ThresholdChoice:
    """Half-integer threshold minimising the mean error of two count histograms.

    Histograms are frequency arrays indexed by total count.  Ties go to the
    smaller threshold; identical histograms are flagged as degenerate.
    """
    thresholds, eps_b, eps_d = threshold_errors(bright_hist, dark_hist)
    err = 0.5 * (eps_b + eps_d)
    # round away float noise so that exact ties resolve to the smaller threshold
    i = int(np.argmin(np.round(err, 14)))
    degenerate = bool(err[i] >= 0.5 - 1e-12)
    return ThresholdChoice(float(thresholds[i]), float(1.0 - err[i]), degenerate)


def log_likelihoods(record, model: DiscriminatorModel):
    """(log L_bright, log L_dark) with the dark likelihood marginalised over the decay bin.

    Uses prefix sums of the dark log-pmf and suffix sums of the bright one,
    combined with a single log-sum-exp over the N+1 decay positions.
    """
    counts = _counts_of(record)
    lfb, lfd = model.log_terms(counts)
    n = counts.size
    log_l_bright = float(lfb.sum())
    pd = model.decay_prob_per_bin
    prefix_dark = np.concatenate(([0.0], np.cumsum(lfd)))  # sum_{i<j}, j = 1..N+1
    suffix_bright = np.concatenate((np.cumsum(lfb[::-1])[::-1], [0.0]))  # sum_{i>=j}
    j = np.arange(1, n + 2)
    with np.errstate(divide="ignore"):
        log_w = (j - 1) * math.log1p(-pd) + (math.log(pd) if pd > 0 else -math.inf)
    log_w[-1] = n * math.log1p(-pd)
    log_l_dark = float(logsumexp(log_w + prefix_dark + suffix_bright))
    return log_l_bright, log_l_dark


def classify_mle(record, model: DiscriminatorModel) -> DetectionOutcome:
    lb, ld = log_likelihoods(record, model)
    return outcome_from_loglik(lb, ld, model.prior_bright, _counts_of(record).size, StopReason.FIXED_WINDOW)


class AdaptiveClassifier:
    """Bin-at-a-time likelihood accumulator with O(1) updates.

    ``_log_decayed`` holds the part of the dark likelihood in which the decay
    already happened (all later bins bright); ``_log_undecayed`` the part in
    which it has not, including the (1 - p_d)^n survival factor.
    """

    def __init__(self, model: DiscriminatorModel):
        self.model = model
        pd = model.decay_prob_per_bin
        self._log_pd = math.log(pd) if pd > 0 else -math.inf
        self._log_survive = math.log1p(-pd)
        self.log_l_bright = 0.0
        self._log_decayed = -math.inf
        self._log_undecayed = 0.0
        self.n_bins = 0

    def update(self, count: int) -> float:
        if count < 0:
            raise ValueError("counts must be non-negative")
        lfb, lfd = self.model.log_terms(np.array([count]))
        lfb, lfd = float(lfb[0]), float(lfd[0])
        self._log_decayed = np.logaddexp(self._log_decayed, self._log_pd + self._log_undecayed) + lfb
        self._log_undecayed += self._log_survive + lfd
        self.log_l_bright += lfb
        self.n_bins += 1
        return self.posterior_bright

    @property
    def log_l_dark(self) -> float:
        return float(np.logaddexp(self._log_decayed, self._log_undecayed))

    @property
    def posterior_bright(self) -> float:
        return float(posterior_from_loglik(self.log_l_bright, self.log_l_dark, self.model.prior_bright))

    def outcome(self, stop_reason: StopReason) -> DetectionOutcome:
        return outcome_from_loglik(
            self.log_l_bright, self.log_l_dark, self.model.prior_bright, self.n_bins, stop_reason
        )


def classify_adaptive(
    stream: Iterable[int], model: DiscriminatorModel, confidence: float, max_bins: int
) -> DetectionOutcome:
    """Consume bins until the posterior of either state reaches ``confidence``."""
    if not 0.5 < confidence < 1.0:
        raise ValueError("confidence must lie in (0.5, 1)")
    if max_bins < 1:
        raise ValueError("max_bins must be >= 1")
    acc = AdaptiveClassifier(model)
    for count in stream:
        post = acc.update(int(count))
        if max(post, 1.0 - post) >= confidence:
            return acc.outcome(StopReason.THRESHOLD_REACHED)
        if acc.n_bins >= max_bins:
            break
    if acc.n_bins == 0:
        raise ValueError("count stream is empty")
    return acc.outcome(StopReason.MAX_BINS)


def prefix_log_likelihoods(counts, model: DiscriminatorModel):
    """Log-likelihoods of every prefix of many records at once.

    ``counts`` has shape (trials, bins); returns two arrays of the same shape
    holding log L_bright and log L_dark for prefixes of length 1..bins.
    """
    counts = np.asarray(counts, dtype=np.int64)
    lfb, lfd = model.log_terms(counts)
    pd = model.decay_prob_per_bin
    log_pd = math.log(pd) if pd > 0 else -math.inf
    log_survive = math.log1p(-pd)
    n_trials, n_bins = counts.shape
    log_dark = np.empty(counts.shape)
    decayed = np.full(n_trials, -np.inf)
    undecayed = np.zeros(n_trials)
    for n in range(n_bins):
        decayed = np.logaddexp(decayed, log_pd + undecayed) + lfb[:, n]
        undecayed += log_survive + lfd[:, n]
        log_dark[:, n] = np.logaddexp(decayed, undecayed)
    return np.cumsum(lfb, axis=1), log_dark


def first_crossing(abs_log_odds, thresholds):
    """Index of the first bin where ``abs_log_odds`` reaches each threshold.

    Returns an int array of shape (trials, len(thresholds)); the value equals
    the number of bins when a trial never reaches the threshold.
    """
    a = np.asarray(abs_log_odds, dtype=float)
    th = np.asarray(thresholds, dtype=float)
    n_trials, n_bins = a.shape
    cap = float(th.max()) + 1.0
    running = np.minimum(np.maximum.accumulate(a, axis=1), cap)
    stride = cap + 1.0
    offsets = np.arange(n_trials)[:, None] * stride
    flat = (running + offsets).ravel()
    pos = np.searchsorted(flat, (th[None, :] + offsets).ravel(), side="left")
    return pos.reshape(n_trials, th.size) - np.arange(n_trials)[:, None] * n_bins
