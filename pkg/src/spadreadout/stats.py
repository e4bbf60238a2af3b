"""Binomial intervals and the shared fit-failure exception."""
from __future__ import annotations

import math

from scipy.stats import norm

__all__ = ["binomial_ci", "FitError"]


def binomial_ci(successes: int, n: int, level: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= successes <= n:
        raise ValueError("need 0 <= successes <= n and n >= 1")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = norm.ppf(0.5 + level / 2)
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    # the bounds at k = 0 and k = n are exactly 0 and 1; avoid rounding residue
    lo = 0.0 if successes == 0 else max(0.0, min(p, center - half))
    hi = 1.0 if successes == n else min(1.0, max(p, center + half))
    return lo, hi


class FitError(RuntimeError):
    """A fit did not converge; ``diagnostics`` carries the last iterate and solver message."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
