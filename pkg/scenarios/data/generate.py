"""Regenerate the synthetic data sets used by the scenario files.

    python3 scenarios/data/generate.py
"""
import math
from pathlib import Path

import numpy as np

from spadreadout.coherence import SR88_MASS, CoherenceParams, lamb_dicke, rabi_thermal

HERE = Path(__file__).parent


def iv_curve():
    # reverse sweep: leakage below breakdown, steep avalanche current beyond -28 V
    v = -np.round(np.arange(0, 32.01, 0.1), 2)
    i = -(2e-10 * np.abs(v) + np.clip(200e-6 * (np.abs(v) - 28.0), 0, 200e-6))
    rows = ["volts,amps"] + [f"{a!r},{b!r}" for a, b in zip(v.tolist(), i.tolist())]
    (HERE / "fig2a-iv.csv").write_text("\n".join(rows) + "\n")


def ttfp(p=0.3, period=1e-6, n=12000, seed=31):
    rng = np.random.default_rng(seed)
    t = period * rng.geometric(p, n)
    (HERE / "ttfp.csv").write_text("ttfp_s\n" + "\n".join(repr(x) for x in t.tolist()) + "\n")


def rabi(seed=5):
    eta = lamb_dicke(674e-9, 0.0, SR88_MASS, 2 * math.pi * 5e6)
    truth = CoherenceParams(2 * math.pi * 94.7e3, 6.3, eta, 0.998)
    t = np.linspace(0, 200e-6, 201)
    rng = np.random.default_rng(seed)
    p = rabi_thermal(t, truth) + rng.normal(0, 0.01, t.size)
    rows = ["t_us,p_bright,sigma"] + [f"{a!r},{b!r},0.01" for a, b in zip((t * 1e6).round(9).tolist(), p.tolist())]
    (HERE / "fig5-rabi.csv").write_text("\n".join(rows) + "\n")


def heating(seed=6):
    delay_ms = np.linspace(0, 2.0, 10)
    rng = np.random.default_rng(seed)
    nbar = 6.3 + 10.0 * delay_ms + rng.normal(0, 0.3, delay_ms.size)
    rows = ["delay_ms,nbar,sigma"] + [f"{a!r},{b!r},0.3" for a, b in zip(delay_ms.round(12).tolist(), nbar.tolist())]
    (HERE / "fig5-heating.csv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    iv_curve()
    ttfp()
    rabi()
    heating()
