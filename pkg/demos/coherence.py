"""Thermal Rabi flopping and a heating-rate fit on the shipped synthetic data.

    python3 demos/coherence.py

Averaging carrier flopping over a thermal distribution of motional states
washes out the oscillation; the fit recovers the Rabi frequency, the mean
phonon number and the contrast.  Repeating that at several delays gives the
heating rate as the slope of nbar against delay.
"""
import math
from pathlib import Path

from spadreadout.coherence import SR88_MASS, CoherenceParams, fit_heating, fit_rabi, lamb_dicke, rabi_thermal
from spadreadout.dataio import read_columns

DATA = Path(__file__).resolve().parents[1] / "scenarios" / "data"

eta = lamb_dicke(674e-9, 0.0, SR88_MASS, 2 * math.pi * 5e6)
print(f"Lamb-Dicke parameter at 5 MHz: {eta:.4f}")

cold = CoherenceParams(2 * math.pi * 94.7e3, 0.0, eta)
warm = CoherenceParams(2 * math.pi * 94.7e3, 20.0, eta)
for t_us in (5.28, 50.0, 150.0):
    print(f"bright population after {t_us:6.2f} us: nbar=0 {float(rabi_thermal(t_us * 1e-6, cold)):.3f},"
          f" nbar=20 {float(rabi_thermal(t_us * 1e-6, warm)):.3f}")

t_us, p, sigma = read_columns(DATA / "fig5-rabi.csv", 3)
fit = fit_rabi(t_us * 1e-6, p, sigma, eta)
print("\nRabi fit:")
print(fit.summary(), end="")

delay_ms, nbar, s = read_columns(DATA / "fig5-heating.csv", 3)
heating = fit_heating(delay_ms * 1e-3, nbar, s)
print("\nheating fit:")
print(heating.summary(), end="")
