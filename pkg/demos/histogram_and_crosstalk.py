"""Fit the total-count histogram and trace the optical crosstalk curve.

    python3 demos/histogram_and_crosstalk.py

The histogram of total counts over 2.9 ms is a mixture of a bright Poisson
peak and an overdispersed dark peak, joined by a plateau of dark ions that
decayed during the window.  The crosstalk curve shows how fast the SPAD
stops seeing an ion as it moves sideways.
"""
import numpy as np

from spadreadout.harness import simulate_total_counts
from spadreadout.histogram import fit_histogram
from spadreadout.optics import crosstalk_curve, default_stack
from spadreadout.rng import make_rng
from spadreadout.source import RateModel

rates = RateModel(106e3, 38e3, dispersion=1.2)
n_bins = rates.n_bins(2.9e-3)
totals, _ = simulate_total_counts(rates, 40_000, n_bins, master_seed=3, prep_bright_probability=0.5)
fit = fit_histogram(np.bincount(totals), n_bins * rates.bin_width, rates.bin_width)
print("histogram fit:")
print(fit.summary(), end="")
print(f"dark variance exceeds Poisson by {100 * (fit.dispersion - 1):.1f}%")
print(f"{100 * fit.plateau_fraction:.2f}% of trials are dark ions that decayed inside the window\n")

offsets = np.arange(0, 241e-6, 48e-6)
curve = crosstalk_curve(offsets, default_stack(), 200_000, make_rng(4))
print("offset_um  normalized  predicted_kcps")
for d, nf, r in zip(curve.offsets, curve.normalized, curve.predicted_rate):
    print(f"{d * 1e6:9.0f}  {nf:10.4f}  {r / 1e3:14.2f}")
