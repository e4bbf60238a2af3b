"""Acceptance criteria 1-10, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line (also collected in
the terminal summary) and fails if any of its checks fail.  Monte Carlo
criteria use the fixed master seeds of the shipped scenario files.
"""
import math
import subprocess
import sys

import numpy as np
import pytest

from spadreadout.cli import experiment_config
from spadreadout.coherence import SR88_MASS, fit_heating, fit_rabi, lamb_dicke
from spadreadout.config import load_scenario
from spadreadout.dataio import read_columns
from spadreadout.harness import calibrate_confidence, run_experiment, simulate_total_counts
from spadreadout.histogram import fit_histogram
from spadreadout.optics import collection_efficiency, crosstalk_curve, disk_solid_angle_fraction
from spadreadout.rng import make_rng
from spadreadout.spad import (
    SpadParams,
    breakdown_voltage,
    estimate_pde_ttfp,
    quench_time_constants,
    read_iv_csv,
)
from spadreadout.config import load_presets

from conftest import INVARIANT_OUTCOMES, ROOT, SCENARIOS

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def _pct(x):
    return f"{100 * x:.4f}%"


def _in(x, lo, hi):
    return lo <= x <= hi


def test_criterion_01_threshold_readout(fig3_run, criterion):
    row = fig3_run.report.row("threshold-fixed", 950e-6)
    criterion(1, "threshold 66.5 at 950 us", {
        "mean error in [0.04%, 0.13%]": (_in(row.mean_error, 4e-4, 1.3e-3), _pct(row.mean_error)),
        "threshold used": (row.threshold == 66.5, repr(row.threshold)),
    })


def test_criterion_02_mle_readout(fig3_run, criterion):
    r = fig3_run.report
    mle = r.row("mle", 1.2e-3).mean_error
    thr = r.row("threshold-fixed", 950e-6).mean_error
    criterion(2, "MLE at 1.2 ms", {
        "<= criterion 1 error": (mle <= thr, f"{_pct(mle)} vs {_pct(thr)}"),
        "within 0.05 pp of 0.08%": (abs(mle - 8e-4) <= 5e-4, _pct(mle)),
    })


def test_criterion_03_adaptive_time(fig3_run, criterion):
    r = fig3_run.report
    t = r.mean_adaptive_time
    err = r.row("adaptive", t).mean_error
    criterion(3, "adaptive at mean error 0.08%", {
        "calibrated error <= 0.08%": (err <= 8e-4, f"{_pct(err)} at confidence {fig3_run.confidence:.6f}"),
        "mean time within 450 us +-30%": (_in(t, 315e-6, 585e-6), f"{t * 1e6:.1f} us"),
    })


def _calibrated_time(config, target):
    try:
        confidence, point = calibrate_confidence(config, target)
    except RuntimeError as exc:
        return None, str(exc)
    return point["mean_time"], f"{point['mean_time'] * 1e6:.1f} us (confidence {confidence:.6f})"


def test_criterion_04_no_stray_projection(criterion):
    config = experiment_config(load_scenario(SCENARIOS / "no-stray.scn"))
    t999, s999 = _calibrated_time(config, 1e-3)
    t9998, s9998 = _calibrated_time(config, 2e-4)
    rates = config.spad_rates
    noisy = rates.replace(dark_rate=rates.dark_rate + 200.0,
                          background_breakdown={**rates.background_breakdown, "added": 200.0})
    t_bg, s_bg = _calibrated_time(config.replace(spad_rates=noisy), 2e-4)
    if t9998 is not None and t_bg is not None:
        increase, s_inc = t_bg - t9998, f"{(t_bg - t9998) * 1e6:+.1f} us"
    else:
        increase, s_inc = None, "not computable"
    criterion(4, "stray-light-free projection", {
        "99.9% time within 75 us +-50%": (t999 is not None and _in(t999, 37.5e-6, 112.5e-6), s999),
        "99.98% time within 125 us +-50%": (t9998 is not None and _in(t9998, 62.5e-6, 187.5e-6), s9998),
        "+200 cps: increase in (0, 40] us": (increase is not None and 0 < increase <= 40e-6, f"{s_bg}; {s_inc}"),
    })


def test_criterion_05_pmt_accounting(fig3_run, criterion):
    r = fig3_run.report
    row = r.row("mle", 1.2e-3)
    eps_se = math.sqrt(3.5e-4 * (1 - 3.5e-4) / r.n_trials)
    cond = r.conditional_spad_error("mle")
    criterion(5, "PMT error accounting (MLE, 1.2 ms)", {
        "simulated PMT error matches 3.5e-4": (abs(r.pmt_error - 3.5e-4) <= 3 * eps_se,
                                               f"{r.pmt_error:.3e} +- {eps_se:.1e}"),
        "reported infidelity within 0.02 pp of 0.08%": (abs(row.reported_infidelity - 8e-4) <= 2e-4,
                                                        _pct(row.reported_infidelity)),
        "P(SPAD wrong | PMT early-decay error) >= 0.9": (cond >= 0.9,
                                                         f"{cond:.3f} over {r.pmt_early_decay_errors} events"),
    })


def test_criterion_06_histogram_round_trip(criterion):
    scenario = load_scenario(SCENARIOS / "fig3-inset.scn")
    rates = scenario.rate_model()
    n_bins = rates.n_bins(scenario.get("histogram", "window"))
    window = n_bins * rates.bin_width
    totals, _ = simulate_total_counts(rates, 40_000, n_bins, scenario.master_seed, 0.5)
    fit = fit_histogram(np.bincount(totals), window, rates.bin_width)
    truth = {
        "bright_weight": 0.5,
        "bright_mean": rates.bright_rate * window,
        "dark_mean": rates.dark_rate * window,
        "dispersion": rates.dispersion,
        "decay_rate": rates.decay_rate,
    }
    checks = {}
    for name, value in truth.items():
        got, se = fit.values()[name], fit.stderr[name]
        checks[f"{name} within 3 sigma"] = (abs(got - value) <= 3 * se, f"{got:.5g} +- {se:.2g} (true {value:.5g})")
    excess = fit.dispersion - 1.0
    checks["dark variance excess 20% +- 5 pp"] = (_in(excess, 0.15, 0.25), f"{100 * excess:.1f}%")
    criterion(6, "histogram fit round trip (40 000 trials, 2.9 ms)", checks)


def test_criterion_07_crosstalk(criterion):
    scenario = load_scenario(SCENARIOS / "fig4.scn")
    stack = scenario.geometry()
    offsets = scenario.get("crosstalk", "offsets_um") * 1e-6
    curve = crosstalk_curve(offsets, stack, scenario.get("crosstalk", "n_rays"), make_rng(scenario.master_seed))
    norm = curve.normalized
    rng = make_rng(scenario.master_seed + 1)
    # 300 um is not on the 24 um grid, so it is traced separately
    f300, se300 = collection_efficiency(300e-6, stack, scenario.get("crosstalk", "n_rays"), rng)
    r300 = f300 / curve.reference_fraction
    # zero offset with the stack made optically uniform: a plain disk at the ion-SPAD distance
    uniform = stack.with_uniform_index(1.0, remove_apertures=True)
    f_disk, se_disk = collection_efficiency(0.0, uniform, 1_000_000, rng)
    oracle = disk_solid_angle_fraction(0.5 * stack.spad_diameter, uniform.ion_z, 0.0)
    criterion(7, "crosstalk curve", {
        "normalized 1 at zero": (norm[0] == 1.0, repr(float(norm[0]))),
        "monotone non-increasing": (bool(np.all(np.diff(norm) <= 0)), f"max step {np.diff(norm).max():.2e}"),
        "ratio at 300 um <= 0.01": (r300 <= 0.01, f"{r300:.2e}"),
        "disk oracle at zero offset within 3 sigma": (abs(f_disk - oracle) <= 3 * se_disk,
                                                      f"{f_disk:.6f} +- {se_disk:.1e} vs {oracle:.6f}"),
    })


def test_criterion_08_detector_characterization(criterion):
    params = SpadParams(**load_presets("spad")["paper-passive"])
    tq, tr = quench_time_constants(params)
    rng = make_rng(8)
    p, period = 0.3, 1e-6
    values = [estimate_pde_ttfp(period * rng.geometric(p, 12_000), period).value for _ in range(200)]
    bias = np.mean(values) / p - 1
    v = breakdown_voltage(read_iv_csv(SCENARIOS / "data" / "fig2a-iv.csv", 200e-6), 0.01)
    criterion(8, "detector characterization", {
        "quench ~500 ns within 30%": (_in(tq, 350e-9, 650e-9), f"{tq * 1e9:.1f} ns"),
        "recharge ~3.5 us within 30%": (_in(tr, 2.45e-6, 4.55e-6), f"{tr * 1e6:.3f} us"),
        "TTFP bias < 1% over 200 x 12000": (abs(bias) < 0.01, f"{100 * bias:+.3f}%"),
        "breakdown -28 V +- 0.2 V": (abs(v + 28.0) <= 0.2, f"{v:.3f} V"),
    })


def test_criterion_09_coherence_fits(criterion):
    eta = lamb_dicke(674e-9, 0.0, SR88_MASS, 2 * math.pi * 5e6)
    t_us, p, sigma = read_columns(SCENARIOS / "data" / "fig5-rabi.csv", 3)
    fit = fit_rabi(t_us * 1e-6, p, sigma, eta)
    checks = {}
    for name, value in (("rabi_frequency", 2 * math.pi * 94.7e3), ("nbar", 6.3), ("contrast", 0.998)):
        got, se = getattr(fit.params, name), fit.stderr[name]
        checks[f"Rabi {name} within 3 sigma"] = (abs(got - value) <= 3 * se, f"{got:.6g} +- {se:.2g}")
    d = np.linspace(0, 2e-3, 10)
    exact = fit_heating(d, 6 + 10_000 * d, 0.3)
    checks["heating exact"] = (exact.rate == pytest.approx(10_000, rel=1e-9), f"{exact.rate * 1e-3!r} /ms")
    delay_ms, nbar, s = read_columns(SCENARIOS / "data" / "fig5-heating.csv", 3)
    noisy = fit_heating(delay_ms * 1e-3, nbar, s)
    checks["heating noisy within 3 sigma"] = (abs(noisy.rate - 10_000) <= 3 * noisy.rate_err,
                                              f"{noisy.rate * 1e-3:.3f} +- {noisy.rate_err * 1e-3:.3f} /ms")
    criterion(9, "coherence fits", checks)


def _invariant_ids(extra=()):
    done = subprocess.run(
        [sys.executable, "-m", "pytest", "--collect-only", "-q", "-m", "invariant and not acceptance",
         "-p", "no:cacheprovider", str(ROOT / "tests"), *extra],
        capture_output=True, text=True, cwd=ROOT,
    )
    return {line.strip() for line in done.stdout.splitlines() if "::" in line}


def test_criterion_10_property_suites(criterion):
    expected = _invariant_ids()
    seen = {k: v for k, v in INVARIANT_OUTCOMES.items() if k in expected}
    missing = sorted(expected - seen.keys())
    if missing:
        # not run in this session: run them now
        done = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-rfE", *missing],
            capture_output=True, text=True, cwd=ROOT,
        )
        for nodeid in missing:
            seen[nodeid] = "failed" if f"FAILED {nodeid}" in done.stdout or f"ERROR {nodeid}" in done.stdout \
                else ("passed" if done.returncode in (0, 1) else "error")
    failed = sorted(k for k, v in seen.items() if v != "passed")
    criterion(10, "property and invariant suites", {
        "all invariant tests pass": (bool(expected) and not failed,
                                     f"{len(seen) - len(failed)}/{len(expected)} passed"
                                     + (f"; failing: {', '.join(failed)}" if failed else "")),
    })
