"""Command-line front end.

Exit status: 0 on success, 1 for configuration or input errors, 2 when a
simulation or fit fails at run time.  CSV outputs start with one comment line
recording the tool version, a hash of the scenario (or inputs) and the seed.
Outputs go to ``--output-dir``, else ``$SPADREADOUT_OUTPUT_DIR``, else the
scenario's ``output_dir``, else the working directory.
"""
from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coherence import SR88_MASS, ATOMIC_MASS, fit_heating, fit_rabi, lamb_dicke
from .config import Scenario, ScenarioError, load_presets, load_scenario, parse_offsets
from .dataio import InputError, read_columns, write_text
from .harness import (
    ConfigError,
    ExperimentConfig,
    calibrate_confidence,
    run_experiment,
    simulate_records,
    simulate_total_counts,
)
from .histogram import fit_histogram
from .optics import crosstalk_curve, default_stack
from .rng import make_rng
from .spad import (
    NoBreakdownError,
    SpadParams,
    breakdown_voltage,
    effective_dead_time,
    estimate_pde_ttfp,
    observed_rate,
    quench_time_constants,
    read_iv_csv,
)
from .stats import FitError

__all__ = ["run", "main", "experiment_config"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
OUTPUT_ENV = "SPADREADOUT_OUTPUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _header(command: str, digest: str, seed) -> str:
    return f"# spadreadout {__version__} command={command} scenario={digest} seed={seed}"


def _output_dir(args, scenario: Scenario | None) -> Path:
    if getattr(args, "output_dir", None):
        return Path(args.output_dir)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    if scenario is not None and scenario.has("scenario", "output_dir"):
        return Path(scenario.get("scenario", "output_dir"))
    return Path(".")


def _load(args) -> Scenario | None:
    return load_scenario(args.scenario) if getattr(args, "scenario", None) else None


def _seed(args, scenario: Scenario | None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if scenario is not None and scenario.master_seed is not None:
        return scenario.master_seed
    raise ScenarioError("missing key 'master_seed' in [scenario] (or pass --seed)")


def _input_digest(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, Path) and part.exists():
            h.update(part.read_bytes())
        else:
            h.update(repr(part).encode())
    return h.hexdigest()[:16]


def _print_summary(items: dict, out=None) -> str:
    text = "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())
    (out or sys.stdout).write(text)
    return text


def _opt(scenario, section, key, default):
    return scenario.get(section, key, default) if scenario is not None else default


# --------------------------------------------------------------------------
# commands


def experiment_config(scenario: Scenario, trials=None, seed=None, threads=None) -> ExperimentConfig:
    """ExperimentConfig from a scenario; explicit arguments override scenario values."""
    rates = scenario.rate_model("rates")
    pmt = scenario.rate_model("pmt") if "pmt" in scenario.values else None
    g = scenario.get
    record_bins = rates.n_bins(g("experiment", "record_time", 2.9e-3))
    kwargs = dict(
        n_trials=trials if trials is not None else g("experiment", "n_trials", 100_000),
        master_seed=seed if seed is not None else _seed(argparse.Namespace(seed=None), scenario),
        spad_rates=rates,
        pmt_rates=pmt,
        prep_bright_probability=g("experiment", "prep_bright_probability", 0.498),
        record_bins=record_bins,
        threshold=g("discriminator", "threshold", 66.5),
        threshold_bins=rates.n_bins(g("discriminator", "threshold_time", 950e-6)),
        mle_bins=rates.n_bins(g("discriminator", "mle_time", 1.2e-3)),
        prior_bright=g("discriminator", "prior_bright", 0.5),
        confidence=g("discriminator", "confidence", None),
        epsilon_pmt=g("experiment", "epsilon_pmt", 3.5e-4),
        block_size=g("experiment", "block_size", 8192),
        threads=threads if threads is not None else g("experiment", "threads", 1),
    )
    if pmt is not None:
        kwargs["pmt_bins"] = pmt.n_bins(g("experiment", "pmt_time", 1.2e-3))
    if scenario.has("discriminator", "adaptive_max_time"):
        kwargs["adaptive_max_bins"] = rates.n_bins(g("discriminator", "adaptive_max_time"))
    return ExperimentConfig(**kwargs)


def cmd_fidelity(args) -> int:
    scenario = _load(args)
    config = experiment_config(scenario, args.trials, args.seed, args.threads)
    summary = {}
    target = scenario.get("discriminator", "target_error")
    if target is not None:
        confidence, point = calibrate_confidence(config, target)
        config = config.replace(confidence=confidence)
        summary.update({"calibrated_confidence": confidence, "calibration_mean_error": point["mean_error"],
                        "calibration_mean_time": point["mean_time"]})
    report = run_experiment(config)
    summary = {**report.summary(), **summary}
    out = _output_dir(args, scenario)
    header = _header("fidelity", scenario.digest(), config.master_seed)
    path = write_text(out / f"{scenario.name}-fidelity.csv", report.to_csv(), header)
    text = _print_summary(summary)
    write_text(out / f"{scenario.name}-summary.txt", text, header)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = _load(args)
    rates = scenario.rate_model("rates")
    seed = _seed(args, scenario)
    n_trials = args.trials if args.trials is not None else scenario.get("experiment", "n_trials", 1000)
    record_time = scenario.get("experiment", "record_time", 2.9e-3)
    n_bins = rates.n_bins(record_time)
    window = n_bins * rates.bin_width
    prep = scenario.get("experiment", "prep_bright_probability", 0.498)
    lines = ["trial,initial_state,decay_time," + ",".join(f"c{i}" for i in range(n_bins))]
    trial = 0
    for bright, switch, counts in simulate_records(rates, n_trials, n_bins, seed, prep):
        for b, s, row in zip(bright, switch, counts):
            decay = "" if b or s >= window else repr(float(s))
            state = "bright" if b else "dark"
            lines.append(f"{trial},{state},{decay}," + ",".join(map(str, row.tolist())))
            trial += 1
    out = _output_dir(args, scenario)
    path = write_text(out / f"{scenario.name}-records.csv", "\n".join(lines) + "\n",
                      _header("simulate", scenario.digest(), seed))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_histogram(args) -> int:
    scenario = _load(args)
    if args.input:
        counts, freq = read_columns(args.input, 2)
        hist = np.zeros(int(counts.max()) + 1)
        hist[counts.astype(int)] = freq
        window = args.window if args.window is not None else _opt(scenario, "histogram", "window", 2.9e-3)
        bin_width = scenario.rate_model("rates").bin_width if scenario else 25e-6
        seed = "none"
        digest = _input_digest(Path(args.input), window)
        name = Path(args.input).stem
    else:
        if scenario is None:
            raise UsageError("histogram: give --scenario or --input")
        rates = scenario.rate_model("rates")
        seed = _seed(args, scenario)
        window = scenario.get("histogram", "window", 2.9e-3)
        n_bins = rates.n_bins(window)
        window = n_bins * rates.bin_width
        n = args.trials if args.trials is not None else scenario.get("histogram", "n_trials", 40_000)
        prep = scenario.get("histogram", "prep_bright_probability", 0.5)
        totals, _ = simulate_total_counts(rates, n, n_bins, seed, prep)
        hist = np.bincount(totals).astype(float)
        bin_width = rates.bin_width
        digest = scenario.digest()
        name = scenario.name
    fit = fit_histogram(hist, window, bin_width)
    model = hist.sum() * fit.model_pmf(hist.size - 1)
    rows = ["count,frequency,model"]
    rows += [f"{k},{int(h) if float(h).is_integer() else repr(float(h))},{float(m)!r}"
             for k, (h, m) in enumerate(zip(hist, model))]
    out = _output_dir(args, scenario)
    header = _header("histogram", digest, seed)
    path = write_text(out / f"{name}-histogram.csv", "\n".join(rows) + "\n", header)
    write_text(out / f"{name}-histogram-fit.txt", fit.summary(), header)
    sys.stdout.write(fit.summary())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_crosstalk(args) -> int:
    scenario = _load(args)
    stack = scenario.geometry() if scenario is not None else default_stack()
    seed = _seed(args, scenario)
    if args.offsets is not None:
        try:
            offsets_um = parse_offsets(args.offsets)
        except ValueError as exc:
            raise UsageError(f"crosstalk: --offsets: {exc}") from exc
    else:
        offsets_um = _opt(scenario, "crosstalk", "offsets_um", parse_offsets("0:480:24"))
    n_rays = args.rays if args.rays is not None else _opt(scenario, "crosstalk", "n_rays", 200_000)
    curve = crosstalk_curve(
        np.asarray(offsets_um) * 1e-6, stack, n_rays, make_rng(seed),
        bright_ion_scatter_rate=_opt(scenario, "crosstalk", "scatter_rate", None),
        pde=_opt(scenario, "crosstalk", "pde", None),
        anchor_rate=_opt(scenario, "crosstalk", "anchor_rate", 60e3),
    )
    name = scenario.name if scenario is not None else "crosstalk"
    digest = scenario.digest() if scenario is not None else _input_digest("default-stack", offsets_um.tolist(), n_rays)
    if scenario is not None and args.offsets is not None:
        digest = _input_digest(digest, args.offsets, n_rays)
    out = _output_dir(args, scenario)
    path = write_text(out / f"{name}-crosstalk.csv", curve.to_csv(), _header("crosstalk", digest, seed))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_characterize(args) -> int:
    scenario = _load(args)
    if args.what == "ttfp":
        source = args.input or (scenario and str(scenario.resolve_path("characterize", "ttfp_data")))
        period = args.period if args.period is not None else _opt(scenario, "characterize", "period", None)
        if not source or period is None:
            raise UsageError("characterize ttfp: need --input and --period (or a scenario)")
        (samples,) = read_columns(source, 1)
        est = estimate_pde_ttfp(samples, period)
        _print_summary({"pde": est.value, "stderr": est.stderr, "ci95_lo": est.value - 1.96 * est.stderr,
                        "ci95_hi": est.value + 1.96 * est.stderr, "n_samples": est.n_samples})
    elif args.what == "breakdown":
        source = args.input or (scenario and str(scenario.resolve_path("characterize", "iv_data")))
        if not source:
            raise UsageError("characterize breakdown: need --input (or a scenario)")
        limit = args.current_limit or _opt(scenario, "characterize", "current_limit", 200e-6)
        fraction = args.threshold_fraction or _opt(scenario, "characterize", "threshold_fraction", 0.01)
        v = breakdown_voltage(read_iv_csv(source, limit), fraction)
        _print_summary({"breakdown_voltage": v})
    else:
        if args.preset:
            presets = load_presets("spad")
            if args.preset not in presets:
                raise ScenarioError(f"unknown spad preset '{args.preset}' (known: {', '.join(presets)})")
            params = SpadParams(**presets[args.preset])
        elif scenario is not None and "spad" in scenario.values:
            params = scenario.spad_params()
        else:
            params = SpadParams()
        tq, tr = quench_time_constants(params)
        _print_summary({
            "quench_tau": tq,
            "recharge_tau": tr,
            "effective_dead_time_model": effective_dead_time(tq, tr),
            "effective_dead_time_preset": params.effective_dead_time,
            "saturation_at_40kcps": 1 - observed_rate(40e3, params.effective_dead_time) / 40e3,
        })
    return EXIT_OK


def _eta(args, scenario) -> float:
    wavelength = args.wavelength or _opt(scenario, "coherence", "wavelength", 674e-9)
    angle = args.angle if args.angle is not None else _opt(scenario, "coherence", "projection_angle", 0.0)
    mass_u = args.mass_u or _opt(scenario, "coherence", "mass_u", SR88_MASS / ATOMIC_MASS)
    freq = args.mode_frequency_hz or _opt(scenario, "coherence", "mode_frequency_hz", 5e6)
    return lamb_dicke(wavelength, angle, mass_u * ATOMIC_MASS, 2 * math.pi * freq)


def cmd_fit_rabi(args) -> int:
    scenario = _load(args)
    source = args.input or (scenario and str(scenario.resolve_path("coherence", "rabi_data")))
    if not source:
        raise UsageError("fit-rabi: need --input (or a scenario with rabi_data)")
    t_us, p, sigma = read_columns(source, 3)
    nbar_max = args.nbar_max or _opt(scenario, "coherence", "nbar_max", 100.0)
    fit = fit_rabi(t_us * 1e-6, p, sigma, _eta(args, scenario), nbar_max=nbar_max)
    sys.stdout.write(fit.summary())
    out = _output_dir(args, scenario)
    path = write_text(out / f"{Path(source).stem}-rabi-residuals.csv", fit.residuals_csv(),
                      _header("fit-rabi", _input_digest(Path(source)), "none"))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_fit_heating(args) -> int:
    scenario = _load(args)
    source = args.input or (scenario and str(scenario.resolve_path("coherence", "heating_data")))
    if not source:
        raise UsageError("fit-heating: need --input (or a scenario with heating_data)")
    delay_ms, nbar, sigma = read_columns(source, 3)
    fit = fit_heating(delay_ms * 1e-3, nbar, sigma)
    sys.stdout.write(fit.summary())
    return EXIT_OK


def cmd_presets(args) -> int:
    for kind in ("rates", "spad"):
        for name, values in load_presets(kind).items():
            detail = ", ".join(f"{k}={_fmt(v)}" for k, v in values.items() if k != "background_breakdown")
            print(f"{kind}\t{name}\t{detail}")
    print("geometry\tdefault\tdefault trap/oxide/ground-plane/oxide stack")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spadreadout", description="Trapped-ion SPAD readout simulator and analysis tools.")
    p.add_argument("--version", action="version", version=f"spadreadout {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True, trials=True):
        sp.add_argument("--scenario", help="scenario file")
        sp.add_argument("--output-dir", help="directory for output files")
        if seed:
            sp.add_argument("--seed", type=int, help="override the scenario master_seed")
        if trials:
            sp.add_argument("--trials", type=int, help="override the number of trials")

    sp = sub.add_parser("simulate", help="write simulated count records")
    common(sp)
    sp.set_defaults(func=cmd_simulate, needs_scenario=True)

    sp = sub.add_parser("fidelity", help="error versus detection time for all discriminators")
    common(sp)
    sp.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    sp.set_defaults(func=cmd_fidelity, needs_scenario=True)

    sp = sub.add_parser("histogram", help="total-count histogram and mixture fit")
    common(sp)
    sp.add_argument("--input", help="fit an existing histogram CSV (count,frequency) instead")
    sp.add_argument("--window", type=float, help="detection window of --input, s")
    sp.set_defaults(func=cmd_histogram, needs_scenario=False)

    sp = sub.add_parser("crosstalk", help="collection efficiency versus lateral ion offset")
    common(sp, trials=False)
    sp.add_argument("--offsets", help="offsets in um: start:stop:step (inclusive) or a comma list")
    sp.add_argument("--rays", type=int, help="rays per offset")
    sp.set_defaults(func=cmd_crosstalk, needs_scenario=False)

    sp = sub.add_parser("characterize", help="detector characterization")
    sp.add_argument("what", choices=["ttfp", "breakdown", "quench"])
    common(sp, seed=False, trials=False)
    sp.add_argument("--input", help="data CSV")
    sp.add_argument("--period", type=float, help="mean photon inter-arrival time, s (ttfp)")
    sp.add_argument("--current-limit", type=float, help="IV current limit, A (breakdown)")
    sp.add_argument("--threshold-fraction", type=float, help="fraction of the current limit (breakdown)")
    sp.add_argument("--preset", help="spad preset name (quench)")
    sp.set_defaults(func=cmd_characterize, needs_scenario=False)

    for name, func, help_ in (("fit-rabi", cmd_fit_rabi, "thermal Rabi fit"),
                              ("fit-heating", cmd_fit_heating, "linear heating-rate fit")):
        sp = sub.add_parser(name, help=help_)
        common(sp, seed=False, trials=False)
        sp.add_argument("--input", help="data CSV")
        if name == "fit-rabi":
            sp.add_argument("--wavelength", type=float, help="m")
            sp.add_argument("--angle", type=float, help="projection angle, rad")
            sp.add_argument("--mass-u", type=float, help="ion mass, u")
            sp.add_argument("--mode-frequency-hz", type=float, help="motional mode frequency, Hz")
            sp.add_argument("--nbar-max", type=float, help="upper bound on nbar")
        sp.set_defaults(func=func, needs_scenario=False)

    sp = sub.add_parser("presets", help="list shipped presets")
    sp.add_argument("action", choices=["list"])
    sp.set_defaults(func=cmd_presets, needs_scenario=False)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("spadreadout: a command is required (see --help)")
        if args.needs_scenario and not args.scenario:
            raise UsageError(f"{args.command}: --scenario is required")
        return args.func(args)
    except (FitError, NoBreakdownError, RuntimeError, FloatingPointError) as exc:
        print(f"spadreadout: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ScenarioError, ConfigError, InputError, ValueError, OSError) as exc:
        print(f"spadreadout: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())
