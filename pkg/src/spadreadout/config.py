"""Plain-text scenario files: sectioned ``key = value`` with ``include``.

Syntax::

    # comment
    include = ../common.scn        ; path relative to the including file
    [rates]
    preset = paper-passive
    bright_rate = 106e3            ; counts/s

Every key is checked against :data:`SCHEMA`; unknown sections or keys are
reported with their file and line.  All quantities are SI (s, m, counts/s,
rad/s) unless a key name says otherwise.  A later assignment of the same key
overrides an earlier one, except for the repeatable geometry ``layer`` key.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .optics import GeometryStack, Layer, default_stack
from .source import RateModel
from .spad import SpadParams

__all__ = [
    "ScenarioError",
    "Scenario",
    "SCHEMA",
    "load_scenario",
    "parse_scenario_text",
    "load_presets",
    "preset_names",
    "rate_model_to_text",
    "rate_model_from_text",
    "parse_offsets",
]


class ScenarioError(ValueError):
    """Bad scenario content; the message starts with ``file:line`` where known."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("none", "simulate", "") else float(text)


def parse_offsets(text: str) -> np.ndarray:
    """``start:stop:step`` (stop inclusive) or a comma list, in the units written."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"expected start:stop:step, got {text!r}")
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return start + step * np.arange(n)
    return np.array([float(p) for p in text.split(",") if p.strip()])


def _layer(text: str) -> Layer:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError("layer needs: name, thickness, index, aperture|none")
    aperture = None if parts[3].lower() == "none" else float(parts[3])
    return Layer(parts[0], float(parts[1]), float(parts[2]), aperture)


_RATE_KEYS = {
    "preset": str,
    "bright_rate": float,            # counts/s
    "dark_rate": float,              # counts/s
    "bin_width": float,              # s
    "decay_rate": float,             # 1/s
    "lifetime": float,               # s, alternative to decay_rate
    "dispersion": float,
    "disperse_bright": _bool,
    "breakdown_tolerance": float,
    "background": str,               # name:cps, name:cps, ...
}

_SPAD_KEYS = {
    "preset": str,
    "breakdown_voltage": float,      # V
    "overbias": float,               # V
    "pde": float,
    "dcr": float,                    # counts/s
    "quench_tau": float,             # s
    "recharge_tau": float,           # s
    "effective_dead_time": float,    # s
    "r_internal": float,             # ohm
    "r_probe": float,
    "r_quench": float,
    "c_total": float,                # F
}

SCHEMA: dict = {
    "scenario": {"name": str, "master_seed": _int, "output_dir": str, "description": str},
    "rates": _RATE_KEYS,
    "pmt": _RATE_KEYS,
    "spad": _SPAD_KEYS,
    "discriminator": {
        "threshold": float,          # counts
        "threshold_time": float,     # s
        "mle_time": float,           # s
        "prior_bright": float,
        "confidence": float,
        "target_error": float,       # calibrate the adaptive confidence to this mean error
        "adaptive_max_time": float,  # s
    },
    "experiment": {
        "n_trials": _int,
        "prep_bright_probability": float,
        "record_time": float,        # s
        "pmt_time": float,           # s
        "epsilon_pmt": _opt_float,   # number, or "simulate"
        "block_size": _int,
        "threads": _int,
    },
    "histogram": {
        "n_trials": _int,
        "window": float,             # s
        "prep_bright_probability": float,
    },
    "geometry": {
        "preset": str,
        "ion_height": float,         # m
        "spad_diameter": float,      # m
        "fresnel": _bool,
        "track_reflections": _bool,
        "metal_reflectivity": float,
        "layer": _layer,             # repeatable, top to bottom
    },
    "crosstalk": {
        "offsets_um": parse_offsets,  # micrometres
        "n_rays": _int,
        "anchor_rate": float,        # counts/s at zero offset
        "scatter_rate": float,       # photons/s emitted by a bright ion (optional)
        "pde": float,
    },
    "coherence": {
        "wavelength": float,         # m
        "projection_angle": float,   # rad
        "mass_u": float,             # atomic mass units
        "mode_frequency_hz": float,
        "rabi_data": str,            # CSV t_us,p_bright,sigma
        "heating_data": str,         # CSV delay_ms,nbar,sigma
        "nbar_max": float,
    },
    "characterize": {
        "ttfp_data": str,
        "period": float,             # s, mean photon inter-arrival of the source
        "iv_data": str,
        "current_limit": float,      # A
        "threshold_fraction": float,
    },
}

_REPEATABLE = {("geometry", "layer")}


@dataclass
class Scenario:
    values: dict = field(default_factory=dict)    # section -> key -> value
    origins: dict = field(default_factory=dict)   # (section, key) -> "file:line"
    files: list = field(default_factory=list)
    base_dir: Path = Path(".")

    # -- lookups -----------------------------------------------------------
    def has(self, section: str, key: str) -> bool:
        return key in self.values.get(section, {})

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.values.get(section, {}).get(key, default)

    def where(self, section: str, key: str) -> str:
        return self.origins.get((section, key), f"[{section}]")

    def require(self, section: str, key: str) -> Any:
        if not self.has(section, key):
            raise ScenarioError(f"missing key '{key}' in [{section}]")
        return self.get(section, key)

    @property
    def name(self) -> str:
        return self.get("scenario", "name", "unnamed")

    @property
    def master_seed(self) -> Optional[int]:
        return self.get("scenario", "master_seed")

    def resolve_path(self, section: str, key: str) -> Path:
        raw = Path(self.require(section, key))
        return raw if raw.is_absolute() else self.base_dir / raw

    def digest(self) -> str:
        """Short hash of the resolved content, independent of file layout."""
        h = hashlib.sha256()
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                value = self.values[section][key]
                if isinstance(value, np.ndarray):
                    value = value.tolist()
                h.update(f"{section}.{key}={value!r}\n".encode())
        return h.hexdigest()[:16]

    # -- typed builders ----------------------------------------------------
    def rate_model(self, section: str = "rates") -> RateModel:
        return _build_rates(self.values.get(section, {}), section, self.origins)

    def spad_params(self) -> SpadParams:
        values = dict(self.values.get("spad", {}))
        preset = values.pop("preset", None)
        merged = {}
        if preset is not None:
            merged.update(_lookup_preset("spad", preset, self.where("spad", "preset")))
        merged.update(values)
        merged.setdefault("name", preset or "")
        try:
            return SpadParams(**merged)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"[spad]: {exc}") from exc

    def geometry(self) -> GeometryStack:
        values = dict(self.values.get("geometry", {}))
        preset = values.pop("preset", None)
        layers = values.pop("layer", None)
        if preset not in (None, "default"):
            raise ScenarioError(f"{self.where('geometry', 'preset')}: unknown geometry preset '{preset}'")
        base = default_stack()
        try:
            if layers:
                base = base.replace(layers=tuple(layers))
            return base.replace(**values) if values else base
        except ValueError as exc:
            raise ScenarioError(f"[geometry]: {exc}") from exc


def _parse_background(text: str, where: str) -> dict:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            name, value = item.split(":")
            out[name.strip()] = float(value)
        except ValueError as exc:
            raise ScenarioError(f"{where}: background entries are name:cps, got {item.strip()!r}") from exc
    return out


def _build_rates(values: dict, section: str, origins: dict) -> RateModel:
    values = dict(values)
    where = origins.get((section, "preset"), f"[{section}]")
    preset = values.pop("preset", None)
    merged: dict = {}
    if preset is not None:
        merged.update(_lookup_preset("rates", preset, where))
    merged.update(values)
    if "lifetime" in merged:
        lifetime = merged.pop("lifetime")
        if "decay_rate" in values and "lifetime" in values:
            raise ScenarioError(f"[{section}]: give either lifetime or decay_rate, not both")
        if "decay_rate" not in values:
            merged["decay_rate"] = 0.0 if lifetime == float("inf") else 1.0 / lifetime
    if "background" in merged:
        merged["background_breakdown"] = _parse_background(
            merged.pop("background"), origins.get((section, "background"), f"[{section}]")
        )
    merged.setdefault("name", preset or section)
    missing = [k for k in ("bright_rate", "dark_rate") if k not in merged]
    if missing:
        raise ScenarioError(f"[{section}]: missing key(s) {', '.join(missing)} (or a preset)")
    try:
        return RateModel(**merged)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"[{section}]: {exc}") from exc


# --------------------------------------------------------------------------
# parsing


def _parse_lines(text: str, source: str, base_dir: Path, scenario: Scenario, schema: dict,
                 stack: tuple, section: Optional[str] = None) -> None:
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in schema:
                raise ScenarioError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ScenarioError(f"{where}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "include":
            path = Path(value)
            path = path if path.is_absolute() else base_dir / path
            _parse_file(path, scenario, schema, stack, where)
            continue
        if section is None:
            raise ScenarioError(f"{where}: key '{key}' appears before any [section]")
        converter: Optional[Callable] = schema[section].get(key)
        if converter is None:
            raise ScenarioError(f"{where}: unknown key '{key}' in [{section}]")
        try:
            typed = converter(value)
        except ValueError as exc:
            raise ScenarioError(f"{where}: bad value for '{key}': {exc}") from exc
        bucket = scenario.values.setdefault(section, {})
        if (section, key) in _REPEATABLE:
            bucket.setdefault(key, []).append(typed)
        else:
            bucket[key] = typed
        scenario.origins[(section, key)] = where


def _parse_file(path: Path, scenario: Scenario, schema: dict, stack: tuple, where: str = "") -> None:
    path = Path(path)
    resolved = path.resolve()
    if resolved in stack:
        raise ScenarioError(f"{where or path}: include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{where + ': ' if where else ''}cannot read {path}: {exc.strerror}") from exc
    scenario.files.append(str(path))
    _parse_lines(text, str(path), path.parent, scenario, schema, stack + (resolved,))


def load_scenario(path) -> Scenario:
    path = Path(path)
    scenario = Scenario(base_dir=path.parent)
    _parse_file(path, scenario, SCHEMA, ())
    _validate_presets(scenario)
    return scenario


def parse_scenario_text(text: str, source: str = "<text>", base_dir=".") -> Scenario:
    scenario = Scenario(base_dir=Path(base_dir))
    _parse_lines(text, source, Path(base_dir), scenario, SCHEMA, ())
    _validate_presets(scenario)
    return scenario


def _validate_presets(scenario: Scenario) -> None:
    for section, kind in (("rates", "rates"), ("pmt", "rates"), ("spad", "spad")):
        name = scenario.get(section, "preset")
        if name is not None:
            _lookup_preset(kind, name, scenario.where(section, "preset"))


# --------------------------------------------------------------------------
# shipped presets

_PRESET_FILES = {"rates": "rates.cfg", "spad": "spad.cfg"}
_PRESET_SCHEMA = {"rates": _RATE_KEYS, "spad": _SPAD_KEYS}


def load_presets(kind: str) -> dict:
    """Named presets of one kind ('rates' or 'spad'): name -> constructor kwargs."""
    text = resources.files("spadreadout.presets").joinpath(_PRESET_FILES[kind]).read_text()
    sections = {name: _PRESET_SCHEMA[kind] for name in _preset_section_names(text)}
    holder = Scenario()
    _parse_lines(text, f"presets/{_PRESET_FILES[kind]}", Path("."), holder, sections, ())
    out = {}
    for name, values in holder.values.items():
        values = dict(values)
        if kind == "rates" and "background" in values:
            values["background_breakdown"] = _parse_background(values.pop("background"), name)
        if kind == "rates" and "lifetime" in values:
            values["decay_rate"] = 1.0 / values.pop("lifetime")
        out[name] = values
    return out


def _preset_section_names(text: str):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith("[") and line.endswith("]"):
            yield line[1:-1].strip()


def preset_names(kind: str):
    return list(load_presets(kind))


def _lookup_preset(kind: str, name: str, where: str) -> dict:
    presets = load_presets(kind)
    if name not in presets:
        raise ScenarioError(f"{where}: unknown {kind} preset '{name}' (known: {', '.join(presets)})")
    return dict(presets[name])


# --------------------------------------------------------------------------
# RateModel <-> text


def rate_model_to_text(model: RateModel, section: str = "rates") -> str:
    lines = [f"[{section}]"]
    for key in ("bright_rate", "dark_rate", "bin_width", "decay_rate", "dispersion", "breakdown_tolerance"):
        lines.append(f"{key} = {float(getattr(model, key))!r}")
    lines.append(f"disperse_bright = {'true' if model.disperse_bright else 'false'}")
    if model.background_breakdown:
        items = ", ".join(f"{k}:{float(v)!r}" for k, v in model.background_breakdown.items())
        lines.append(f"background = {items}")
    return "\n".join(lines) + "\n"


def rate_model_from_text(text: str, section: str = "rates") -> RateModel:
    scenario = parse_scenario_text(text)
    return scenario.rate_model(section)
