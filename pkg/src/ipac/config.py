"""Experiment configuration: INI files with sections, SI units, two presets.

Every key has a type and a default taken from the selected preset. A file
overrides preset values key by key; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .arraymodel import ProbeGeometry, PulseSpec, TransmitScheme


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()] if text.strip() else []


def _pairs(text: str) -> list[list[float]]:
    """``"x z; x z"`` -> ``[[x, z], ...]``."""
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            vals = _float_list(chunk)
            if len(vals) != 2:
                raise ValueError(f"expected 'x z', got {chunk.strip()!r}")
            out.append(vals)
    return out


def _vessels(text: str) -> list[list[float]]:
    """``"x0 z0 x1 z1 radius; ..."`` -> list of 5-tuples."""
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            vals = _float_list(chunk)
            if len(vals) != 5:
                raise ValueError(f"expected 'x0 z0 x1 z1 radius', got {chunk.strip()!r}")
            out.append(vals)
    return out


def _roi(text: str) -> list[int]:
    vals = [int(v) for v in text.replace(",", " ").split()]
    if len(vals) != 4:
        raise ValueError("expected 'z_start z_stop x_start x_stop'")
    return vals


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ratio(text: str) -> float:
    v = float(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


# section -> key -> parser
SCHEMA = {
    "probe": {"kind": str, "n_elements": int, "pitch": float, "element_width": float,
              "element_height": float, "elevation_focus": float},
    "pulse": {"center_frequency": float, "fractional_bandwidth": float, "n_cycles": float,
              "sampling_rate": float},
    "transmit": {"kind": str, "angles_deg": _float_list, "virtual_sources": _pairs},
    "medium": {"sound_speed": float},
    "scene": {"n_bubbles": int, "n_frames": int, "x_min": float, "x_max": float, "z_min": float,
              "z_max": float, "speed": float, "frame_interval": float, "amplitude_min": float,
              "amplitude_max": float, "vessels": _vessels, "tissue_density": _ratio,
              "tissue_reflectivity": float},
    "aberration": {"max_attenuation": float, "max_delay_wavelengths": float, "smoothness_len": int},
    "acquisition": {"snr_db": float, "record_depth": float},
    "imaging": {"x_min": float, "x_max": float, "z_min": float, "z_max": float, "pitch": float,
                "f_number": float, "svd_threshold": int},
    "inversion": {"alpha": float, "max_iter": int, "eps": float, "n_bins": int, "n_frames": int,
                  "inner_iter": int, "joint_steps": int, "threshold_db": float, "window": int,
                  "min_correlation": float, "transmit_corrections": _bool},
    "baseline": {"window_pulses": float, "pad": int, "n_bubbles": int},
    "evaluate": {"vessel_roi": _roi, "noise_roi": _roi},
}

_COMMON = {
    "medium": {"sound_speed": 1540.0},
    "aberration": {"max_attenuation": 0.5, "max_delay_wavelengths": 1.0, "smoothness_len": 4},
    "acquisition": {"snr_db": 30.0, "record_depth": 0.0},
    "inversion": {"alpha": 0.01, "max_iter": 6, "eps": 1e-2, "n_bins": 48, "n_frames": 5, "inner_iter": 3,
                  "joint_steps": 3, "threshold_db": 20.0, "window": 7, "min_correlation": 0.5,
                  "transmit_corrections": True},
    "baseline": {"window_pulses": 3.0, "pad": 8, "n_bubbles": 5},
    "evaluate": {},
}

PRESETS = {
    "l22": {
        "probe": {"kind": "linear", "n_elements": 128, "pitch": 0.1e-3, "element_width": 0.08e-3,
                  "element_height": 1.5e-3, "elevation_focus": 8e-3},
        "pulse": {"center_frequency": 15.625e6, "fractional_bandwidth": 0.67, "n_cycles": 3.0,
                  "sampling_rate": 62.5e6},
        "transmit": {"kind": "plane_wave", "angles_deg": [float(a) for a in range(-5, 6)],
                     "virtual_sources": []},
        "scene": {"n_bubbles": 30, "n_frames": 10, "x_min": -5e-3, "x_max": 5e-3, "z_min": 3e-3,
                  "z_max": 9e-3, "speed": 0.02, "frame_interval": 1e-3, "amplitude_min": 0.5,
                  "amplitude_max": 1.0, "vessels": [], "tissue_density": 0.0, "tissue_reflectivity": 0.0},
        "imaging": {"x_min": -5.5e-3, "x_max": 5.5e-3, "z_min": 2.5e-3, "z_max": 9.5e-3, "pitch": 25e-6,
                    "f_number": 0.0, "svd_threshold": 0},
    },
    "p42": {
        "probe": {"kind": "phased", "n_elements": 64, "pitch": 0.3e-3, "element_width": 0.25e-3,
                  "element_height": 14e-3, "elevation_focus": 60e-3},
        "pulse": {"center_frequency": 2.5e6, "fractional_bandwidth": 0.6, "n_cycles": 2.0,
                  "sampling_rate": 10e6},
        "transmit": {"kind": "diverging", "angles_deg": [],
                     "virtual_sources": [[-4.8e-3, -10e-3], [0.0, -10e-3], [4.8e-3, -10e-3]]},
        "scene": {"n_bubbles": 30, "n_frames": 5, "x_min": -20e-3, "x_max": 20e-3, "z_min": 20e-3,
                  "z_max": 60e-3, "speed": 0.05, "frame_interval": 1e-3, "amplitude_min": 0.5,
                  "amplitude_max": 1.0, "vessels": [], "tissue_density": 0.0, "tissue_reflectivity": 0.0},
        "imaging": {"x_min": -25e-3, "x_max": 25e-3, "z_min": 15e-3, "z_max": 65e-3, "pitch": 0.15e-3,
                    "f_number": 0.0, "svd_threshold": 0},
    },
}
for _p in PRESETS.values():
    for _sec, _vals in _COMMON.items():
        _p.setdefault(_sec, {}).update(copy.deepcopy(_vals))


class ExperimentConfig:
    """Resolved configuration (``section -> key -> value``) plus seed."""

    def __init__(self, values: dict, seed: int = 0, preset: str | None = None):
        self.values = values
        self.seed = int(seed)
        self.preset = preset
        self.validate()

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_dict(self) -> dict:
        return {"preset": self.preset, "seed": self.seed, "values": self.values}

    def hash(self) -> str:
        """Short SHA-256 over the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def validate(self) -> None:
        for sec in ("probe", "pulse", "transmit"):
            if sec not in self.values or not self.values[sec]:
                raise ConfigError(f"[{sec}] section is missing")
            missing = set(SCHEMA[sec]) - set(self.values[sec])
            if missing:
                raise ConfigError(f"[{sec}] missing keys: {', '.join(sorted(missing))}")
        try:
            self.geometry()
            self.pulse()
            self.scheme()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        snr = self.values.get("acquisition", {}).get("snr_db", math.inf)
        if math.isnan(snr):
            raise ConfigError("[acquisition] snr_db: must be a number or inf")

    def geometry(self) -> ProbeGeometry:
        p = self.values["probe"]
        return ProbeGeometry(p["n_elements"], p["pitch"], p["element_width"], p["element_height"],
                             p["elevation_focus"], p["kind"])

    def pulse(self) -> PulseSpec:
        p = self.values["pulse"]
        return PulseSpec(p["center_frequency"], p["fractional_bandwidth"], p["n_cycles"], p["sampling_rate"])

    def scheme(self) -> TransmitScheme:
        t = self.values["transmit"]
        if t["kind"] == "plane_wave":
            return TransmitScheme("plane_wave", tuple(np.deg2rad(t["angles_deg"])))
        return TransmitScheme(t["kind"], virtual_sources=tuple(tuple(v) for v in t["virtual_sources"]))

    @property
    def sound_speed(self) -> float:
        return self.values["medium"]["sound_speed"]


def _parse_value(section: str, key: str, text: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"[{section}] unknown key {key!r}")
    try:
        return SCHEMA[section][key](text.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def load_config(path=None, preset: str | None = None, seed: int = 0, overrides: dict | None = None
                ) -> ExperimentConfig:
    """Resolve a configuration from a preset, an INI file and explicit overrides.

    Without a preset the file must provide the probe, pulse and transmit
    sections. ``overrides`` maps ``(section, key)`` to already typed values.
    """
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if preset is not None:
        values = copy.deepcopy(PRESETS[preset])
    else:
        values = copy.deepcopy(_COMMON)
        for sec in ("scene", "imaging"):
            values[sec] = copy.deepcopy(PRESETS["l22"][sec])
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        for section in parser.sections():
            target = values.setdefault(section, {})
            for key, text in parser.items(section):
                target[key] = _parse_value(section, key, text)
    for (section, key), value in (overrides or {}).items():
        values.setdefault(section, {})[key] = value
    return ExperimentConfig(values, seed, preset)


def write_config(cfg: ExperimentConfig, path) -> Path:
    """Write the resolved configuration back as INI (round-trips through :func:`load_config`)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, vals in cfg.values.items():
        parser[section] = {}
        for key, v in vals.items():
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif key in ("virtual_sources", "vessels"):
                text = "; ".join(" ".join(repr(float(x)) for x in row) for row in v)
            elif isinstance(v, list):
                text = " ".join(repr(x) for x in v)
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            parser[section][key] = text
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path
