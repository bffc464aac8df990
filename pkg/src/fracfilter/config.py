"""Experiment configuration: JSON schema, presets and validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

__all__ = ["ConfigError", "TestCaseConfig", "PRESETS", "preset", "load_config", "deep_merge"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


_FILTERS = {
    "J": 200,
    "M": 30,
    "R": 3,
    "n_steps": 200,
    "N_e": 100,
    "batch_size": None,
    "gamma_fraction": 0.05,
    "gamma_decay": 0.98,
    "gamma_floor_fraction": 0.001,
    "variance_floor": 1e-3,
    "literal_comparator": False,
    "implicit_likelihood": True,
    "initial_ensemble_std": 0.1,
    "bounds": None,
    "aug_bounds": None,
    "ridge": 1e-10,
}

DEFAULTS = {
    "case": "custom",
    "geometry": {
        "domain": [2.0, 1.0],
        "h": 0.025,
        "cell_kind": "triangle",
        "fracture": {"x": 1.0, "width": 0.001, "segments": [[0.0, 1.0, "all"]]},
    },
    "time": {"T": 1.0, "n_fine": 800, "n_filter": 50},
    "model": {
        "variant": "continuous_pressure",
        "param_names": ["k1", "k2", "alpha_f"],
        "true_params": [1.0, 1.0, 2.0],
        "initial_guess": [8.0, 8.0, 8.0],
        "parameterization": "direct",
        "porosity": [1.0, 1.0, 1.0],
        "xi": 1.0,
        "fracture_zones": {},
    },
    "boundary": {"kind": "testcase1"},
    "darcy": None,
    "observation": {"kind": "full", "fraction": 1.0, "obs_noise_std": 1e-3},
    "noise": {"model_noise_c": 1e-3},
    "filters": _FILTERS,
    "scenarios": [{"label": "default"}],
    "field_steps": [],
    "seed": 0,
}

_TC1 = deep_merge(DEFAULTS, {
    "case": 1,
    "boundary": {"kind": "testcase1", "strip_length": 0.2, "left": 0.0, "right": 1.0,
                 "fracture_bottom": 1.0, "fracture_top": 0.0},
    "filters": {"bounds": [[1e-6, 10.0]] * 3, "aug_bounds": [[0.1, 8.0]] * 3},
    "scenarios": [
        {"label": "full", "observation": {"kind": "full", "fraction": 1.0}},
        {"label": "mask75", "observation": {"kind": "random_mask", "fraction": 0.75}},
        {"label": "mixed50", "observation": {"kind": "mixed_arctan", "fraction": 0.5}},
    ],
})

_TC2 = deep_merge(DEFAULTS, {
    "case": 2,
    "geometry": {"fracture": {"x": 1.0, "width": 0.001, "segments": [
        [0.0, 0.25, "outer_low"], [0.25, 0.75, "middle"], [0.75, 1.0, "outer_high"]]}},
    "model": {
        "variant": "general_interface",
        "param_names": ["k1", "k2", "k_f"],
        "true_params": [1.0, 1.0, 2000.0],
        "initial_guess": [8.0, 8.0, 8000.0],
        "fracture_zones": {"outer_low": "tangential", "middle": "normal", "outer_high": "tangential"},
    },
    "boundary": {"kind": "testcase2", "left": 1.0, "right": 0.0,
                 "fracture_bottom": 1.0, "fracture_top": 0.0},
    "filters": {"M": 50, "R": 4,
                "bounds": [[1e-6, 10.0], [1e-6, 10.0], [1.0, 1e4]],
                "aug_bounds": [[0.1, 8.0], [0.1, 8.0], [1.0, 1e4]]},
    "scenarios": [
        {"label": "omega1", "noise": {"model_noise_c": 1e-3}},
        {"label": "omega2", "noise": {"model_noise_c": 1e-2}},
        {"label": "omega3", "noise": {"model_noise_c": 1e-1}},
    ],
})

_D_MATRIX, _D_FRACTURE, _WIDTH3 = 3.15e-4, 9.92e-3, 0.1
_RHO_TRUE = [1.0 / _D_MATRIX, 1.0 / _D_MATRIX, 1.0 / (_D_FRACTURE * _WIDTH3)]

_TC3 = deep_merge(DEFAULTS, {
    "case": 3,
    "geometry": {"cell_kind": "rectangle",
                 "fracture": {"x": 1.0, "width": _WIDTH3, "segments": [[0.0, 1.0, "all"]]}},
    "time": {"T": 5.0, "n_fine": 800, "n_filter": 50},
    "model": {
        "variant": "advection_diffusion",
        "param_names": ["rho1", "rho2", "rho_f"],
        "true_params": _RHO_TRUE,
        "initial_guess": [2.0 * r for r in _RHO_TRUE],
        "parameterization": "reciprocal",
        "porosity": [0.05, 0.05, 0.1 * _WIDTH3],
    },
    "boundary": {"kind": "testcase3", "bottom": 1.0, "top": 0.0,
                 "fracture_bottom": 1.0, "fracture_top": 0.0},
    "darcy": {"conductivities": [9.92e-6, 9.92e-6, 3.15e-5 * _WIDTH3],
              "bottom_pressure": 100.0, "bottom_slope": 0.1, "top_pressure": 0.0,
              "perturbation": 1e-4},
    "filters": {"M": 40, "R": 4,
                "bounds": [[1.0, 1e5]] * 3,
                "aug_bounds": [[1.0, 1e5]] * 3},
    "scenarios": [
        {"label": "omega1", "noise": {"model_noise_c": 1e-3}},
        {"label": "omega2", "noise": {"model_noise_c": 1e-1}},
    ],
})


def _small(cfg: dict) -> dict:
    return deep_merge(cfg, {"geometry": {"h": 0.05}, "filters": {"J": 100}})


PRESETS = {
    "testcase1": _TC1,
    "testcase2": _TC2,
    "testcase3": _TC3,
    "testcase1-small": _small(_TC1),
    "testcase2-small": _small(_TC2),
    "testcase3-small": _small(_TC3),
}


def preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"preset: unknown preset {name!r} (choose from {sorted(PRESETS)})") from None


@dataclass(frozen=True)
class TestCaseConfig:
    """Validated configuration; ``data`` is the full JSON-compatible dict."""

    data: dict

    __test__ = False  # not a pytest class

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def scenario(self, label: str) -> "TestCaseConfig":
        """Configuration with one scenario's overrides applied."""
        for sc in self.data["scenarios"]:
            if sc["label"] == label:
                over = {k: v for k, v in sc.items() if k != "label"}
                merged = deep_merge(self.data, over)
                merged["scenarios"] = [sc]
                return TestCaseConfig(merged)
        raise ConfigError(f"scenarios: no scenario labelled {label!r}")

    @property
    def labels(self) -> list:
        return [sc["label"] for sc in self.data["scenarios"]]

    @property
    def nx(self) -> int:
        return int(round(self.data["geometry"]["domain"][0] / self.data["geometry"]["h"]))

    @property
    def ny(self) -> int:
        return int(round(self.data["geometry"]["domain"][1] / self.data["geometry"]["h"]))

    @property
    def dt_filter(self) -> float:
        t = self.data["time"]
        return t["T"] / t["n_filter"]

    @property
    def dt_ref(self) -> float:
        t = self.data["time"]
        return t["T"] / t["n_fine"]

    @property
    def model_noise_std(self) -> float:
        return self.data["noise"]["model_noise_c"] * self.dt_filter ** 0.5


def _require(cond: bool, field: str, msg: str):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _validate(d: dict) -> None:
    g = d["geometry"]
    _require(len(g["domain"]) == 2 and all(v > 0 for v in g["domain"]), "geometry.domain",
             "needs two positive extents")
    _require(g["h"] > 0, "geometry.h", "must be positive")
    for i, L in enumerate(g["domain"]):
        n = L / g["h"]
        _require(abs(n - round(n)) < 1e-9, "geometry.h", f"must divide domain extent {L}")
    _require(g["cell_kind"] in ("triangle", "rectangle"), "geometry.cell_kind",
             "must be 'triangle' or 'rectangle'")
    _require(g["fracture"]["width"] > 0, "geometry.fracture.width", "must be positive")
    t = d["time"]
    _require(t["T"] > 0, "time.T", "must be positive")
    _require(int(t["n_filter"]) >= 1 and int(t["n_fine"]) >= 1, "time", "step counts must be positive")
    _require(t["n_fine"] % t["n_filter"] == 0, "time.n_filter",
             f"n_filter={t['n_filter']} does not divide n_fine={t['n_fine']}")
    m = d["model"]
    _require(m["variant"] in ("continuous_pressure", "general_interface", "advection_diffusion"),
             "model.variant", f"unknown variant {m['variant']!r}")
    k = len(m["true_params"])
    _require(len(m["initial_guess"]) == k and len(m["param_names"]) == k, "model.initial_guess",
             "length must match model.true_params")
    _require(all(v > 0 for v in m["true_params"]), "model.true_params", "must be positive")
    _require(m["parameterization"] in ("direct", "reciprocal"), "model.parameterization",
             "must be 'direct' or 'reciprocal'")
    _require(m["variant"] != "general_interface" or m["xi"] > 0.5, "model.xi", "must exceed 1/2")
    _require((m["variant"] == "advection_diffusion") == (d["darcy"] is not None), "darcy",
             "required exactly for the advection_diffusion variant")
    if d["darcy"] is not None:
        _require(d["darcy"]["perturbation"] >= 0, "darcy.perturbation", "must be non-negative")
    o = d["observation"]
    _require(o["obs_noise_std"] >= 0, "observation.obs_noise_std", "must be non-negative")
    _require(d["noise"]["model_noise_c"] >= 0, "noise.model_noise_c", "must be non-negative")
    f = d["filters"]
    for key in ("J", "M", "R", "n_steps", "N_e"):
        _require(isinstance(f[key], int) and f[key] >= 1, f"filters.{key}", "must be a positive integer")
    _require(f["J"] >= 2, "filters.J", "must be at least 2")
    for key in ("bounds", "aug_bounds"):
        b = f[key]
        _require(b is not None and len(b) == k and all(lo < hi for lo, hi in b),
                 f"filters.{key}", "needs one [lo, hi] pair per parameter with lo < hi")
    labels = [sc.get("label") for sc in d["scenarios"]]
    _require(len(labels) >= 1 and all(isinstance(x, str) and x for x in labels), "scenarios",
             "each scenario needs a non-empty label")
    _require(len(set(labels)) == len(labels), "scenarios", "labels must be unique")
    _require(isinstance(d["seed"], int) and d["seed"] >= 0, "seed", "must be a non-negative integer")


def load_config(source: Any = None, preset_name: Optional[str] = None,
                overrides: Optional[dict] = None) -> TestCaseConfig:
    """Build a validated configuration.

    ``source`` is a JSON path, a dict, or ``None``. A preset (or the preset
    named in the file's ``"preset"`` key) provides the base, the file's
    contents are merged over it, then ``overrides``.
    """
    data: dict = {}
    if isinstance(source, (str, Path)):
        try:
            data = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: JSON parse error: {exc}") from exc
    elif isinstance(source, dict):
        data = copy.deepcopy(source)
    elif source is not None:
        raise ConfigError(f"<source>: unsupported config source {type(source).__name__}")
    name = preset_name or data.pop("preset", None)
    data.pop("preset", None)
    base = preset(name) if name else copy.deepcopy(DEFAULTS)
    merged = deep_merge(base, data)
    if overrides:
        merged = deep_merge(merged, overrides)
    unknown = set(merged) - set(DEFAULTS)
    _require(not unknown, sorted(unknown)[0] if unknown else "", "unknown top-level field")
    try:
        _validate(merged)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{exc}: missing or malformed field") from exc
    return TestCaseConfig(merged)
