"""Strict TOML experiment configuration.

A config file has a top-level ``seed`` and the sections ``plant``,
``controller``, ``trajectory``, ``ilc``, ``gp``, ``positions``,
``evaluation`` and ``output``.  Every key is optional except
``plant.kind``; unknown keys are rejected before any computation starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, GpffError, NumericalError, StabilityError
from .framework import METHODS, ExperimentPlan
from .gp import GpFitConfig
from .ilcbf import IlcWeights
from .plant import (
    DEFAULT_BANDWIDTH_HZ,
    DEFAULT_DAMPING_RATIO,
    DERIVATIVE_FILTER_RATIO,
    MassDamperPlant,
    PeriodicFluxPlant,
    SpatialMassPlant,
    default_controller,
)
from .trajectory import polynomial_reference

PLANTS = {
    "spatial_mass": (SpatialMassPlant, {"m_bar": 1.0, "damping": 0.0}),
    "mass_damper": (MassDamperPlant, {"mass": 1.0, "damping": 0.0}),
    "periodic_flux": (
        PeriodicFluxPlant,
        {
            "mass_1": 1.0,
            "damping_1": 2.0,
            "mass_2": 0.5,
            "damping_2": 1.0,
            "pitch": 0.25,
            "flux_amplitude": 0.15,
            "mass_2_slope": [0.03, 0.05],
            "friction_2": 0.05,
        },
    ),
}
PLANT_COMMON = {"kind": None, "sample_time": 1e-3, "noise_std": 0.0, "lower": None, "upper": None}

DEFAULTS = {
    "seed": 0,
    "controller": {
        "bandwidth_hz": DEFAULT_BANDWIDTH_HZ,
        "damping_ratio": DEFAULT_DAMPING_RATIO,
        "filter_ratio": DERIVATIVE_FILTER_RATIO,
    },
    "trajectory": {"order": 3, "distance": 0.01, "duration": 0.5, "pre_rest": 0.0, "post_rest": 0.5},
    "ilc": {
        "basis": ["acc"],
        "trials": 20,
        "trailing_window": None,
        "w_e": 1.0,
        "w_f": 1e-8,
        "w_df": 0.0,
        "nominal": "center",
        "theta0": None,
    },
    "gp": {
        "mean": "zero",
        "restarts": 8,
        "seed": 0,
        "max_iter": 500,
        "gtol": 1e-7,
        "lengthscale_bounds": [0.01, 0.5],
        "signal_bounds": [1e-4, 1e4],
        "noise_bounds": [1e-12, 10.0],
    },
    "positions": {
        "training": None,
        "training_grid": None,
        "test": None,
        "center": None,
        "grid_points": 101,
    },
    "evaluation": {"methods": list(METHODS), "noise": True},
    "output": {"dir": "out", "verbosity": 1, "n_jobs": 1},
}


def _merge_strict(defaults, given, where):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key '{where}{key}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a table")
            out[key] = _merge_strict(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _plant_section(given):
    kind = given.get("kind")
    if kind not in PLANTS:
        raise ConfigError(f"plant.kind must be one of {sorted(PLANTS)}, got {kind!r}")
    return _merge_strict({**PLANT_COMMON, **PLANTS[kind][1]}, given, "plant.")


def normalize(raw: dict) -> dict:
    """Fill defaults and reject unknown keys."""
    if "plant" not in raw or not isinstance(raw["plant"], dict):
        raise ConfigError("missing [plant] section")
    rest = {k: v for k, v in raw.items() if k != "plant"}
    cfg = _merge_strict(DEFAULTS, rest, "")
    cfg["plant"] = _plant_section(raw["plant"])
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return normalize(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def content_hash(*parts) -> str:
    """Stable hash of JSON-serializable content."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- building the plan ------------------------------------------------------------


def build_plant(section):
    s = dict(section)
    cls, _ = PLANTS[s.pop("kind")]
    for key in ("lower", "upper"):
        if s[key] is None:
            s.pop(key)
    if "mass_2_slope" in s:
        s["mass_2_slope"] = tuple(s["mass_2_slope"])
    try:
        return cls(**s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"plant: {exc}") from None


def _grid(ranges, dim):
    if len(ranges) != dim or any(len(a) != 3 for a in ranges):
        raise ConfigError(f"positions.training_grid needs {dim} entries of [lower, upper, count]")
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in ranges]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _as_positions(value, dim, name):
    try:
        p = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of positions") from None
    if p.ndim == 1:
        p = p[:, None] if dim == 1 else p[None, :]
    if p.ndim != 2 or p.shape[1] != dim:
        raise ConfigError(f"{name} entries must have {dim} components")
    return p


def default_positions(plant):
    """Training and test positions used when the config does not set them."""
    lo, hi = plant.lower, plant.upper
    if plant.dim == 1:
        unit_train = np.array([[0.05], [0.35], [0.65], [0.95]])
        unit_test = np.array([[0.1], [0.2], [0.25], [0.75], [0.8], [0.9]])
    else:
        g = np.linspace(0.0, 1.0, 5)
        unit_train = np.stack([m.ravel() for m in np.meshgrid(*[g] * plant.dim, indexing="ij")], 1)
        unit_test = np.array([[0.3] * plant.dim, [0.6] * plant.dim, [0.15] + [0.85] * (plant.dim - 1)])
    return lo + unit_train * (hi - lo), lo + unit_test * (hi - lo)


def parse_position(text, dim):
    try:
        p = np.array([float(v) for v in str(text).split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse position {text!r}; use comma-separated numbers") from None
    if p.size != dim:
        raise ConfigError(f"position {text!r} must have {dim} components")
    return p


@dataclass
class RunConfig:
    """Parsed experiment plus the CLI-level settings."""

    cfg: dict
    plan: ExperimentPlan
    out_dir: Path
    methods: tuple
    verbosity: int = 1
    force_from: str | None = None
    theta0: np.ndarray | None = field(default=None, repr=False)
    grid_points: int = 101

    @property
    def plant(self):
        return self.plan.plant


def build_run_config(cfg: dict, out_dir=None, seed=None, methods=None, force_from=None) -> RunConfig:
    """Turn a normalized config into a :class:`RunConfig`.

    Invalid values (positions outside the domain, bad weights, unknown basis
    descriptors) surface as :class:`ConfigError`.
    """
    try:
        return _build(cfg, out_dir, seed, methods, force_from)
    except (NumericalError, StabilityError):
        raise
    except GpffError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def _build(cfg, out_dir, seed, methods, force_from):
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    if methods is not None:
        cfg["evaluation"]["methods"] = list(methods)
    if out_dir is not None:
        cfg["output"]["dir"] = str(out_dir)
    bad = set(cfg["evaluation"]["methods"]) - set(METHODS)
    if bad or not cfg["evaluation"]["methods"]:
        raise ConfigError(f"evaluation.methods must be a non-empty subset of {list(METHODS)}, got {sorted(bad)}")

    plant = build_plant(cfg["plant"])
    t = cfg["trajectory"]
    dist = np.broadcast_to(np.asarray(t["distance"], dtype=float), (plant.n_axes,))
    reference = polynomial_reference(
        np.zeros(plant.n_axes), dist, t["duration"], plant.sample_time, t["order"], t["pre_rest"], t["post_rest"]
    )

    pos = cfg["positions"]
    train_default, test_default = default_positions(plant)
    if pos["training"] is not None and pos["training_grid"] is not None:
        raise ConfigError("set either positions.training or positions.training_grid, not both")
    if pos["training_grid"] is not None:
        train = _grid(pos["training_grid"], plant.dim)
    elif pos["training"] is not None:
        train = _as_positions(pos["training"], plant.dim, "positions.training")
    else:
        train = train_default
    test = test_default if pos["test"] is None else _as_positions(pos["test"], plant.dim, "positions.test")
    center = None if pos["center"] is None else _as_positions(pos["center"], plant.dim, "positions.center")[0]

    ilc = cfg["ilc"]
    nominal, exact = ilc["nominal"], False
    if nominal == "exact":
        exact, nominal_pos = True, None
    elif nominal == "center":
        nominal_pos = None
    else:
        nominal_pos = _as_positions(nominal, plant.dim, "ilc.nominal")[0]

    c = cfg["controller"]
    # gains are tuned to the nominal model even when learning uses the exact one
    tuned_at = nominal_pos if nominal_pos is not None else (center if center is not None else plant.center)
    nominal_masses = plant.effective_masses(tuned_at)
    controllers = tuple(
        default_controller(m, plant.sample_time, c["bandwidth_hz"], c["damping_ratio"], c["filter_ratio"])
        for m in nominal_masses
    )
    g = cfg["gp"]
    gp_cfg = GpFitConfig(
        restarts=int(g["restarts"]),
        seed=int(g["seed"]),
        max_iter=int(g["max_iter"]),
        gtol=float(g["gtol"]),
        mean=g["mean"],
        lengthscale_bounds=tuple(g["lengthscale_bounds"]),
        signal_bounds=tuple(g["signal_bounds"]),
        noise_bounds=tuple(g["noise_bounds"]),
    )
    if gp_cfg.mean not in ("zero", "empirical"):
        raise ConfigError(f"gp.mean must be 'zero' or 'empirical', got {gp_cfg.mean!r}")
    plan = ExperimentPlan(
        plant=plant,
        reference=reference,
        basis=list(ilc["basis"]),
        training_positions=train,
        test_positions=test,
        controllers=controllers,
        weights=IlcWeights(ilc["w_e"], ilc["w_f"], ilc["w_df"]),
        trials=int(ilc["trials"]),
        trailing_window=ilc["trailing_window"],
        gp=gp_cfg,
        seed=int(cfg["seed"]),
        center=center,
        nominal_position=nominal_pos,
        exact_model=exact,
        eval_noise=bool(cfg["evaluation"]["noise"]),
        n_jobs=int(cfg["output"]["n_jobs"]),
    )
    theta0 = None if ilc["theta0"] is None else np.asarray(ilc["theta0"], dtype=float)
    if theta0 is not None and theta0.shape != (plan.basis_matrix.n_theta,):
        raise ConfigError(f"ilc.theta0 must have {plan.basis_matrix.n_theta} entries")
    return RunConfig(
        cfg,
        plan,
        Path(cfg["output"]["dir"]),
        tuple(cfg["evaluation"]["methods"]),
        int(cfg["output"]["verbosity"]),
        force_from,
        theta0,
        int(pos["grid_points"]),
    )
