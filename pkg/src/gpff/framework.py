"""End-to-end pipeline: learn at training positions, regress, predict, compare.

Seeds are composed from the master seed so that every random stream is
independent and reproducible:

* training session ``i``: ``(seed, 0, i)``
* center session (method ``center``): ``(seed, 1, 0)``
* local session at test position ``i`` (method ``local_ilc``): ``(seed, 2, i)``
* evaluation trial at test position ``i``: ``(seed, 3, i)``, shared by all methods
* GP fit of parameter ``k``: ``GpFitConfig.seed + k``
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import GpffError
from .gp import GpFitConfig, GpModel, TrainingSet, fit_hyperparameters, posterior
from .ilcbf import IlcSession, IlcUpdateLaw, IlcWeights, nominal_law
from .plant import FeedbackController, SpatialPlant, default_controller, simulate_closed_loop
from .trajectory import BasisMatrix, Reference, build_basis

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("center", "gp", "local_ilc")
DEFAULT_TRAILING_FRACTION = 0.4


def _positions(p, dim):
    p = np.array(p, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1, 1)
    elif p.ndim == 1:
        p = p[:, None] if dim == 1 else p[None, :]
    if p.shape[1] != dim:
        raise GpffError(f"positions must have {dim} components, got shape {p.shape}")
    return p


@dataclass
class ExperimentPlan:
    """Everything needed to run and evaluate the position-dependent pipeline.

    Parameters
    ----------
    plant : SpatialPlant
    reference : Reference
    basis : sequence of str or BasisFunction
        Basis descriptors, e.g. ``["acc"]`` or ``["vel:0", "acc:0", "coulomb:1"]``.
    training_positions, test_positions : array_like, shape (l, D)
    controllers : sequence of FeedbackController, optional
        One per axis.  Default: :func:`default_controller` tuned to the
        plant's effective mass at the nominal position.
    nominal_position : array_like, optional
        Position at which the plant is evaluated to form the nominal model
        G0.  ``None`` selects the center.
    exact_model : bool
        Use the true plant at each session's own position as G0 instead.
    trials : int
        ILC updates per session (each session records ``trials + 1`` trials).
    trailing_window : int, optional
        Number of final trials averaged into a GP observation.  Default: 40%
        of ``trials``, at least 1.
    eval_noise : bool
        Whether the evaluation trial uses the plant's measurement noise.
    """

    plant: SpatialPlant
    reference: Reference
    basis: Sequence
    training_positions: np.ndarray
    test_positions: np.ndarray
    controllers: tuple | None = None
    weights: IlcWeights = field(default_factory=IlcWeights)
    trials: int = 20
    trailing_window: int | None = None
    gp: GpFitConfig = field(default_factory=GpFitConfig)
    seed: int = 0
    center: np.ndarray | None = None
    nominal_position: np.ndarray | None = None
    exact_model: bool = False
    eval_noise: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        d = self.plant.dim
        self.training_positions = _positions(self.training_positions, d)
        self.test_positions = _positions(self.test_positions, d)
        for p in (*self.training_positions, *self.test_positions):
            self.plant.check_position(p)
        if len(self.training_positions) < 2:
            raise GpffError("at least two training positions are required")
        self.center = self.plant.center if self.center is None else self.plant.check_position(self.center)
        if self.nominal_position is None:
            self.nominal_position = self.center
        self.nominal_position = self.plant.check_position(self.nominal_position)
        if self.trials < 1:
            raise GpffError("trials must be at least 1")
        if self.trailing_window is None:
            self.trailing_window = max(1, int(round(DEFAULT_TRAILING_FRACTION * self.trials)))
        if not 1 <= self.trailing_window <= self.trials + 1:
            raise GpffError(f"trailing_window must lie in [1, {self.trials + 1}]")
        if self.reference.n_axes != self.plant.n_axes:
            raise GpffError(f"reference has {self.reference.n_axes} axes, plant has {self.plant.n_axes}")
        if self.controllers is None:
            masses = self.plant.effective_masses(self.nominal_position)
            self.controllers = tuple(default_controller(m, self.plant.sample_time) for m in masses)
        elif isinstance(self.controllers, FeedbackController):
            self.controllers = (self.controllers,) * self.plant.n_axes
        self.controllers = tuple(self.controllers)
        self._basis = build_basis(self.reference, self.basis)
        self._law = None

    @property
    def basis_matrix(self) -> BasisMatrix:
        return self._basis

    @property
    def parameter_names(self):
        return self._basis.labels

    def law(self, rho=None) -> IlcUpdateLaw:
        """Update law from the nominal model (or the exact model at ``rho``)."""
        if self.exact_model:
            if rho is None:
                raise GpffError("the exact-model law needs a position")
            return nominal_law(self.plant(rho), self.controllers, self._basis, self.weights)
        if self._law is None:
            self._law = nominal_law(self.plant(self.nominal_position), self.controllers, self._basis, self.weights)
        return self._law

    def session(self, rho, seed) -> IlcSession:
        """Run one ILC session from theta = 0 at ``rho``."""
        s = IlcSession(self.plant, rho, self.controllers, self.reference, self._basis, self.law(rho), seed=seed)
        return s.run(self.trials)

    def observation(self, session: IlcSession) -> np.ndarray:
        return session.trailing_mean(self.trailing_window)

    def _map(self, fn, items):
        items = list(items)
        if self.n_jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]


# -- stages ---------------------------------------------------------------------


def session_summary(session: IlcSession, observation) -> dict:
    return {
        "position": session.rho.tolist(),
        "observation": [float(v) for v in observation],
        "initial_error_2norm": float(session.error_norms[0]),
        "final_error_2norm": float(session.error_norms[-1]),
        "final_theta": session.history[-1].theta.tolist(),
    }


@dataclass
class TrainingData:
    """Per-parameter training sets, session summaries and (if run here) the sessions."""

    sets: dict
    summaries: list
    sessions: list = field(default_factory=list, repr=False)

    @property
    def observations(self):
        """``(l, n_parameters)`` observations, one row per training position."""
        return np.array([s["observation"] for s in self.summaries])

    def save_csv(self, path):
        """Columns: position components, then one column per parameter."""
        names = list(self.sets)
        dim = len(self.summaries[0]["position"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"rho_{i}" for i in range(dim)] + names)
            for s in self.summaries:
                w.writerow([repr(float(x)) for x in s["position"]] + [repr(float(v)) for v in s["observation"]])

    @staticmethod
    def sets_from_csv(path) -> dict:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
        dim = sum(1 for h in header if h.startswith("rho_"))
        if dim == 0 or len(body) == 0:
            raise GpffError(f"{path}: no positions or rows")
        return {
            name: TrainingSet.create(body[:, :dim], body[:, dim + k], name=name)
            for k, name in enumerate(header[dim:])
        }


def _run_annotated(plan, rho, seed):
    try:
        return plan.session(rho, seed)
    except GpffError as exc:
        raise type(exc)(f"at position {np.asarray(rho).tolist()}: {exc}") from exc


def collect_training_data(plan: ExperimentPlan) -> TrainingData:
    """One ILC session per training position; observation = trailing-window mean."""
    sessions = plan._map(
        lambda ip: _run_annotated(plan, ip[1], (plan.seed, 0, ip[0])), enumerate(plan.training_positions)
    )
    obs = np.array([plan.observation(s) for s in sessions])
    sets = {
        name: TrainingSet.create(plan.training_positions, obs[:, k], name=name)
        for k, name in enumerate(plan.parameter_names)
    }
    return TrainingData(sets, [session_summary(s, o) for s, o in zip(sessions, obs)], sessions)


def fit_models(plan: ExperimentPlan, training: TrainingData | dict) -> dict:
    """Independent GP per parameter; parameter ``k`` uses seed ``gp.seed + k``."""
    sets = training.sets if isinstance(training, TrainingData) else training
    items = list(sets.items())

    def fit(kv):
        k, (name, ts) = kv
        return name, fit_hyperparameters(ts, replace(plan.gp, seed=plan.gp.seed + k))

    return dict(plan._map(fit, enumerate(items)))


def predict_parameters(models: dict, positions) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances, each shaped ``(n_positions, n_parameters)``."""
    models = list(models.values())
    if not models:
        raise GpffError("no models")
    p = _positions(positions, models[0].kernel.dim)
    mean = np.empty((len(p), len(models)))
    var = np.empty_like(mean)
    for k, m in enumerate(models):
        mean[:, k], var[:, k] = posterior(m, p, full_cov=False)
    return mean, var


# -- evaluation -----------------------------------------------------------------


@dataclass
class MethodResult:
    """One (test position, method) cell.  ``error`` is the time series ``(N, n_axes)``."""

    position: np.ndarray
    method: str
    theta: np.ndarray
    error: np.ndarray = field(repr=False)
    error_2norm: float
    max_abs_error: float
    axis_error_2norm: tuple

    def to_dict(self):
        return {
            "position": self.position.tolist(),
            "method": self.method,
            "theta": self.theta.tolist(),
            "error_2norm": self.error_2norm,
            "max_abs_error": self.max_abs_error,
            "axis_error_2norm": list(self.axis_error_2norm),
        }


@dataclass
class EvaluationReport:
    parameter_names: list
    methods: tuple
    cells: list
    training: TrainingData | None = field(default=None, repr=False)
    models: dict | None = field(default=None, repr=False)
    center_theta: np.ndarray | None = None
    seed: int = 0

    def cell(self, position_index, method):
        n = len(self.methods)
        c = self.cells[position_index * n + self.methods.index(method)]
        assert c.method == method
        return c

    @property
    def n_positions(self):
        return len(self.cells) // len(self.methods)

    def table(self, metric="error_2norm"):
        """``(n_positions, n_methods)`` array of a metric."""
        return np.array([getattr(c, metric) for c in self.cells]).reshape(self.n_positions, len(self.methods))

    def to_dict(self):
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "parameters": list(self.parameter_names),
            "methods": list(self.methods),
            "center_theta": None if self.center_theta is None else self.center_theta.tolist(),
            "cells": [c.to_dict() for c in self.cells],
        }
        if self.training is not None:
            d["training"] = self.training.summaries
        if self.models is not None:
            d["models"] = {k: m.to_dict() for k, m in self.models.items()}
        return d

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_summary_csv(self, path):
        dim = len(self.cells[0].position)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"rho_{i}" for i in range(dim)] + ["method", "error_2norm", "max_abs_error"])
            for c in self.cells:
                w.writerow(
                    [repr(float(x)) for x in c.position] + [c.method, repr(c.error_2norm), repr(c.max_abs_error)]
                )

    def save_timeseries_csv(self, path, sample_time):
        """Error time series of every cell, one column per (position, method, axis)."""
        n = self.cells[0].error.shape[0]
        cols, header = [], ["k", "t"]
        for i, c in enumerate(self.cells):
            for a in range(c.error.shape[1]):
                header.append(f"p{i // len(self.methods)}_{c.method}_e{a}")
                cols.append(c.error[:, a])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(n):
                w.writerow([k, repr(k * sample_time)] + [repr(float(col[k])) for col in cols])


def evaluate_theta(plan: ExperimentPlan, rho, theta, seed) -> MethodResult:
    """Single closed-loop trial at ``rho`` with feedforward parameters ``theta``."""
    theta = np.asarray(theta, dtype=float)
    f = plan.basis_matrix.feedforward(theta)
    noise = None if plan.eval_noise else 0.0
    res = simulate_closed_loop(plan.plant, rho, plan.controllers, plan.reference.samples, f, noise, seed)
    e = res.e
    return MethodResult(
        np.asarray(rho, dtype=float),
        "",
        theta,
        e,
        float(np.linalg.norm(e)),
        float(np.max(np.abs(e))),
        tuple(float(v) for v in np.linalg.norm(e, axis=0)),
    )


def center_parameters(plan: ExperimentPlan) -> np.ndarray:
    return plan.observation(_run_annotated(plan, plan.center, (plan.seed, 1, 0)))


def local_parameters(plan: ExperimentPlan, index: int, rho) -> np.ndarray:
    return plan.observation(_run_annotated(plan, rho, (plan.seed, 2, index)))


def evaluate_methods(
    plan: ExperimentPlan,
    models: dict | None = None,
    methods: Sequence[str] = METHODS,
    training: TrainingData | None = None,
    local_thetas: np.ndarray | None = None,
    center_theta: np.ndarray | None = None,
) -> EvaluationReport:
    """Compare the three ways of choosing feedforward parameters.

    ``center`` uses the parameters learned at the center position, ``gp``
    the GP posterior mean and ``local_ilc`` a fresh ILC session from zero at
    the test position itself.  All methods at one test position share the
    evaluation noise realization.  Precomputed ``local_thetas`` (one row per
    test position) and ``center_theta`` skip the corresponding sessions.
    """
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown or not methods:
        raise GpffError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
    if "gp" in methods and models is None:
        raise GpffError("method 'gp' needs fitted models")
    pts = plan.test_positions
    thetas = {}
    if "center" in methods:
        center_theta = center_parameters(plan) if center_theta is None else np.asarray(center_theta, float)
        thetas["center"] = np.repeat(center_theta[None, :], len(pts), 0)
    if "gp" in methods:
        thetas["gp"] = predict_parameters(models, pts)[0]
    if "local_ilc" in methods:
        if local_thetas is None:
            local_thetas = np.array(plan._map(lambda ip: local_parameters(plan, *ip), enumerate(pts)))
        thetas["local_ilc"] = np.asarray(local_thetas, dtype=float)

    def run(cell):
        i, m = cell
        r = evaluate_theta(plan, pts[i], thetas[m][i], (plan.seed, 3, i))
        r.method = m
        return r

    cells = plan._map(run, [(i, m) for i in range(len(pts)) for m in methods])
    return EvaluationReport(list(plan.parameter_names), methods, cells, training, models, center_theta, plan.seed)


def run_pipeline(plan: ExperimentPlan, methods: Sequence[str] = METHODS) -> EvaluationReport:
    training = collect_training_data(plan)
    models = fit_models(plan, training)
    return evaluate_methods(plan, models, methods, training)
