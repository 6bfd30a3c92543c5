"""Norm-optimal iterative learning control with basis functions (ILCBF).

Each trial ``j`` applies the feedforward ``f_j = Psi r theta_j`` and measures
the error ``e_j``.  The next parameters minimize

    V(theta_{j+1}) = |e_{j+1}|_We^2 + |f_{j+1}|_Wf^2 + |f_{j+1} - f_j|_Wdf^2

with the predicted error ``e_{j+1} = e_j - J Psi (theta_{j+1} - theta_j)``,
where ``J`` is the lifted process path ``S G0`` of the nominal model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import GpffError, SingularUpdateError
from .plant import (
    DiscreteTransferFunction,
    FeedbackController,
    LiftedOperator,
    SpatialPlant,
    _as_controllers,
    lift,
    process_sensitivity,
    simulate_closed_loop,
)
from .trajectory import BasisMatrix, Reference

SCHEMA_VERSION = 1


def _check_weight(w, name, n, definite):
    if np.ndim(w) == 0:
        w = float(w)
        if definite and not w > 0:
            raise GpffError(f"{name} must be positive definite")
        if not definite and w < 0:
            raise GpffError(f"{name} must be positive semidefinite")
        return w
    w = np.asarray(w, dtype=float)
    if n is not None and w.shape != (n, n):
        raise GpffError(f"{name} must be {n}x{n}, got {w.shape}")
    if not np.allclose(w, w.T, rtol=1e-12, atol=1e-14 * np.abs(w).max()):
        raise GpffError(f"{name} must be symmetric")
    if definite:
        try:
            np.linalg.cholesky(w)
        except np.linalg.LinAlgError:
            raise GpffError(f"{name} must be positive definite") from None
    else:
        lam = np.linalg.eigvalsh(w)
        if lam.min() < -1e-10 * max(1.0, lam.max()):
            raise GpffError(f"{name} must be positive semidefinite")
    return w


@dataclass(frozen=True)
class IlcWeights:
    """Weights of the ILC criterion: scalars (times identity) or full matrices."""

    w_e: float | np.ndarray = 1.0
    w_f: float | np.ndarray = 1e-8
    w_df: float | np.ndarray = 0.0

    def validated(self, n=None):
        return IlcWeights(
            _check_weight(self.w_e, "W_e", n, True),
            _check_weight(self.w_f, "W_f", n, False),
            _check_weight(self.w_df, "W_df", n, False),
        )


def _apply(w, x):
    return w * x if np.ndim(w) == 0 else w @ x


def _wnorm2(w, x):
    return float(x @ _apply(w, x))


def _stack(signal):
    """(N, n_axes) or (N,) signal -> axis-major stacked vector."""
    s = np.asarray(signal, dtype=float)
    return s.reshape(s.shape[0], -1).T.ravel()


def lifted_process(models: Sequence[DiscreteTransferFunction], ctrls, n) -> np.ndarray:
    """Block-diagonal lifted ``S G0`` for decoupled axes, size ``(N n_axes)^2``."""
    ctrls = _as_controllers(ctrls, len(models))
    blocks = [lift(process_sensitivity(g, c), n).matrix for g, c in zip(models, ctrls)]
    return scipy.linalg.block_diag(*blocks)


@dataclass(frozen=True)
class IlcUpdateLaw:
    """``theta_{j+1} = L e_j + Q theta_j`` with cached Cholesky factor of ``R``."""

    L: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    process_basis: np.ndarray = field(repr=False)  # J Psi
    basis: np.ndarray = field(repr=False)
    weights: IlcWeights
    basis_condition: float

    @property
    def n_theta(self):
        return self.Q.shape[0]

    def update(self, e, theta):
        return update_parameters(self, e, theta)

    def predicted_error(self, e_j, theta_j, theta_next):
        """Stacked error predicted for ``theta_next``; ``e_j`` may be ``(N, n_axes)``."""
        e_j = _stack(e_j) if np.ndim(e_j) > 1 else np.asarray(e_j, float)
        return e_j - self.process_basis @ (np.asarray(theta_next) - np.asarray(theta_j))

    def criterion(self, e_j, theta_j, theta_next):
        """Criterion value of ``theta_next`` predicted with the nominal model."""
        e_next = self.predicted_error(e_j, theta_j, theta_next)
        f_next = self.basis @ np.asarray(theta_next, float)
        df = self.basis @ (np.asarray(theta_next, float) - np.asarray(theta_j, float))
        w = self.weights
        return _wnorm2(w.w_e, e_next) + _wnorm2(w.w_f, f_next) + _wnorm2(w.w_df, df)


def build_update_law(psi, process, weights: IlcWeights | None = None) -> IlcUpdateLaw:
    """Analytic minimizer of the ILC criterion.

    Parameters
    ----------
    psi : BasisMatrix or ndarray, shape (M, n_theta)
    process : LiftedOperator, ndarray (M, M) or sequence of LiftedOperator
        Lifted process path ``S G0``; a sequence is assembled block-diagonally
        (one block per axis).
    weights : IlcWeights

    Raises
    ------
    SingularUpdateError
        If ``R`` is numerically singular.
    """
    psi = psi.matrix if isinstance(psi, BasisMatrix) else np.asarray(psi, dtype=float)
    if isinstance(process, LiftedOperator):
        jmat = process.matrix
    elif isinstance(process, np.ndarray):
        jmat = process
    else:
        jmat = scipy.linalg.block_diag(*[p.matrix for p in process])
    m = psi.shape[0]
    if jmat.shape != (m, m):
        raise GpffError(f"process path is {jmat.shape}, basis has {m} rows")
    w = (weights or IlcWeights()).validated(m)
    jpsi = jmat @ psi
    we_jpsi = _apply(w.w_e, jpsi)
    h_e = jpsi.T @ we_jpsi
    h_df = psi.T @ _apply(w.w_df, psi)
    r = h_e + psi.T @ _apply(w.w_f, psi) + h_df
    r = 0.5 * (r + r.T)
    sv = np.linalg.svd(psi, compute_uv=False)
    basis_cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    cond_r = np.linalg.cond(r)
    try:
        if not np.isfinite(cond_r) or cond_r > 1e14:
            raise np.linalg.LinAlgError
        factor = scipy.linalg.cho_factor(r, lower=True)
    except np.linalg.LinAlgError:
        raise SingularUpdateError(
            f"R is singular (cond={cond_r:.3g}, basis cond={basis_cond:.3g}); "
            "check the basis for linear dependence or increase w_f to regularize"
        ) from None
    L = scipy.linalg.cho_solve(factor, we_jpsi.T)
    Q = scipy.linalg.cho_solve(factor, h_e + h_df)
    for a in (L, Q, r, jpsi):
        a.flags.writeable = False
    return IlcUpdateLaw(L, Q, r, jpsi, psi, w, basis_cond)


def update_parameters(law: IlcUpdateLaw, e_j, theta_j) -> np.ndarray:
    e_j = np.asarray(e_j, dtype=float)
    if e_j.ndim > 1:
        e_j = e_j.T.ravel()
    theta_j = np.asarray(theta_j, dtype=float)
    if e_j.shape != (law.L.shape[1],) or theta_j.shape != (law.n_theta,):
        raise GpffError(
            f"dimension mismatch: e {e_j.shape} vs {law.L.shape[1]}, theta {theta_j.shape} vs {law.n_theta}"
        )
    return law.L @ e_j + law.Q @ theta_j


@dataclass
class TrialRecord:
    j: int
    theta: np.ndarray
    f: np.ndarray = field(repr=False)
    e: np.ndarray = field(repr=False)
    error_norm: float
    criterion: float
    theta_change: float


class IlcSession:
    """Trial-indexed learning state for one fixed position.

    The update law is built once from the nominal model and reused for every
    trial.  Trial ``j`` uses the noise seed ``(*seed, j)``.
    """

    def __init__(
        self,
        plant: SpatialPlant,
        rho,
        ctrl,
        reference: Reference,
        basis: BasisMatrix,
        law: IlcUpdateLaw,
        theta0=None,
        seed=0,
        noise_std=None,
    ):
        self.plant = plant
        self.rho = plant.check_position(rho)
        self.ctrl = ctrl
        self.reference = reference
        self.basis = basis
        self.law = law
        self.seed = seed
        self.noise_std = plant.noise_std if noise_std is None else float(noise_std)
        self.theta0 = np.zeros(basis.n_theta) if theta0 is None else np.asarray(theta0, dtype=float)
        if self.theta0.shape != (basis.n_theta,):
            raise GpffError(f"theta0 must have {basis.n_theta} entries")
        self.history: list[TrialRecord] = []

    @property
    def j(self):
        return len(self.history) - 1

    def _measure(self, theta, j):
        f = self.basis.feedforward(theta)
        seed = (*self.seed, j) if isinstance(self.seed, tuple) else (self.seed, j)
        res = simulate_closed_loop(self.plant, self.rho, self.ctrl, self.reference.samples, f, self.noise_std, seed)
        return f, res.e

    def _record(self, theta, f, e, theta_prev, f_prev):
        w = self.law.weights
        fs, es = _stack(f), _stack(e)
        v = _wnorm2(w.w_e, es) + _wnorm2(w.w_f, fs) + _wnorm2(w.w_df, fs - _stack(f_prev))
        change = float(np.linalg.norm(theta - theta_prev) / max(np.linalg.norm(theta), 1e-300))
        self.history.append(
            TrialRecord(len(self.history), theta, f, e, float(np.linalg.norm(es)), v, change)
        )

    def run(self, trials):
        """Run ``trials`` updates; the history then holds ``trials + 1`` records."""
        if trials < 0:
            raise GpffError("trials must be non-negative")
        if not self.history:
            f, e = self._measure(self.theta0, 0)
            self._record(self.theta0, f, e, self.theta0, f)
        for _ in range(trials):
            last = self.history[-1]
            theta = update_parameters(self.law, _stack(last.e), last.theta)
            f, e = self._measure(theta, len(self.history))
            self._record(theta, f, e, last.theta, last.f)
        return self

    # -- summaries --------------------------------------------------------------

    @property
    def thetas(self):
        return np.array([h.theta for h in self.history])

    @property
    def error_norms(self):
        return np.array([h.error_norm for h in self.history])

    def trailing_mean(self, window):
        """Mean parameters over the last ``window`` records."""
        if window < 1:
            raise GpffError("window must be at least 1")
        return self.thetas[-window:].mean(axis=0)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "position": self.rho.tolist(),
            "seed": list(self.seed) if isinstance(self.seed, tuple) else self.seed,
            "basis": self.basis.labels,
            "trials": [
                {
                    "j": h.j,
                    "error_norm": h.error_norm,
                    "criterion": h.criterion,
                    "theta_change": h.theta_change,
                    "theta": h.theta.tolist(),
                }
                for h in self.history
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "error_norm", "criterion"] + [f"theta_{lbl}" for lbl in self.basis.labels])
            for h in self.history:
                w.writerow([h.j, repr(h.error_norm), repr(h.criterion)] + [repr(float(t)) for t in h.theta])


def nominal_law(models, ctrl, basis: BasisMatrix, weights=None) -> IlcUpdateLaw:
    return build_update_law(basis, lifted_process(models, ctrl, basis.n_samples), weights)


def run_session(
    plant: SpatialPlant,
    rho,
    ctrl: FeedbackController | Sequence[FeedbackController],
    reference: Reference,
    basis: BasisMatrix,
    weights: IlcWeights | None = None,
    trials: int = 20,
    theta0=None,
    seed=0,
    model: Sequence[DiscreteTransferFunction] | None = None,
    law: IlcUpdateLaw | None = None,
    noise_std=None,
) -> IlcSession:
    """Learn feedforward parameters at a fixed position.

    ``model`` is the nominal plant G0 per axis; it defaults to the true plant
    at ``rho`` (exact model).  A prebuilt ``law`` takes precedence over
    ``model`` and ``weights``.
    """
    if trials < 1:
        raise GpffError("trials must be at least 1")
    if law is None:
        law = nominal_law(plant(rho) if model is None else tuple(model), ctrl, basis, weights)
    return IlcSession(plant, rho, ctrl, reference, basis, law, theta0, seed, noise_std).run(trials)
