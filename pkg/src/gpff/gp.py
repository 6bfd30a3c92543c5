"""Exact Gaussian process regression of feedforward parameters over position.

The prior mean is a constant ``offset``: zero by default, or the empirical
mean of the observations (``mean="empirical"``).  The covariance is
squared-exponential (ARD)

    k(a, b) = sf2 * exp(-1/2 * sum_d ((a_d - b_d) / l_d)^2)

and Gaussian observation noise of variance ``noise_variance``.
Hyperparameters are fitted by maximizing the log marginal likelihood in
log-space, ``eta = [log sf2, log l_1, ..., log l_D, log noise_variance]``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ConditioningError, GpffError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
JITTER_START = 1e-10
JITTER_MAX = 1e-4
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class SquaredExponential:
    signal_variance: float
    lengthscales: tuple

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not self.signal_variance > 0 or not all(v > 0 for v in ls):
            raise GpffError("kernel hyperparameters must be positive")
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self):
        return len(self.lengthscales)

    def _scaled_sqdist(self, a, b):
        a = _as_points(a, self.dim) / np.asarray(self.lengthscales)
        b = _as_points(b, self.dim) / np.asarray(self.lengthscales)
        d2 = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T
        return np.maximum(d2, 0.0)

    def __call__(self, a, b=None):
        """Gram matrix ``K(a, b)``; ``b`` defaults to ``a``."""
        if b is None:
            a = _as_points(a, self.dim)
            diff = (a[:, None, :] - a[None, :, :]) / np.asarray(self.lengthscales)
            return self.signal_variance * np.exp(-0.5 * (diff**2).sum(-1))
        return self.signal_variance * np.exp(-0.5 * self._scaled_sqdist(a, b))

    def diag(self, a):
        return np.full(len(_as_points(a, self.dim)), self.signal_variance)

    def log_params(self):
        return np.concatenate([[np.log(self.signal_variance)], np.log(self.lengthscales)])

    @classmethod
    def from_log_params(cls, eta):
        return cls(float(np.exp(eta[0])), tuple(np.exp(eta[1:])))


def _as_points(p, dim):
    p = np.asarray(p, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1, 1)
    elif p.ndim == 1:
        p = p.reshape(-1, 1) if dim == 1 else p.reshape(1, -1)
    if p.shape[1] != dim:
        raise GpffError(f"positions have {p.shape[1]} components, kernel expects {dim}")
    return p


def kernel_eval(k: SquaredExponential, rho, rho_prime) -> float:
    a = np.atleast_1d(np.asarray(rho, dtype=float))
    b = np.atleast_1d(np.asarray(rho_prime, dtype=float))
    if a.shape != b.shape or a.size != k.dim:
        raise GpffError("position dimensions do not match the kernel")
    z = (a - b) / np.asarray(k.lengthscales)
    return float(k.signal_variance * np.exp(-0.5 * z @ z))


# -- training data ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSet:
    """Positions ``P`` (l x D) and scalar observations of one parameter.

    Use :meth:`create` to merge duplicated positions by averaging.
    """

    positions: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    name: str = "theta"
    counts: tuple = ()

    def __post_init__(self):
        p = np.array(self.positions, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        v = np.array(self.values, dtype=float).ravel()
        if p.shape[0] < 1 or p.shape[0] != v.shape[0]:
            raise GpffError("training set needs matching positions and values (l >= 1)")
        p.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "values", v)
        if not self.counts:
            object.__setattr__(self, "counts", (1,) * len(v))

    @classmethod
    def create(cls, positions, values, name="theta", tol=1e-9):
        p = np.array(positions, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        v = np.asarray(values, dtype=float).ravel()
        keep_p, keep_v, counts = [], [], []
        for pi, vi in zip(p, v):
            for idx, q in enumerate(keep_p):
                if np.all(np.abs(q - pi) <= tol):
                    keep_v[idx].append(vi)
                    break
            else:
                keep_p.append(pi)
                keep_v.append([vi])
        counts = tuple(len(g) for g in keep_v)
        if max(counts) > 1:
            logger.info("%s: merged %d duplicate positions", name, len(v) - len(counts))
        return cls(np.array(keep_p), np.array([np.mean(g) for g in keep_v]), name, counts)

    @property
    def n(self):
        return self.values.size

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def offset(self):
        return float(self.values.mean())

    @property
    def centered(self):
        return self.values - self.offset

    def diameter(self):
        span = self.positions.max(0) - self.positions.min(0)
        return float(np.linalg.norm(span))


# -- factorization ----------------------------------------------------------------


def _factorize(ky):
    """Cholesky factor of ``ky`` with jitter escalation; returns (L, jitter)."""
    scale = float(np.mean(np.diag(ky)))
    jitter = 0.0
    while True:
        try:
            chol = np.linalg.cholesky(ky + jitter * np.eye(len(ky)) if jitter else ky)
            return chol, jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * scale * (1 + 1e-9):
                raise ConditioningError(
                    f"K_y not factorizable with jitter up to {JITTER_MAX:g} x mean(diag)",
                    condition_estimate=np.linalg.cond(ky),
                ) from None


@dataclass(frozen=True)
class GpModel:
    """Conditioned GP for one feedforward parameter.  Build with :meth:`condition`."""

    kernel: SquaredExponential
    noise_variance: float
    training: TrainingSet
    offset: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0
    fit_info: dict = field(default_factory=dict, compare=False)

    @classmethod
    def condition(cls, kernel, noise_variance, training: TrainingSet, offset=0.0, fit_info=None):
        if noise_variance < 0:
            raise GpffError("noise variance must be non-negative")
        offset = float(offset)
        ky = kernel(training.positions) + noise_variance * np.eye(training.n)
        chol, jitter = _factorize(ky)
        alpha = scipy.linalg.cho_solve((chol, True), training.values - offset)
        chol.flags.writeable = False
        alpha.flags.writeable = False
        return cls(kernel, float(noise_variance), training, offset, chol, alpha, jitter, dict(fit_info or {}))

    @property
    def name(self):
        return self.training.name

    def posterior(self, test_positions, full_cov=True):
        return posterior(self, test_positions, full_cov)

    # -- persistence ----------------------------------------------------------------

    def to_dict(self):
        t = self.training
        return {
            "schema_version": SCHEMA_VERSION,
            "name": t.name,
            "kernel": "squared_exponential",
            "signal_variance": self.kernel.signal_variance,
            "lengthscales": list(self.kernel.lengthscales),
            "noise_variance": self.noise_variance,
            "offset": self.offset,
            "training": {
                "positions": t.positions.tolist(),
                "values": t.values.tolist(),
                "counts": list(t.counts),
            },
            "fit_info": self.fit_info,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise GpffError(f"unsupported GP model schema_version {d.get('schema_version')!r}")
        tr = d["training"]
        training = TrainingSet(tr["positions"], tr["values"], d["name"], tuple(tr["counts"]))
        kernel = SquaredExponential(d["signal_variance"], tuple(d["lengthscales"]))
        return cls.condition(kernel, d["noise_variance"], training, d["offset"], d.get("fit_info"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def posterior(model: GpModel, test_positions, full_cov=True):
    """Posterior mean and covariance (or variance if ``full_cov=False``)."""
    ps = _as_points(test_positions, model.kernel.dim)
    k_star = model.kernel(model.training.positions, ps)
    mean = k_star.T @ model.alpha + model.offset
    v = scipy.linalg.solve_triangular(model.chol, k_star, lower=True)
    if full_cov:
        cov = model.kernel(ps) - v.T @ v
        cov = 0.5 * (cov + cov.T)
        d = np.diag(cov).copy()
        if np.any(d < 0):
            _report_negative(d, model)
            cov[np.diag_indices_from(cov)] = np.maximum(d, 0.0)
        return mean, cov
    var = model.kernel.diag(ps) - (v**2).sum(0)
    if np.any(var < 0):
        _report_negative(var, model)
        var = np.maximum(var, 0.0)
    return mean, var


def _report_negative(d, model):
    worst = float(d.min())
    level = logging.WARNING if worst < -1e-10 * model.kernel.signal_variance else logging.DEBUG
    logger.log(level, "%s: clamped posterior variance %.3g to zero", model.name, worst)


# -- marginal likelihood --------------------------------------------------------


def log_marginal_likelihood(kernel: SquaredExponential, noise_variance, training: TrainingSet, offset=0.0):
    """Log marginal likelihood of ``values - offset`` and its gradient w.r.t. ``eta``.

    ``eta = [log sf2, log l_1..l_D, log noise_variance]``.  The gradient
    entries are ``1/2 tr((alpha alpha^T - K_y^-1) dK_y/deta)``.
    """
    y = training.values - offset
    p = training.positions
    n = training.n
    kf = kernel(p)
    ky = kf + noise_variance * np.eye(n)
    chol, _ = _factorize(ky)
    alpha = scipy.linalg.cho_solve((chol, True), y)
    value = -0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * LOG_2PI
    kinv = scipy.linalg.cho_solve((chol, True), np.eye(n))
    w = np.outer(alpha, alpha) - kinv
    grad = np.empty(kernel.dim + 2)
    grad[0] = 0.5 * np.sum(w * kf)
    for d, ell in enumerate(kernel.lengthscales):
        diff2 = (p[:, d, None] - p[None, :, d]) ** 2 / ell**2
        grad[1 + d] = 0.5 * np.sum(w * kf * diff2)
    grad[-1] = 0.5 * noise_variance * np.trace(w)
    return float(value), grad


# -- hyperparameter fitting -----------------------------------------------------


@dataclass(frozen=True)
class GpFitConfig:
    """Multi-start bounded maximization settings (log-space)."""

    restarts: int = 8
    seed: int = 0
    max_iter: int = 500
    gtol: float = 1e-7
    mean: str = "zero"  # or "empirical"
    lengthscale_start: tuple = (0.05, 2.0)  # x training-domain diameter
    signal_start: tuple = (0.1, 10.0)  # x observation second moment about the offset
    noise_start: tuple = (1e-6, 1.0)  # x observation second moment about the offset
    # Upper cap of half the training span: with a handful of points the ML
    # lengthscale otherwise drifts to overly smooth, overconfident fits.
    lengthscale_bounds: tuple = (0.01, 0.5)
    signal_bounds: tuple = (1e-4, 1e4)
    noise_bounds: tuple = (1e-12, 10.0)


def _offset(cfg, training):
    if cfg.mean == "zero":
        return 0.0
    if cfg.mean == "empirical":
        return training.offset
    raise GpffError(f"unknown mean handling {cfg.mean!r}")


def _scales(training, offset):
    var = float(np.mean((training.values - offset) ** 2))
    if not var > 0:
        var = 1e-12 * max(training.offset**2, 1.0)
    span = training.positions.max(0) - training.positions.min(0)
    diam = training.diameter()
    span = np.where(span > 0, span, diam if diam > 0 else 1.0)
    return var, span


def _bounds(cfg, training, offset):
    var, span = _scales(training, offset)
    lo = np.concatenate(
        [[np.log(cfg.signal_bounds[0] * var)], np.log(cfg.lengthscale_bounds[0] * span), [np.log(cfg.noise_bounds[0] * var)]]
    )
    hi = np.concatenate(
        [[np.log(cfg.signal_bounds[1] * var)], np.log(cfg.lengthscale_bounds[1] * span), [np.log(cfg.noise_bounds[1] * var)]]
    )
    return lo, hi


def _objective(eta, training, offset):
    kernel = SquaredExponential.from_log_params(eta[:-1])
    return log_marginal_likelihood(kernel, float(np.exp(eta[-1])), training, offset)


def _ascend(eta, training, offset, lo, hi, cfg):
    """Bounded quasi-Newton ascent (L-BFGS-B) on the analytic gradient."""

    def neg(x):
        try:
            f, g = _objective(x, training, offset)
        except ConditioningError:
            return np.inf, np.zeros_like(x)
        return -f, -g

    res = scipy.optimize.minimize(
        neg,
        np.clip(eta, lo, hi),
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={"maxiter": cfg.max_iter, "gtol": cfg.gtol, "ftol": 1e-15},
    )
    if not np.isfinite(res.fun):
        raise ConditioningError(f"{training.name}: K_y not factorizable at the start point")
    eta = res.x
    f, g = _objective(eta, training, offset)
    # projected gradient: drop components pushing against an active bound
    pg = g.copy()
    pg[(eta <= lo) & (pg < 0)] = 0.0
    pg[(eta >= hi) & (pg > 0)] = 0.0
    ok = bool(np.max(np.abs(pg)) <= cfg.gtol * max(1.0, abs(f)) or res.success)
    return eta, f, pg, int(res.nit), ok


def fit_hyperparameters(training: TrainingSet, config: GpFitConfig | None = None) -> GpModel:
    """Maximize the log marginal likelihood over ``config.restarts`` starts.

    Starting points are drawn log-uniformly from the configured ranges
    (relative to the training-domain size and the observation variance).
    The returned model's ``fit_info`` holds the objective value, the final
    projected-gradient norm and whether ``gtol`` was met.
    """
    cfg = config or GpFitConfig()
    offset = _offset(cfg, training)
    var, span = _scales(training, offset)
    if training.n < 2:
        warnings.warn(f"{training.name}: a single training point; using prior-like hyperparameters")
        scale = max(training.values[0] ** 2, 1.0)
        kernel = SquaredExponential(scale, (1.0,) * training.dim)
        info = {"log_marginal_likelihood": None, "converged": False, "seed": cfg.seed, "restarts": 0, "mean": cfg.mean}
        return GpModel.condition(kernel, 1e-6 * scale, training, offset, fit_info=info)

    lo, hi = _bounds(cfg, training, offset)
    rng = np.random.default_rng(cfg.seed)
    best = None
    failures = 0
    for start in range(cfg.restarts):
        u = rng.uniform(size=training.dim + 2)

        def logu(lim, ui, base):
            return np.log(lim[0] * base) + ui * (np.log(lim[1] * base) - np.log(lim[0] * base))

        eta0 = np.concatenate(
            [
                [logu(cfg.signal_start, u[0], var)],
                [logu(cfg.lengthscale_start, u[1 + d], np.linalg.norm(span)) for d in range(training.dim)],
                [logu(cfg.noise_start, u[-1], var)],
            ]
        )
        try:
            eta, f, pg, iters, ok = _ascend(eta0, training, offset, lo, hi, cfg)
        except ConditioningError:
            failures += 1
            continue
        if best is None or f > best[1]:
            best = (eta, f, pg, iters, ok, start)
    if best is None:
        raise ConditioningError(f"{training.name}: every restart failed to factorize K_y")
    eta, f, pg, iters, ok, start = best
    if not ok:
        logger.warning("%s: hyperparameter fit hit the iteration cap (|grad|=%.3g)", training.name, np.linalg.norm(pg))
    kernel = SquaredExponential.from_log_params(eta[:-1])
    noise = max(float(np.exp(eta[-1])), cfg.noise_bounds[0] * var)
    info = {
        "log_marginal_likelihood": f,
        "gradient_norm": float(np.linalg.norm(pg)),
        "converged": ok,
        "iterations": iters,
        "best_start": start,
        "failed_starts": failures,
        "seed": cfg.seed,
        "restarts": cfg.restarts,
        "mean": cfg.mean,
    }
    return GpModel.condition(kernel, noise, training, offset, fit_info=info)


def sample_observations(kernel, positions, true_noise_variance, seed, mean=0.0):
    """Draw ``f(P) + eps`` from the GP prior with ``eps ~ N(0, true_noise_variance)``."""
    p = _as_points(positions, kernel.dim)
    rng = np.random.default_rng(seed)
    k = kernel(p)
    chol, _ = _factorize(k + 1e-10 * kernel.signal_variance * np.eye(len(p)))
    f = chol @ rng.standard_normal(len(p))
    return mean + f + np.sqrt(true_noise_variance) * rng.standard_normal(len(p))


def save_grid_csv(path, positions, mean, variance):
    p = np.asarray(positions, dtype=float)
    p = p[:, None] if p.ndim == 1 else p
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"rho_{i}" for i in range(p.shape[1])] + ["mean", "variance"])
        for row, m, v in zip(p, mean, variance):
            w.writerow([repr(float(x)) for x in row] + [repr(float(m)), repr(float(v))])


def with_training(model: GpModel, training: TrainingSet) -> GpModel:
    """Same hyperparameters and mean handling, new data."""
    offset = training.offset if model.fit_info.get("mean") == "empirical" else model.offset
    return GpModel.condition(model.kernel, model.noise_variance, training, offset, model.fit_info)
