"""Discrete-time plants, feedback loops and lifted (trial-domain) operators.

All transfer functions are rational in the backward-shift operator q^-1:

    G(q^-1) = (b0 + b1 q^-1 + ... + bm q^-m) / (a0 + a1 q^-1 + ... + an q^-n)

and every simulation starts from zero initial conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg
from numpy.polynomial import Polynomial
import scipy.signal

from .errors import DomainError, EmptyTrialError, GpffError, StabilityError

# Closed-loop bandwidth of the default controller, in Hz.
DEFAULT_BANDWIDTH_HZ = 2.0
DEFAULT_DAMPING_RATIO = 0.7
# Derivative filter pole sits this factor above the bandwidth.
DERIVATIVE_FILTER_RATIO = 10.0


def _trim(coeffs):
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if c.ndim != 1:
        raise ValueError("coefficients must be one-dimensional")
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return (0.0,)
    return tuple(float(v) for v in c[: nz[-1] + 1])


def _polyadd(a, b):
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


@dataclass(frozen=True)
class DiscreteTransferFunction:
    """Rational transfer function in powers of q^-1.

    Parameters
    ----------
    num, den : sequence of float
        Coefficients of increasing powers of q^-1.  ``den[0]`` must be
        nonzero so that the difference equation can be solved for the
        current output.
    sample_time : float
        Sampling time Ts in seconds.
    """

    num: tuple
    den: tuple
    sample_time: float

    def __post_init__(self):
        num = _trim(self.num)
        den = _trim(self.den)
        if den[0] == 0.0:
            raise GpffError("den[0] must be nonzero (causal, well-posed recursion)")
        if not np.isfinite(num).all() or not np.isfinite(den).all():
            raise GpffError("transfer function coefficients must be finite")
        if not self.sample_time > 0:
            raise GpffError(f"sample_time must be positive, got {self.sample_time}")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)
        object.__setattr__(self, "sample_time", float(self.sample_time))

    @classmethod
    def gain(cls, g, sample_time):
        return cls((g,), (1.0,), sample_time)

    @classmethod
    def delay(cls, n, sample_time):
        """Pure delay q^-n."""
        return cls((0.0,) * n + (1.0,), (1.0,), sample_time)

    @property
    def is_zero(self):
        return all(c == 0.0 for c in self.num)

    def _check_ts(self, other):
        if not np.isclose(self.sample_time, other.sample_time, rtol=1e-12, atol=0):
            raise GpffError("sample times differ")

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return DiscreteTransferFunction(np.asarray(self.num) * other, self.den, self.sample_time)
        self._check_ts(other)
        return DiscreteTransferFunction(
            np.convolve(self.num, other.num), np.convolve(self.den, other.den), self.sample_time
        )

    __rmul__ = __mul__

    def __add__(self, other):
        self._check_ts(other)
        num = _polyadd(np.convolve(self.num, other.den), np.convolve(other.num, self.den))
        return DiscreteTransferFunction(num, np.convolve(self.den, other.den), self.sample_time)

    def inverse(self):
        if self.num[0] == 0.0:
            raise GpffError("inverse is not causal: leading numerator coefficient is zero")
        return DiscreteTransferFunction(self.den, self.num, self.sample_time)

    def poles(self):
        """Poles in the z-plane."""
        return np.roots(self.den) if len(self.den) > 1 else np.zeros(0, dtype=complex)

    def is_stable(self):
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def frequency_response(self, omega):
        """Evaluate at z = exp(i*omega*Ts); ``omega`` in rad/s.

        Polynomials are rewritten in powers of ``delta = 1 - z^-1`` and
        evaluated with ``expm1``, which keeps finite-difference factors such
        as ``(1 - z^-1)^2`` accurate at low frequencies.
        """
        delta = -np.expm1(-1j * np.asarray(omega, dtype=float) * self.sample_time)
        shift = Polynomial([1.0, -1.0])

        def at(coeffs):
            return np.polynomial.polynomial.polyval(delta, Polynomial(coeffs)(shift).coef)

        return at(self.num) / at(self.den)

    def impulse_response(self, n):
        x = np.zeros(n)
        if n:
            x[0] = 1.0
        return filter(self, x)


def filter(sys: DiscreteTransferFunction, x) -> np.ndarray:
    """Zero-initial-condition response of ``sys`` to the signal ``x``.

    ``x`` may be 1-D or 2-D; 2-D signals are filtered along axis 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise EmptyTrialError("input signal is empty")
    if sys.is_zero:
        return np.zeros_like(x)
    return scipy.signal.lfilter(sys.num, sys.den, x, axis=0)


@dataclass(frozen=True)
class LiftedOperator:
    """Lower-triangular Toeplitz matrix of a causal system over one trial."""

    matrix: np.ndarray = field(repr=False)
    impulse_response: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.matrix.shape[0]

    def __matmul__(self, other):
        return self.matrix @ other


def lift(sys: DiscreteTransferFunction, n: int) -> LiftedOperator:
    """Lifted representation of ``sys`` for a trial of ``n`` samples."""
    if n < 1:
        raise EmptyTrialError("trial length must be at least 1")
    h = sys.impulse_response(n)
    m = scipy.linalg.toeplitz(h, np.zeros(n))
    m.flags.writeable = False
    h.flags.writeable = False
    return LiftedOperator(m, h)


@dataclass(frozen=True)
class FeedbackController:
    controller: DiscreteTransferFunction

    @property
    def sample_time(self):
        return self.controller.sample_time


def default_controller(
    mass,
    sample_time,
    bandwidth_hz=DEFAULT_BANDWIDTH_HZ,
    damping=DEFAULT_DAMPING_RATIO,
    filter_ratio=DERIVATIVE_FILTER_RATIO,
) -> FeedbackController:
    """PD controller with a first-order derivative filter (a lead filter).

    Continuous design ``C(s) = kp + kd s / (tau s + 1)`` with
    ``kp = m wn^2``, ``kd = 2 zeta m wn`` and ``tau = 1 / (filter_ratio wn)``,
    discretized with the backward difference ``s -> (1 - q^-1) / Ts``.
    Backward differences map the stable continuous loop of a mass plant to a
    stable discrete loop, for any positive mass.
    """
    if mass <= 0:
        raise GpffError("mass must be positive")
    wn = 2.0 * np.pi * bandwidth_hz
    kp = mass * wn**2
    kd = 2.0 * damping * mass * wn
    tau = 1.0 / (filter_ratio * wn)
    ts = sample_time
    num = (kp * (tau + ts) + kd, -(kp * tau + kd))
    den = (tau + ts, -tau)
    return FeedbackController(DiscreteTransferFunction(num, den, ts))


def _closed_loop_characteristic(plant, ctrl):
    c = ctrl.controller
    plant._check_ts(c)
    return _polyadd(np.convolve(plant.den, c.den), np.convolve(plant.num, c.num))


def _check_stable(char):
    char = np.asarray(_trim(char))
    if char[0] == 0.0:
        raise StabilityError("algebraic loop: 1 + G C has zero leading coefficient")
    poles = np.roots(char) if len(char) > 1 else np.zeros(0)
    mags = np.abs(poles)
    if np.any(mags >= 1.0):
        raise StabilityError(
            f"closed loop unstable: max pole magnitude {mags.max():.6g}", pole_magnitudes=mags
        )
    return mags


@lru_cache(maxsize=512)
def sensitivity(plant: DiscreteTransferFunction, ctrl: FeedbackController) -> DiscreteTransferFunction:
    """Sensitivity ``S = (1 + G C)^-1`` after a closed-loop stability check.

    A zero plant or an identically zero controller means an open loop:
    ``S = 1`` and no stability check is made.
    """
    if plant.is_zero or ctrl.controller.is_zero:
        return DiscreteTransferFunction.gain(1.0, plant.sample_time)
    char = _closed_loop_characteristic(plant, ctrl)
    _check_stable(char)
    return DiscreteTransferFunction(np.convolve(plant.den, ctrl.controller.den), char, plant.sample_time)


@lru_cache(maxsize=512)
def process_sensitivity(plant: DiscreteTransferFunction, ctrl: FeedbackController) -> DiscreteTransferFunction:
    """``S G`` composed into one rational system (not a product of truncations)."""
    if plant.is_zero or ctrl.controller.is_zero:
        return plant
    char = _closed_loop_characteristic(plant, ctrl)
    _check_stable(char)
    return DiscreteTransferFunction(np.convolve(plant.num, ctrl.controller.den), char, plant.sample_time)


def closed_loop_poles(plant, ctrl):
    char = np.asarray(_trim(_closed_loop_characteristic(plant, ctrl)))
    return np.roots(char) if len(char) > 1 else np.zeros(0, dtype=complex)


# -- finite-difference building blocks ------------------------------------------


def backward_difference(sample_time, order=1):
    """Coefficients of ((1 - q^-1) / Ts)^order."""
    c = np.array([1.0])
    for _ in range(order):
        c = np.convolve(c, [1.0, -1.0])
    return c / sample_time**order


def mass_damper(mass, damping, sample_time, gain=1.0) -> DiscreteTransferFunction:
    """Finite-difference mass-damper ``gain / (m D^2 + d D)`` with ``D = (1 - q^-1)/Ts``."""
    den = _polyadd(mass * backward_difference(sample_time, 2), damping * backward_difference(sample_time, 1))
    return DiscreteTransferFunction((gain,), den, sample_time)


# -- spatially distributed plants -----------------------------------------------


class SpatialPlant:
    """Position-dependent plant, frozen to LTI dynamics per trial.

    Subclasses implement :meth:`axis_models`.  Axes are decoupled: axis ``i``
    maps input ``u_i`` to output ``y_i``.
    """

    kind = "abstract"
    n_axes = 1

    def __init__(self, lower, upper, sample_time, noise_std=0.0):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise GpffError("invalid domain box")
        self.sample_time = float(sample_time)
        self.noise_std = float(noise_std)

    @property
    def dim(self):
        return self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def check_position(self, rho):
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        if rho.shape != self.lower.shape:
            raise DomainError(f"position must have {self.dim} components, got {rho.shape}")
        tol = 1e-12 * np.maximum(1.0, np.abs(self.upper - self.lower))
        if np.any(rho < self.lower - tol) or np.any(rho > self.upper + tol):
            raise DomainError(
                f"position {rho.tolist()} outside domain [{self.lower.tolist()}, {self.upper.tolist()}]"
            )
        return rho

    def axis_models(self, rho) -> tuple:
        raise NotImplementedError

    def __call__(self, rho) -> tuple:
        return self.axis_models(self.check_position(rho))

    def effective_masses(self, rho) -> np.ndarray:
        """Per-axis mass seen from the input (mass divided by actuator gain)."""
        raise NotImplementedError

    def input_disturbance(self, rho, reference) -> np.ndarray:
        """Force acting on the plant input, shape ``(N, n_axes)``.  Zero by default."""
        return np.zeros((np.shape(reference)[0], self.n_axes))

    def is_linear(self):
        return True


class SpatialMassPlant(SpatialPlant):
    """Double integrator whose mass follows ``m_bar (1 - 2 (1/2 - rho)^2)`` on [0, 1]."""

    kind = "spatial_mass"

    def __init__(self, m_bar=1.0, damping=0.0, sample_time=1e-3, noise_std=0.0, lower=0.0, upper=1.0):
        super().__init__(lower, upper, sample_time, noise_std)
        if self.dim != 1:
            raise GpffError("spatial_mass is a one-dimensional plant")
        if self.lower[0] < 0.0 or self.upper[0] > 1.0:
            raise GpffError("spatial_mass domain must lie inside [0, 1]")
        self.m_bar = float(m_bar)
        self.damping = float(damping)

    def mass(self, rho):
        rho = np.asarray(rho, dtype=float)
        return self.m_bar * (1.0 - 2.0 * (0.5 - rho) ** 2)

    def true_parameters(self, rho):
        """Ideal [velocity, acceleration] feedforward parameters at ``rho``."""
        rho = self.check_position(rho)
        return np.array([self.damping, float(self.mass(rho[0]))])

    def effective_masses(self, rho):
        return np.array([float(self.mass(self.check_position(rho)[0]))])

    def axis_models(self, rho):
        return (mass_damper(float(self.mass(rho[0])), self.damping, self.sample_time),)


class MassDamperPlant(SpatialPlant):
    """Position-independent finite-difference mass-damper."""

    kind = "mass_damper"

    def __init__(self, mass=1.0, damping=0.0, sample_time=1e-3, noise_std=0.0, lower=0.0, upper=1.0):
        super().__init__(lower, upper, sample_time, noise_std)
        self.mass = float(mass)
        self.damping = float(damping)

    def true_parameters(self, rho):
        self.check_position(rho)
        return np.array([self.damping, self.mass])

    def effective_masses(self, rho):
        self.check_position(rho)
        return np.array([self.mass])

    def axis_models(self, rho):
        return (mass_damper(self.mass, self.damping, self.sample_time),)


class PeriodicFluxPlant(SpatialPlant):
    """Two-axis linear-motor stage with a periodic force constant on axis 1.

    Axis 1 (index 0) has force constant ``1 + flux_amplitude cos(2 pi rho_1 / pitch)``,
    so its ideal acceleration parameter ``m1 / k(rho_1)`` repeats every magnet
    pitch.  Axis 2 has a mildly position-dependent mass and Coulomb friction
    driven by the reference velocity.
    """

    kind = "periodic_flux"
    n_axes = 2

    def __init__(
        self,
        mass_1=1.0,
        damping_1=2.0,
        mass_2=0.5,
        damping_2=1.0,
        pitch=0.25,
        flux_amplitude=0.15,
        mass_2_slope=(0.03, 0.05),
        friction_2=0.05,
        sample_time=1e-3,
        noise_std=0.0,
        lower=(0.0, 0.0),
        upper=(1.0, 1.0),
    ):
        super().__init__(lower, upper, sample_time, noise_std)
        if self.dim != 2:
            raise GpffError("periodic_flux is a two-dimensional plant")
        if pitch <= 0 or not 0 <= flux_amplitude < 1:
            raise GpffError("pitch must be positive and flux_amplitude in [0, 1)")
        self.mass_1 = float(mass_1)
        self.damping_1 = float(damping_1)
        self.mass_2 = float(mass_2)
        self.damping_2 = float(damping_2)
        self.pitch = float(pitch)
        self.flux_amplitude = float(flux_amplitude)
        self.mass_2_slope = tuple(float(s) for s in mass_2_slope)
        self.friction_2 = float(friction_2)

    def force_constant(self, rho_1):
        return 1.0 + self.flux_amplitude * np.cos(2.0 * np.pi * np.asarray(rho_1, dtype=float) / self.pitch)

    def mass_2_at(self, rho):
        rho = np.asarray(rho, dtype=float)
        c = self.center
        return self.mass_2 * (
            1.0 + self.mass_2_slope[0] * (rho[..., 0] - c[0]) + self.mass_2_slope[1] * (rho[..., 1] - c[1])
        )

    def true_parameters(self, rho):
        """Ideal ``[vel_1, acc_1, vel_2, acc_2, coulomb_2]`` parameters."""
        rho = self.check_position(rho)
        k = float(self.force_constant(rho[0]))
        return np.array(
            [self.damping_1 / k, self.mass_1 / k, self.damping_2, float(self.mass_2_at(rho)), self.friction_2]
        )

    def effective_masses(self, rho):
        p = self.true_parameters(rho)
        return np.array([p[1], p[3]])

    def axis_models(self, rho):
        k = float(self.force_constant(rho[0]))
        return (
            mass_damper(self.mass_1, self.damping_1, self.sample_time, gain=k),
            mass_damper(float(self.mass_2_at(rho)), self.damping_2, self.sample_time),
        )

    def input_disturbance(self, rho, reference):
        # Coulomb friction evaluated on the reference velocity (tight-tracking approximation).
        r = np.asarray(reference, dtype=float).reshape(len(reference), -1)
        w = np.zeros((r.shape[0], 2))
        v = np.diff(r[:, 1], prepend=r[0, 1])
        w[:, 1] = self.friction_2 * np.sign(v)
        return w

    def is_linear(self):
        return self.friction_2 == 0.0


# -- closed-loop simulation -----------------------------------------------------


@dataclass(frozen=True)
class SimulationResult:
    """Signals of one closed-loop trial; 2-D arrays are ``(N, n_axes)``."""

    y: np.ndarray
    e: np.ndarray
    u: np.ndarray


def _as_controllers(ctrl, n_axes):
    if isinstance(ctrl, FeedbackController):
        return (ctrl,) * n_axes
    ctrl = tuple(ctrl)
    if len(ctrl) != n_axes:
        raise GpffError(f"need {n_axes} controllers, got {len(ctrl)}")
    return ctrl


def simulate_closed_loop(
    plant: SpatialPlant,
    rho,
    ctrl: FeedbackController | Sequence[FeedbackController],
    r,
    f,
    noise_std: float | None = None,
    seed: int | Sequence[int] | None = None,
) -> SimulationResult:
    """Simulate the loop ``u = C (r - y_m) + f``, ``y_m = G u + v``.

    Parameters
    ----------
    plant : SpatialPlant
        Evaluated (frozen) at initial position ``rho``.
    ctrl : FeedbackController or sequence of them
        One controller per axis; a single controller is shared.
    r, f : array_like
        Reference and feedforward, shape ``(N,)`` or ``(N, n_axes)``.
    noise_std : float, optional
        Standard deviation of the additive white output noise ``v``.
        Defaults to ``plant.noise_std``.
    seed : int or sequence of int, optional
        Required whenever the noise is nonzero.

    Returns
    -------
    SimulationResult
        Measured output, error ``e = r - y_m`` and plant input, with the
        same dimensionality as ``r``.
    """
    models = plant(rho)
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    r = np.asarray(r, dtype=float)
    f = np.asarray(f, dtype=float)
    if r.shape != f.shape:
        raise GpffError(f"reference shape {r.shape} differs from feedforward shape {f.shape}")
    squeeze = r.ndim == 1
    r2 = r.reshape(r.shape[0], -1)
    f2 = f.reshape(f.shape[0], -1)
    if r2.shape[1] != plant.n_axes:
        raise GpffError(f"plant has {plant.n_axes} axes, signals have {r2.shape[1]}")
    if r2.shape[0] == 0:
        raise EmptyTrialError("empty trial")
    ctrls = _as_controllers(ctrl, plant.n_axes)
    sigma = plant.noise_std if noise_std is None else float(noise_std)
    if sigma > 0:
        if seed is None:
            raise GpffError("a seed is mandatory when measurement noise is enabled")
        v = sigma * np.random.default_rng(seed).standard_normal(r2.shape)
    else:
        v = np.zeros_like(r2)
    w = plant.input_disturbance(rho, r2)
    e = np.empty_like(r2)
    u = np.empty_like(r2)
    for i, (g, c) in enumerate(zip(models, ctrls)):
        s = sensitivity(g, c)
        sg = process_sensitivity(g, c)
        e[:, i] = filter(s, r2[:, i] - v[:, i]) - filter(sg, f2[:, i] - w[:, i])
        u[:, i] = filter(c.controller, e[:, i]) + f2[:, i]
    y = r2 - e
    if squeeze:
        return SimulationResult(y[:, 0], e[:, 0], u[:, 0])
    return SimulationResult(y, e, u)
