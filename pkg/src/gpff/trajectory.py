"""Point-to-point references and feedforward basis matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BasisError, TrajectoryError


@dataclass(frozen=True)
class Reference:
    """Sampled reference, ``samples`` has shape ``(N, n_axes)``."""

    samples: np.ndarray = field(repr=False)
    sample_time: float
    start: tuple = ()
    end: tuple = ()
    duration: float = float("nan")

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 4:
            raise TrajectoryError("a reference needs at least 4 samples")
        if not self.sample_time > 0:
            raise TrajectoryError("sample_time must be positive")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)
        if not self.start:
            object.__setattr__(self, "start", tuple(s[0]))
        if not self.end:
            object.__setattr__(self, "end", tuple(s[-1]))

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def n_axes(self):
        return self.samples.shape[1]

    @property
    def time(self):
        return np.arange(self.n) * self.sample_time

    def is_rest_to_rest(self):
        s = self.samples
        return bool(np.array_equal(s[0], s[1]) and np.array_equal(s[-1], s[-2]))


def _unit_profile(tau, order):
    """Normalized displacement s(tau) in [0, 1] for tau in [0, 1].

    order 2: two constant-acceleration phases (+a, -a).
    order 3: four constant-jerk phases (+j, -j, -j, +j).
    """
    tau = np.clip(tau, 0.0, 1.0)
    if order == 2:
        # a = 4 on the unit interval
        return np.where(tau <= 0.5, 2.0 * tau**2, 1.0 - 2.0 * (1.0 - tau) ** 2)
    # jerk j = 1 / (2 (1/4)^3) = 32 on the unit interval; first half then mirror
    def half(t):
        t1 = np.minimum(t, 0.25)
        s = 32.0 * t1**3 / 6.0
        t2 = np.clip(t - 0.25, 0.0, 0.25)
        # state at t = 1/4: v = 1, a = 8
        return s + t2 + 4.0 * t2**2 - 32.0 * t2**3 / 6.0

    return np.where(tau <= 0.5, half(tau), 1.0 - half(1.0 - tau))


def polynomial_reference(
    start,
    end,
    duration,
    sample_time,
    order=3,
    pre_rest=None,
    post_rest=None,
) -> Reference:
    """Symmetric rest-to-rest point-to-point reference.

    The motion is piecewise polynomial: constant acceleration phases for
    ``order=2`` and constant jerk phases for ``order=3``.  The trajectory is
    padded with at least one sample of rest before and after the motion, so
    the first two and last two samples coincide.

    Parameters
    ----------
    start, end : float or sequence of float
        Per-axis start and end positions.
    duration : float
        Motion time in seconds; must cover at least four samples.
    pre_rest, post_rest : float, optional
        Rest time before and after the motion.  Default: one sample.
    """
    if order not in (2, 3):
        raise TrajectoryError(f"order must be 2 or 3, got {order}")
    if not sample_time > 0:
        raise TrajectoryError("sample_time must be positive")
    n_motion = int(round(duration / sample_time))
    min_samples = 4 if order == 3 else 2
    if duration < 4 * sample_time * (1 - 1e-9) or n_motion < min_samples:
        raise TrajectoryError(
            f"duration {duration} s is too short for order {order} at Ts={sample_time} (need >= 4 samples)"
        )
    n_pre = max(1, int(round((pre_rest or 0.0) / sample_time)))
    n_post = max(1, int(round((post_rest or 0.0) / sample_time)))
    start = np.atleast_1d(np.asarray(start, dtype=float))
    end = np.atleast_1d(np.asarray(end, dtype=float))
    if start.shape != end.shape:
        raise TrajectoryError("start and end must have the same number of axes")
    tau = np.arange(n_motion + 1) / n_motion
    s = _unit_profile(tau, order)
    s[0], s[-1] = 0.0, 1.0
    motion = start[None, :] + s[:, None] * (end - start)[None, :]
    samples = np.vstack([np.repeat(start[None, :], n_pre, 0), motion, np.repeat(end[None, :], n_post, 0)])
    return Reference(samples, sample_time, tuple(start), tuple(end), n_motion * sample_time)


def save_reference_csv(ref: Reference, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"r{i}" for i in range(ref.n_axes)])
        for k in range(ref.n):
            w.writerow([k, repr(k * ref.sample_time)] + [repr(float(v)) for v in ref.samples[k]])


def load_reference_csv(path) -> Reference:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["k", "t"] or len(header) < 3:
        raise TrajectoryError(f"{path}: expected columns k, t, r0, ...")
    data = np.array([[float(v) for v in row] for row in body])
    ts = data[1, 1] - data[0, 1] if len(data) > 1 else float("nan")
    return Reference(data[:, 2:], ts)


# -- basis functions ------------------------------------------------------------


def backward_diff(x, sample_time, order=1):
    """``((1 - q^-1)/Ts)^order x`` with the padding ``x(-1) = x(-2) = x(0)``."""
    x = np.asarray(x, dtype=float)
    for _ in range(order):
        x = np.diff(x, prepend=x[:1], axis=0) / sample_time
    return x


def coulomb(r, sample_time):
    """Sign of the reference velocity (friction basis)."""
    return np.sign(np.diff(np.asarray(r, dtype=float), prepend=r[:1]))


CUSTOM_BASES: dict[str, Callable] = {"coulomb": coulomb}


@dataclass(frozen=True)
class BasisFunction:
    """One column of the basis matrix.

    ``kind`` is ``"velocity"``, ``"acceleration"`` or ``"custom"``.  Custom
    columns evaluate ``func(r_axis, Ts)``; ``func`` may also be looked up by
    ``name`` in :data:`CUSTOM_BASES`.
    """

    kind: str
    axis: int = 0
    func: Callable | None = field(default=None, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("velocity", "acceleration", "custom"):
            raise BasisError(f"unknown basis kind {self.kind!r}")
        if self.kind == "custom" and self.func is None:
            if self.name not in CUSTOM_BASES:
                raise BasisError(f"custom basis {self.name!r} has no function")
            object.__setattr__(self, "func", CUSTOM_BASES[self.name])
        if not self.name:
            object.__setattr__(self, "name", {"velocity": "vel", "acceleration": "acc"}.get(self.kind, "custom"))

    @property
    def label(self):
        return f"{self.name}_{self.axis}"


def parse_basis(descriptor: str) -> BasisFunction:
    """Parse ``"acc"``, ``"vel:1"`` or ``"coulomb:1"`` style descriptors."""
    name, _, axis = descriptor.strip().partition(":")
    axis = int(axis) if axis else 0
    kind = {"vel": "velocity", "velocity": "velocity", "acc": "acceleration", "acceleration": "acceleration"}.get(name)
    if kind is not None:
        return BasisFunction(kind, axis)
    if name in CUSTOM_BASES:
        return BasisFunction("custom", axis, name=name)
    raise BasisError(f"unknown basis descriptor {descriptor!r}")


@dataclass(frozen=True)
class BasisMatrix:
    """Lifted basis ``Psi(q^-1) r``.

    ``matrix`` has shape ``(N * n_axes, n_theta)`` with axis-major row
    stacking: rows ``i*N:(i+1)*N`` hold axis ``i``.
    """

    matrix: np.ndarray = field(repr=False)
    kinds: tuple
    n_samples: int
    n_axes: int

    @property
    def n_theta(self):
        return self.matrix.shape[1]

    @property
    def labels(self):
        return [k.label for k in self.kinds]

    def feedforward(self, theta) -> np.ndarray:
        """Feedforward signal ``f = Psi r theta`` shaped ``(N, n_axes)``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise ValueError(f"theta must have shape ({self.n_theta},), got {theta.shape}")
        return (self.matrix @ theta).reshape(self.n_axes, self.n_samples).T

    def axis_block(self, axis):
        return self.matrix[axis * self.n_samples : (axis + 1) * self.n_samples]


def build_basis(r: Reference, kinds: Sequence[BasisFunction | str]) -> BasisMatrix:
    if not kinds:
        raise BasisError("at least one basis function is required")
    kinds = tuple(parse_basis(k) if isinstance(k, str) else k for k in kinds)
    n, n_axes = r.n, r.n_axes
    psi = np.zeros((n * n_axes, len(kinds)))
    for col, k in enumerate(kinds):
        if not 0 <= k.axis < n_axes:
            raise BasisError(f"basis {k.label} refers to axis {k.axis}, reference has {n_axes}")
        x = r.samples[:, k.axis]
        if k.kind == "velocity":
            sig = backward_diff(x, r.sample_time, 1)
        elif k.kind == "acceleration":
            sig = backward_diff(x, r.sample_time, 2)
        else:
            sig = np.asarray(k.func(x, r.sample_time), dtype=float)
            if sig.shape != (n,):
                raise BasisError(f"custom basis {k.label} returned shape {sig.shape}, expected ({n},)")
        psi[k.axis * n : (k.axis + 1) * n, col] = sig
    psi.flags.writeable = False
    return BasisMatrix(psi, kinds, n, n_axes)
