"""Coordinate transforms and complex-phase calculus on per-unit dq signals.

Conventions
-----------
Amplitude-invariant Park transform: a balanced cosine set of peak amplitude ``V`` that is
advanced by ``phi`` against the frame maps to ``v = V * exp(j * phi)``. The global frame
rotates at the nominal synchronous frequency (50 Hz unless configured otherwise).
"""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt

NOMINAL_FREQUENCY = 50.0
OMEGA0 = 2 * np.pi * NOMINAL_FREQUENCY
EPSILON_V = 1e-6

_A = np.exp(2j * np.pi / 3)
_UNIFORM_STEP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DqSample:
    t: float
    v: complex
    i: complex


@dataclass(frozen=True, eq=False)
class DqSeries:
    t: np.ndarray
    v: np.ndarray
    i: np.ndarray
    dt: float

    def __post_init__(self):
        t = _readonly(np.asarray(self.t, dtype=float))
        v = _readonly(np.asarray(self.v, dtype=complex))
        i = _readonly(np.asarray(self.i, dtype=complex))
        _validate_series_arrays(t, v, i, self.dt)
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'v', v)
        object.__setattr__(self, 'i', i)
        object.__setattr__(self, 'dt', float(self.dt))

    def __len__(self):
        return self.t.size

    def __getitem__(self, k):
        return DqSample(float(self.t[k]), complex(self.v[k]), complex(self.i[k]))

    @property
    def samples(self):
        return [self[k] for k in range(len(self))]

    @classmethod
    def from_samples(cls, samples, dt):
        samples = list(samples)
        return cls(t=[s.t for s in samples], v=[s.v for s in samples], i=[s.i for s in samples], dt=dt)


@dataclass(frozen=True, eq=False)
class PhaseSeries:
    theta: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        theta = _readonly(np.asarray(self.theta, dtype=complex))
        if theta.ndim != 1:
            raise ValueError("The complex phase must be a one-dimensional series.")
        if not self.dt > 0:
            raise ValueError("The sampling interval dt must be positive.")
        object.__setattr__(self, 'theta', theta)
        object.__setattr__(self, 'dt', float(self.dt))

    def __len__(self):
        return self.theta.size

    @property
    def t(self):
        return self.t0 + self.dt * np.arange(self.theta.size)

    @property
    def voltage(self):
        return np.exp(self.theta)


@dataclass(frozen=True)
class PowerSample:
    P: float
    Q: float
    nu: float


def _readonly(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _validate_series_arrays(t, v, i, dt):
    if t.ndim != 1 or t.size == 0:
        raise ValueError("A dq series needs a non-empty one-dimensional time vector.")
    if v.shape != t.shape or i.shape != t.shape:
        raise ValueError("Time, voltage and current vectors must have the same length.")
    if not np.isfinite(dt) or dt <= 0:
        raise ValueError("The sampling interval dt must be positive and finite.")
    if not np.all(np.isfinite(t)):
        raise ValueError("The time vector contains non-finite values.")
    if t.size > 1:
        steps = np.diff(t)
        if np.any(steps <= 0):
            raise ValueError("The time vector must be strictly increasing.")
        if np.max(np.abs(steps - dt)) > _UNIFORM_STEP_TOLERANCE * dt + 4 * np.finfo(float).eps * np.max(np.abs(t)):
            raise ValueError(f"The time vector is not uniformly sampled at dt = {dt}.")


def _validate_finite(*values):
    for value in values:
        if not np.all(np.isfinite(value)):
            raise ValueError("Input contains non-finite values.")


def park_transform(abc, angle, balance_tolerance=1e-6):
    """Amplitude-invariant Park transform to ``v = v_d + j v_q`` in a frame rotating at ``angle``.

    A balanced set ``V cos(angle + phi - k 2 pi / 3)`` maps to ``V exp(j phi)``: a set advanced by
    ``phi`` has ``v_d = V cos phi`` and ``v_q = V sin phi``. The d axis lies on phase a at angle 0.
    """
    abc = np.asarray(abc, dtype=float)
    angle = np.asarray(angle, dtype=float)
    if abc.shape[-1] != 3:
        raise ValueError("Please provide the three phase values along the last axis.")
    _validate_finite(abc, angle)

    zero_sequence = np.abs(abc.sum(axis=-1))
    scale = np.maximum(np.max(np.abs(abc), axis=-1), 1.0)
    if np.any(zero_sequence > balance_tolerance * scale):
        warnings.warn("Three-phase input is not balanced (V_a + V_b + V_c != 0); "
                      "the zero-sequence component is discarded.", RuntimeWarning, stacklevel=2)

    space_vector = (2.0 / 3.0) * (abc[..., 0] + _A * abc[..., 1] + _A.conjugate() * abc[..., 2])
    dq = space_vector * np.exp(-1j * angle)
    return complex(dq) if np.ndim(dq) == 0 else dq


def inverse_park(v, angle):
    v = np.asarray(v, dtype=complex)
    angle = np.asarray(angle, dtype=float)
    _validate_finite(v, angle)
    stationary = v * np.exp(1j * angle)
    return np.stack([stationary.real, (stationary * _A.conjugate()).real, (stationary * _A).real], axis=-1)


def complex_power(v, i):
    v = np.asarray(v, dtype=complex)
    i = np.asarray(i, dtype=complex)
    _validate_finite(v, i)
    s = v * np.conjugate(i)
    nu = np.abs(v) ** 2
    if s.ndim == 0:
        return PowerSample(float(s.real), float(s.imag), float(nu))
    return PowerSample(s.real, s.imag, nu)


def to_phase(series, epsilon_v=EPSILON_V):
    magnitude = np.abs(series.v)
    too_small = np.flatnonzero(magnitude <= epsilon_v)
    if too_small.size:
        k = too_small[0]
        raise ValueError(f"voltage magnitude too small for complex phase (|v| = {magnitude[k]:.3g} "
                         f"at t = {series.t[k]:.6f} s)")
    theta = np.log(magnitude) + 1j * np.unwrap(np.angle(series.v))
    return PhaseSeries(theta=theta, dt=series.dt, t0=float(series.t[0]))


def complex_frequency(phase):
    """Central-difference derivative of the complex phase (one-sided at both ends).

    Differentiation amplifies measurement noise by roughly ``1/dt``; use the result for
    diagnostics and initialization only.
    """
    if len(phase) < 3:
        raise ValueError("At least three samples are needed to differentiate the complex phase.")
    return np.gradient(phase.theta, phase.dt, edge_order=1)


def _downsampling_ratio(dt, target_dt):
    ratio = target_dt / dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(ratio, 1.0):
        raise ValueError(f"target_dt = {target_dt} is not an integer multiple of dt = {dt}.")
    return n


def _anti_alias(x, dt, target_dt, cutoff_ratio, order):
    nyquist = 0.5 / target_dt
    b, a = butter(order, cutoff_ratio * nyquist, btype='low', fs=1.0 / dt)
    return filtfilt(b, a, x.real) + 1j * filtfilt(b, a, x.imag)


def downsample(series, target_dt, cutoff_ratio=0.4, order=2):
    n = _downsampling_ratio(series.dt, target_dt)
    if n == 1:
        return series
    if len(series) <= 3 * (order + 1):
        raise ValueError("The series is too short to be low-pass filtered before downsampling.")
    v = _anti_alias(series.v, series.dt, target_dt, cutoff_ratio, order)
    i = _anti_alias(series.i, series.dt, target_dt, cutoff_ratio, order)
    return DqSeries(t=series.t[::n], v=v[::n], i=i[::n], dt=target_dt)


def abc_to_series(t, v_abc, i_abc, nominal_frequency=NOMINAL_FREQUENCY, balance_tolerance=1e-6):
    t = np.asarray(t, dtype=float)
    if t.size < 2:
        raise ValueError("At least two samples are needed to infer the sampling interval.")
    angle = 2 * np.pi * nominal_frequency * t
    v = park_transform(v_abc, angle, balance_tolerance)
    i = park_transform(i_abc, angle, balance_tolerance)
    dt = (t[-1] - t[0]) / (t.size - 1)
    return DqSeries(t=t, v=v, i=i, dt=dt)
