"""Hammerstein-Wiener normal form of a grid-forming device.

    e      = (Re(v i*) - P_s, Im(v i*) - Q_s, |v|^2 - v_s^2)
    dx/dt  = A x + B e          (A, B real)
    eta    = C x + D e          (C, D complex)
    dTheta = eta,   v = exp(Theta)

Simulation runs on the zero-order-hold discretization of (A, B); the complex phase is
integrated with the trapezoidal rule by default (forward Euler on request).
"""
import cmath
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, logm
from scipy.signal import lfilter

from .exceptions import IntegrationError
from .plants import MicroGrid, apply_event, has_stiff_bus, network_currents, slack_frequency
from .signal import DqSeries, PhaseSeries

logger = logging.getLogger(__name__)

INTEGRATION_RULES = ('trapezoidal', 'euler')
_MODAL_CONDITION_LIMIT = 1e6


@dataclass(frozen=True)
class Setpoints:
    P: float = 0.5
    Q: float = 0.0
    v: float = 1.0

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("The voltage setpoint v must be positive.")

    @property
    def nu(self):
        return self.v ** 2


def _real_matrix(value, shape, name):
    array = np.asarray(value)
    if np.iscomplexobj(array):
        if np.any(array.imag != 0):
            raise ValueError(f"Matrix {name} must be real.")
        array = array.real
    array = np.array(array, dtype=float).reshape(shape)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"Matrix {name} contains non-finite entries.")
    array.setflags(write=False)
    return array


def _complex_vector(value, size, name):
    array = np.array(value, dtype=complex).reshape(size)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"Matrix {name} contains non-finite entries.")
    array.setflags(write=False)
    return array


def _state_dimension(A):
    A = np.asarray(A)
    if A.size == 0:
        return 0
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("Matrix A must be square.")
    return A.shape[0]


@dataclass(frozen=True, eq=False)
class HwNormalForm:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    setpoints: Setpoints = Setpoints()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = _state_dimension(self.A)
        object.__setattr__(self, 'A', _real_matrix(self.A, (n, n), 'A'))
        object.__setattr__(self, 'B', _real_matrix(self.B, (n, 3), 'B'))
        object.__setattr__(self, 'C', _complex_vector(self.C, n, 'C'))
        object.__setattr__(self, 'D', _complex_vector(self.D, 3, 'D'))

    @property
    def n_ivars(self):
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class HwDiscrete:
    """Zero-order-hold sampled normal form: ``A_d = expm(A dt)``, ``B_d = int_0^dt expm(A s) ds B``."""
    A_d: np.ndarray
    B_d: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float
    setpoints: Setpoints = Setpoints()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("The sampling interval dt must be positive.")
        n = _state_dimension(self.A_d)
        object.__setattr__(self, 'A_d', _real_matrix(self.A_d, (n, n), 'A_d'))
        object.__setattr__(self, 'B_d', _real_matrix(self.B_d, (n, 3), 'B_d'))
        object.__setattr__(self, 'C', _complex_vector(self.C, n, 'C'))
        object.__setattr__(self, 'D', _complex_vector(self.D, 3, 'D'))
        object.__setattr__(self, 'dt', float(self.dt))

    @property
    def n_ivars(self):
        return self.A_d.shape[0]


@dataclass(frozen=True, eq=False)
class ErrorSeries:
    e: np.ndarray
    dt: float

    def __post_init__(self):
        e = np.array(self.e, dtype=float)
        if e.ndim != 2 or e.shape[1] != 3 or e.shape[0] == 0:
            raise ValueError("An error series needs shape (samples, 3).")
        e.setflags(write=False)
        object.__setattr__(self, 'e', e)
        object.__setattr__(self, 'dt', float(self.dt))

    def __len__(self):
        return self.e.shape[0]


def error_coordinates(v, i, sp):
    v = np.asarray(v, dtype=complex)
    i = np.asarray(i, dtype=complex)
    s = v * np.conjugate(i)
    return np.stack([s.real - sp.P, s.imag - sp.Q, np.abs(v) ** 2 - sp.nu], axis=-1)


def error_series(series, sp):
    return ErrorSeries(e=error_coordinates(series.v, series.i, sp), dt=series.dt)


def _scalar_error(v, i, sp):
    s = v * i.conjugate()
    return np.array([s.real - sp.P, s.imag - sp.Q, v.real * v.real + v.imag * v.imag - sp.nu])


def _augmented_exponential(A, B, dt):
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]


def discretize(model, dt):
    if not dt > 0:
        raise ValueError("The sampling interval dt must be positive.")
    A_d, B_d = _augmented_exponential(model.A, model.B, dt)
    return HwDiscrete(A_d=A_d, B_d=B_d, C=model.C, D=model.D, dt=dt, setpoints=model.setpoints)


def _has_negative_real_eigenvalue(A_d):
    eigenvalues = np.linalg.eigvals(A_d)
    scale = max(1.0, float(np.max(np.abs(eigenvalues)))) if eigenvalues.size else 1.0
    return bool(np.any((np.abs(eigenvalues.imag) <= 1e-12 * scale) & (eigenvalues.real <= 0)))


def to_continuous(discrete, provenance=None):
    """Recover the continuous (A, B) from a sampled model.

    Returns ``(model, method)`` where ``method`` is ``'logm'`` for the exact inverse of the
    zero-order hold, or ``'bilinear'`` when ``A_d`` has an eigenvalue on the closed negative
    real axis and has no real matrix logarithm.
    """
    n, dt = discrete.n_ivars, discrete.dt
    provenance = dict(provenance or {})
    if n == 0:
        return HwNormalForm(np.zeros((0, 0)), np.zeros((0, 3)), discrete.C, discrete.D, discrete.setpoints,
                            provenance), 'logm'
    A_d, B_d = discrete.A_d, discrete.B_d
    method = 'logm'
    if not _has_negative_real_eigenvalue(A_d):
        log_A = logm(A_d)
        if np.max(np.abs(np.imag(log_A)), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(log_A))):
            method = 'bilinear'
        else:
            A = np.real(log_A) / dt
            integral = expm(np.block([[A, np.eye(n)], [np.zeros((n, 2 * n))]]) * dt)[:n, n:]
            B = np.linalg.solve(integral, B_d)
    else:
        method = 'bilinear'
    if method == 'bilinear':
        identity = np.eye(n)
        A = (2 / dt) * (A_d - identity) @ np.linalg.inv(A_d + identity)
        B = (identity - A * dt / 2) @ B_d / dt
        logger.warning("A_d has no real matrix logarithm; using the bilinear transform instead")
    return HwNormalForm(A, B, discrete.C, discrete.D, discrete.setpoints, provenance), method


def linear_recursion(M, U, y0):
    """Rows ``y_0 .. y_{N-1}`` of ``y_{k+1} = M y_k + u_k`` for a real square ``M``."""
    n = M.shape[0]
    N = U.shape[0] + 1
    if n == 0:
        return np.zeros((N, 0))
    if N == 1:
        return np.array(y0, dtype=float).reshape(1, n)
    eigenvalues, V = np.linalg.eig(M)
    if np.linalg.cond(V) < _MODAL_CONDITION_LIMIT:
        W = np.linalg.solve(V, U.T.astype(complex)).T
        z0 = np.linalg.solve(V, np.asarray(y0, dtype=complex))
        Z = np.empty((N, n), dtype=complex)
        Z[0] = z0
        powers = np.arange(1, N)
        with np.errstate(over='ignore', invalid='ignore'):
            for m in range(n):
                Z[1:, m] = lfilter([1.0], [1.0, -eigenvalues[m]], W[:, m])
                if z0[m] != 0:
                    Z[1:, m] += eigenvalues[m] ** powers * z0[m]
            return (Z @ V.T).real
    Y = np.empty((N, n))
    Y[0] = y0
    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(N - 1):
            Y[k + 1] = M @ Y[k] + U[k]
    return Y


def steady_state(model, e0):
    """State at rest under the constant input ``e0``; matches ``-A^-1 B e0`` of the continuous model."""
    n = model.n_ivars
    if n == 0:
        return np.zeros(0)
    system = np.eye(n) - model.A_d
    rhs = model.B_d @ np.asarray(e0, dtype=float)
    try:
        return np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(system, rhs, rcond=None)[0]


def phase_increments(X, e, C, D, dt, integration):
    eta = X @ C + e @ D
    if integration == 'trapezoidal':
        eta_next = X[1:] @ C + e[:-1] @ D
        return eta, 0.5 * dt * (eta[:-1] + eta_next)
    return eta, dt * eta[:-1]


def _check_integration(integration):
    if integration not in INTEGRATION_RULES:
        raise ValueError(f"Integration rule should be one of {', '.join(INTEGRATION_RULES)}.")


def open_loop_trajectory(model, e, theta0, xc0=None, integration='trapezoidal'):
    _check_integration(integration)
    n = model.n_ivars
    x0 = np.zeros(n) if xc0 is None else np.asarray(xc0, dtype=float).reshape(n)
    X = linear_recursion(model.A_d, e[:-1] @ model.B_d.T, x0)
    eta, increments = phase_increments(X, e, model.C, model.D, model.dt, integration)
    with np.errstate(over='ignore', invalid='ignore'):
        theta = complex(theta0) + np.concatenate([[0j], np.cumsum(increments)])
    return {'x': X, 'eta': eta, 'theta': theta}


def simulate_open_loop(model, e_series, theta0, xc0=None, integration='trapezoidal', t0=0.0):
    if abs(e_series.dt - model.dt) > 1e-9 * model.dt:
        raise ValueError(f"The input series is sampled at {e_series.dt} s but the model at {model.dt} s.")
    trajectory = open_loop_trajectory(model, e_series.e, theta0, xc0, integration)
    phase = PhaseSeries(theta=trajectory['theta'], dt=model.dt, t0=t0)
    with np.errstate(over='ignore', invalid='ignore'):
        return phase, np.exp(phase.theta)


def simulate_closed_loop(model, network, t_span, theta0, xc0=None, events=(), slack_angle=0.0,
                         integration='trapezoidal', stop_magnitude=None):
    """Couple the sampled normal form to an algebraic network and run an event script.

    The network current is solved at every sample from the current voltage, so the closure
    introduces no delay. With ``stop_magnitude=(low, high)`` the run ends early (and the
    series is truncated) once ``|v|`` leaves that band.
    """
    _check_integration(integration)
    if isinstance(network, MicroGrid):
        raise ValueError("A normal-form model can only be closed against a single-terminal network.")
    network = tuple(network)
    dt, sp = model.dt, model.setpoints
    t0, t1 = (float(t) for t in t_span)
    n_steps = int(np.floor((t1 - t0) / dt + 1e-9)) + 1
    n = model.n_ivars
    A_d, B_d, C, D = model.A_d, model.B_d, model.C, model.D

    pending = sorted(events, key=lambda event: event.time)
    x = np.zeros(n) if xc0 is None else np.array(xc0, dtype=float).reshape(n)
    theta = complex(theta0)
    psi = float(slack_angle)
    slack_rate = 2 * np.pi * slack_frequency(network)
    t_out, v_out, i_out = [], [], []

    for k in range(n_steps):
        t = t0 + k * dt
        while pending and pending[0].time <= t + 1e-9 * dt:
            network = apply_event(network, pending.pop(0))
            slack_rate = 2 * np.pi * slack_frequency(network)
        try:
            v = cmath.exp(theta)
        except OverflowError:
            raise IntegrationError("Complex phase overflow in closed-loop simulation", t) from None
        if stop_magnitude is not None and not stop_magnitude[0] <= abs(v) <= stop_magnitude[1]:
            logger.warning("Closed-loop run stopped at t = %.4f s: |v| = %.3g left the band %s", t, abs(v),
                           stop_magnitude)
            break
        i = network_currents(network, [v], psi)[0]
        e = _scalar_error(v, i, sp)
        t_out.append(t)
        v_out.append(v)
        i_out.append(i)

        x_next = A_d @ x + B_d @ e
        eta = C @ x + D @ e
        if integration == 'trapezoidal':
            theta = theta + 0.5 * dt * (eta + C @ x_next + D @ e)
        else:
            theta = theta + dt * eta
        x = x_next
        psi += dt * slack_rate
        if not (np.all(np.isfinite(x)) and np.isfinite(theta.real) and np.isfinite(theta.imag)):
            raise IntegrationError("Non-finite state in closed-loop simulation", t + dt)

    if not t_out:
        raise IntegrationError("Closed-loop simulation left the magnitude band immediately", t0)
    return DqSeries(t=np.array(t_out), v=np.array(v_out), i=np.array(i_out), dt=dt)


def _steady_state_residual(model, network, z, slack_angle):
    n = model.n_ivars
    theta = complex(z[0], z[1])
    x = z[2:]
    v = cmath.exp(theta)
    i = network_currents(network, [v], slack_angle)[0]
    e = _scalar_error(v, i, model.setpoints)
    eta = model.C @ x + model.D @ e
    return np.concatenate([model.A @ x + model.B @ e, [eta.real, eta.imag]]) if n else np.array([eta.real, eta.imag])


def _numerical_jacobian(fun, z, step=1e-7):
    f0 = fun(z)
    J = np.empty((f0.size, z.size))
    for k in range(z.size):
        dz = np.zeros_like(z)
        dz[k] = step
        J[:, k] = (fun(z + dz) - fun(z - dz)) / (2 * step)
    return J


def equilibrium(model, network, slack_angle=0.0, tolerance=1e-10, max_iterations=100):
    """Damped Newton solve of ``eta = 0`` and ``dx/dt = 0`` with the network closure.

    Returns ``(theta, x_c)`` or ``None`` when the iteration does not converge.
    """
    network = tuple(network)
    n = model.n_ivars
    z = np.concatenate([[np.log(model.setpoints.v), slack_angle if has_stiff_bus(network) else 0.0], np.zeros(n)])

    def fun(w):
        return _steady_state_residual(model, network, w, slack_angle)

    r = fun(z)
    for iteration in range(max_iterations):
        norm = np.max(np.abs(r))
        if norm < tolerance:
            return complex(z[0], z[1]), z[2:].copy()
        J = _numerical_jacobian(fun, z)
        step, _, rank, _ = np.linalg.lstsq(J, -r, rcond=None)
        alpha = 1.0
        while alpha > 1e-6:
            candidate = z + alpha * step
            r_candidate = fun(candidate)
            if np.all(np.isfinite(r_candidate)) and np.max(np.abs(r_candidate)) < norm:
                break
            alpha /= 2
        else:
            logger.info("Equilibrium search stalled after %d iterations (residual %.3g, Jacobian rank %d of %d)",
                        iteration, norm, rank, z.size)
            return None
        z, r = candidate, r_candidate
    if np.max(np.abs(r)) < tolerance:
        return complex(z[0], z[1]), z[2:].copy()
    logger.info("Equilibrium search did not converge (residual %.3g)", np.max(np.abs(r)))
    return None


def linearize_closed_loop(model, network, slack_angle=0.0):
    network = tuple(network)
    point = equilibrium(model, network, slack_angle)
    if point is None:
        return None
    theta, x = point
    z = np.concatenate([[theta.real, theta.imag], x])
    J = _numerical_jacobian(lambda w: _steady_state_residual(model, network, w, slack_angle), z, step=1e-6)
    # rows ordered (dx, Re eta, Im eta); reorder to (ln|v|, phi, x)
    n = model.n_ivars
    order = [n, n + 1] + list(range(n))
    return np.linalg.eigvals(J[order, :])


def markov_parameters(model, count):
    """Discrete impulse-response coefficients ``D, C B_d, C A_d B_d, ...`` as a (count, 3) array."""
    h = np.empty((count, 3), dtype=complex)
    h[0] = model.D
    column = model.B_d.copy()
    for k in range(1, count):
        h[k] = model.C @ column
        column = model.A_d @ column
    return h
