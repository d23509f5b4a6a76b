"""Initial normal-form parameters.

Two starts are available. ``subspace_init`` treats e -> (Re eta, Im eta) as an open-loop
3-input, 2-output LTI system and identifies it with the oblique-projection N4SID algorithm on
block-Hankel matrices. ``fixed_pole_init`` fits the complex-phase trajectories directly: with
the poles held on a grid the trajectory loss is linear in the remaining parameters.
"""
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .normalform import HwDiscrete, HwNormalForm, Setpoints, to_continuous
from .signal import EPSILON_V, complex_frequency, to_phase

logger = logging.getLogger(__name__)

CHANNELS = ('P', 'Q', 'nu')
DEFAULT_HANKEL_ROWS = 20
POLE_GRID_SIZE = 24
_CHUNK_COLUMNS = 20000


def estimate_eta(records, epsilon_v=EPSILON_V):
    """Complex frequency of each preprocessed record, the subspace fit target.

    Numerical differentiation amplifies measurement noise by about ``1/dt``; the result is
    only meant to start the optimizer.
    """
    return [complex_frequency(to_phase(series, epsilon_v)) for series in records]


def parameter_count(n_ivars):
    return n_ivars ** 2 + 5 * n_ivars + 6


def _check_excitation(inputs):
    stacked = np.concatenate(inputs, axis=0)
    energy = np.sum(stacked ** 2, axis=0)
    scale = max(float(np.max(energy)), 1.0)
    silent = [channel for channel, value in zip(CHANNELS, energy) if value <= 1e-20 * scale]
    if silent:
        raise ValueError(f"Rank-deficient excitation: channel(s) {', '.join(silent)} carry no energy.")
    normalized = stacked / np.sqrt(energy)
    _, singular_values, vh = np.linalg.svd(normalized, full_matrices=False)
    if singular_values[-1] <= 1e-10 * singular_values[0]:
        weakest = CHANNELS[int(np.argmax(np.abs(vh[-1])))]
        raise ValueError(f"Rank-deficient excitation: channel {weakest} is a linear combination of the others.")
    return np.sqrt(energy / stacked.shape[0])


def _block_hankel_transpose(signal, rows):
    # rows are the windows signal[k : k + rows], flattened sample-major
    windows = sliding_window_view(signal, rows, axis=0)
    return windows.transpose(0, 2, 1).reshape(windows.shape[0], -1)


def _triangular_factor(inputs, outputs, rows):
    m, l = inputs[0].shape[1], outputs[0].shape[1]
    R = np.zeros((0, 2 * rows * (m + l)))
    for u, y in zip(inputs, outputs):
        U = _block_hankel_transpose(u, 2 * rows)
        Y = _block_hankel_transpose(y, 2 * rows)
        for start in range(0, U.shape[0], _CHUNK_COLUMNS):
            block = np.hstack([U[start:start + _CHUNK_COLUMNS], Y[start:start + _CHUNK_COLUMNS]])
            R = np.linalg.qr(np.vstack([R, block]), mode='r')
    return R.T


def _divide(A, B):
    return A @ np.linalg.pinv(B)


def _perpendicular(A, B):
    return A - _divide(A @ B.T, B @ B.T) @ B


def _oblique(L, future, past, future_inputs):
    Rf, Rp, Ru = L[future], L[past], L[future_inputs]
    return _divide(_perpendicular(Rf, Ru), _perpendicular(Rp, Ru)) @ Rp


def _n4sid(inputs, outputs, n, rows):
    m, l = inputs[0].shape[1], outputs[0].shape[1]
    L = _triangular_factor(inputs, outputs, rows)
    i = rows
    yf0 = 2 * m * i + l * i

    past = np.r_[0:m * i, 2 * m * i:yf0]
    O_i = _oblique(L, np.r_[yf0:yf0 + l * i], past, np.r_[m * i:2 * m * i])
    U_svd, S, _ = np.linalg.svd(O_i, full_matrices=False)
    logger.debug("Subspace singular values: %s", np.array2string(S[:min(S.size, 2 * n + 4)], precision=3))
    gamma = U_svd[:, :n] * np.sqrt(S[:n])
    gamma_short = gamma[:l * (i - 1)]

    past_plus = np.r_[0:m * (i + 1), 2 * m * i:yf0 + l]
    O_next = _oblique(L, np.r_[yf0 + l:yf0 + l * i], past_plus, np.r_[m * i + m:2 * m * i])

    X_i = np.linalg.pinv(gamma) @ O_i
    X_next = np.linalg.pinv(gamma_short) @ O_next
    rhs = np.vstack([X_i, L[m * i:m * (i + 1)]])
    lhs = np.vstack([X_next, L[yf0:yf0 + l]])
    solution = _divide(lhs, rhs)
    return solution[:n, :n], solution[:n, n:], solution[n:, :n], solution[n:, n:], S


def clip_discrete_poles(A_d):
    """Move the eigenvalues of a sampled ``A_d`` into the range a real logarithm can reach.

    Eigenvalues on the closed negative real axis are mirrored onto the positive axis, and
    moduli below ``exp(-pi)`` are raised to it, so the continuous eigenvalues stay within the
    Nyquist limit ``pi / dt``. Returns the clipped matrix and the number of moved eigenvalues.
    """
    eigenvalues, V = np.linalg.eig(A_d)
    if eigenvalues.size == 0 or np.linalg.cond(V) > 1e8:
        return A_d, 0
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    on_negative_axis = (np.abs(eigenvalues.imag) <= 1e-12 * scale) & (eigenvalues.real <= 0)
    clipped = np.where(on_negative_axis, np.abs(eigenvalues).astype(complex), eigenvalues)
    floor = np.exp(-np.pi)
    modulus = np.abs(clipped)
    too_fast = modulus < floor
    clipped = np.where(too_fast, floor * np.where(modulus > 0, clipped / np.where(modulus > 0, modulus, 1), 1),
                       clipped)
    moved = int(np.count_nonzero(on_negative_axis | too_fast))
    if not moved:
        return A_d, 0
    logger.info("Moved %d sampled pole(s) of the subspace fit inside the Nyquist limit", moved)
    return np.real(V @ np.diag(clipped) @ np.linalg.inv(V)), moved


def _reflect_unstable(A):
    eigenvalues, V = np.linalg.eig(A)
    unstable = eigenvalues.real > 0
    if not np.any(unstable):
        return A, []
    reflected = np.where(unstable, -eigenvalues.real + 1j * eigenvalues.imag, eigenvalues)
    logger.info("Reflected %d unstable eigenvalue(s) of the initial A into the left half plane",
                int(unstable.sum()))
    return np.real(V @ np.diag(reflected) @ np.linalg.inv(V)), [complex(value) for value in eigenvalues[unstable]]


def _common_dt(e_records):
    dt = e_records[0].dt
    if any(abs(record.dt - dt) > 1e-9 * dt for record in e_records):
        raise ValueError("All records must share one sampling interval.")
    return dt


def subspace_init(e_records, eta_records, n_ivars, config=None, setpoints=None):
    """Stable continuous-time normal form fitted to (e, eta) pairs.

    ``e_records`` are ``ErrorSeries`` sharing one sampling interval, ``eta_records`` the matching
    complex-frequency arrays. The provenance records the conversion method, clipped poles and
    any reflected eigenvalues.
    """
    rows = getattr(config, 'hankel_rows', DEFAULT_HANKEL_ROWS)
    setpoints = setpoints or Setpoints()
    if not e_records or len(e_records) != len(eta_records):
        raise ValueError("Please provide one complex-frequency series per error series.")
    dt = _common_dt(e_records)
    inputs = [np.asarray(record.e, dtype=float) for record in e_records]
    etas = [np.asarray(eta, dtype=complex) for eta in eta_records]
    for u, eta in zip(inputs, etas):
        if u.shape[0] != eta.shape[0]:
            raise ValueError("Error and complex-frequency series must have equal lengths.")
    total = sum(u.shape[0] for u in inputs)
    if total < 10 * parameter_count(n_ivars):
        raise ValueError(f"{total} samples are too few to fit {parameter_count(n_ivars)} parameters.")
    input_scale = _check_excitation(inputs)

    outputs = [np.column_stack([eta.real, eta.imag]) for eta in etas]
    if n_ivars == 0:
        U = np.concatenate(inputs)
        Y = np.concatenate(outputs)
        D, *_ = np.linalg.lstsq(U, Y, rcond=None)
        return HwNormalForm(np.zeros((0, 0)), np.zeros((0, 3)), np.zeros(0), D[:, 0] + 1j * D[:, 1], setpoints,
                            {'init': 'least-squares', 'conversion': 'none', 'reflected': []})

    if rows <= n_ivars:
        raise ValueError(f"hankel_rows = {rows} must exceed the model order {n_ivars}.")
    usable = [k for k, u in enumerate(inputs) if u.shape[0] >= 2 * rows + 1]
    if not usable:
        raise ValueError(f"Every record is shorter than the {2 * rows + 1} samples a Hankel fit needs.")
    output_scale = np.sqrt(np.mean(np.concatenate(outputs) ** 2, axis=0))
    output_scale[output_scale == 0] = 1.0
    scaled_inputs = [inputs[k] / input_scale for k in usable]
    scaled_outputs = [outputs[k] / output_scale for k in usable]

    A_d, B_d, C, D, singular_values = _n4sid(scaled_inputs, scaled_outputs, n_ivars, rows)
    B_d = B_d / input_scale
    C = C * output_scale[:, None]
    D = D * output_scale[:, None] / input_scale
    A_d, clipped = clip_discrete_poles(A_d)

    discrete = HwDiscrete(A_d, B_d, C[0] + 1j * C[1], D[0] + 1j * D[1], dt, setpoints)
    model, method = to_continuous(discrete)
    A, reflected = _reflect_unstable(model.A)
    provenance = {'init': 'subspace', 'conversion': method, 'reflected': reflected, 'clipped': clipped,
                  'singular_values': [float(value) for value in singular_values[:2 * n_ivars + 2]]}
    return HwNormalForm(A, model.B, model.C, model.D, setpoints, provenance)


def _filtered_inputs(e, mu, initial_state):
    # f_{k+1} = mu f_k + e_k, the response of a unit-gain state with pole mu to each channel
    f = np.empty_like(e)
    f[0] = e[0] / (1.0 - mu) if initial_state == 'steady' else 0.0
    f[1:] = lfilter([1.0], [1.0, -mu], e[:-1], axis=0)
    if initial_state == 'steady':
        f[1:] += np.outer(mu ** np.arange(1, e.shape[0]), f[0])
    return f


def _accumulate(z, dt, integration):
    if integration == 'trapezoidal':
        increments = 0.5 * dt * (z[:-1] + z[1:])
    else:
        increments = dt * z[:-1]
    return np.concatenate([np.zeros((1,) + z.shape[1:]), np.cumsum(increments, axis=0)])


class _PhaseRegression:
    def __init__(self, e_records, phases, dt, integration, initial_state):
        self.inputs = [np.asarray(record.e, dtype=float) for record in e_records]
        self.dt, self.integration, self.initial_state = dt, integration, initial_state
        target = np.concatenate([phase.theta - phase.theta[0] for phase in phases])
        self.target = np.column_stack([target.real, target.imag])
        self.feedthrough = np.concatenate(
            [np.vstack([np.zeros((1, 3)), dt * np.cumsum(e[:-1], axis=0)]) for e in self.inputs])
        self._states = {}

    def state(self, mu):
        if mu not in self._states:
            self._states[mu] = np.concatenate([_accumulate(_filtered_inputs(e, mu, self.initial_state), self.dt,
                                                           self.integration) for e in self.inputs])
        return self._states[mu]

    def solve(self, columns):
        design = np.hstack(columns)
        coefficients, *_ = np.linalg.lstsq(design, self.target, rcond=None)
        residual = self.target - design @ coefficients
        return coefficients, float(np.sum(residual ** 2))


def fixed_pole_init(e_records, phases, n_ivars, integration='trapezoidal', initial_state='zero', setpoints=None,
                    pole_grid=None):
    """Normal form with real poles picked greedily from a grid by trajectory least squares.

    For fixed poles the phase trajectory is linear in ``D`` and in the products ``C_i B_i``;
    each product is cut back to rank one and ``C``, ``D`` are refitted for the resulting ``B``.
    The start can therefore never be worse than the best pure-feedthrough model.
    """
    setpoints = setpoints or Setpoints()
    if not e_records or len(e_records) != len(phases):
        raise ValueError("Please provide one measured phase per error series.")
    dt = _common_dt(e_records)
    if pole_grid is None:
        duration = max(len(record) for record in e_records) * dt
        pole_grid = np.geomspace(1.0 / duration, 0.5 * np.pi / dt, POLE_GRID_SIZE)
    rates = [float(rate) for rate in pole_grid]
    if len(rates) < n_ivars:
        raise ValueError(f"The pole grid holds {len(rates)} rate(s) but {n_ivars} are needed.")
    regression = _PhaseRegression(e_records, phases, dt, integration, initial_state)

    chosen = []
    for _ in range(n_ivars):
        best = None
        for rate in rates:
            if rate in chosen:
                continue
            columns = [regression.feedthrough] + [regression.state(np.exp(-r * dt)) for r in chosen + [rate]]
            _, value = regression.solve(columns)
            if best is None or value < best[1]:
                best = (rate, value)
        chosen.append(best[0])

    mus = [np.exp(-rate * dt) for rate in chosen]
    B_d = np.zeros((n_ivars, 3))
    if n_ivars:
        coefficients, _ = regression.solve([regression.feedthrough] + [regression.state(mu) for mu in mus])
        for k in range(n_ivars):
            block = coefficients[3 * (k + 1):3 * (k + 2)].T
            U, S, Vt = np.linalg.svd(block, full_matrices=False)
            B_d[k] = np.sqrt(max(S[0], np.finfo(float).tiny)) * Vt[0]
    state_columns = [regression.state(mu) @ B_d[k][:, None] for k, mu in enumerate(mus)]
    coefficients, value = regression.solve([regression.feedthrough] + state_columns)
    D = coefficients[:3, 0] + 1j * coefficients[:3, 1]
    C = coefficients[3:, 0] + 1j * coefficients[3:, 1]
    logger.info("Fixed-pole start for n_ivars = %d: rates %s 1/s, trajectory loss %.6g", n_ivars,
                np.array2string(np.array(chosen), precision=3), value)

    discrete = HwDiscrete(np.diag(mus) if n_ivars else np.zeros((0, 0)), B_d, C, D, dt, setpoints)
    model, method = to_continuous(discrete)
    provenance = {'init': 'fixed-pole', 'conversion': method, 'reflected': [], 'rates': chosen}
    return HwNormalForm(model.A, model.B, model.C, model.D, setpoints, provenance)
