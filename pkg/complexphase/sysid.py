"""Open-loop identification of the normal form from complex-phase trajectories.

The optimizer works on the sampled parameters (A_d, B_d, C, D) at the record interval. The
loss of a record is the squared distance between measured and simulated complex phase at
every sample; its gradient is accumulated backwards through the state recursion. Every
simulation starts at the measured phase, with the internal state at zero or, on request, at
the steady state belonging to the first error sample.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.linalg import expm_frechet
from scipy.optimize import minimize

from .config import substream
from .exceptions import IdentificationError
from .metrics import predict, r2
from .normalform import (INTEGRATION_RULES, HwDiscrete, HwNormalForm, linear_recursion, phase_increments,
                         discretize, error_series, linearize_closed_loop, to_continuous)
from .plants import stiff_bus
from .signal import EPSILON_V, to_phase
from .subspace import DEFAULT_HANKEL_ROWS, estimate_eta, fixed_pole_init, subspace_init

logger = logging.getLogger(__name__)

INITIAL_STATES = ('zero', 'steady')
EPSILON_SELECT = 0.002


@dataclass(frozen=True)
class IdentConfig:
    n_ivars: int = 1
    max_iters: int = 2000
    gradient_tolerance: float = 1e-8
    loss_tolerance: float = 1e-12
    loss_window: int = 5
    restarts: int = 0
    perturbation_scale: float = 0.1
    seed: int = 0
    hankel_rows: int = DEFAULT_HANKEL_ROWS
    regularization: float = 0.0
    integration: str = 'trapezoidal'
    initial_state: str = 'zero'
    epsilon_v: float = EPSILON_V

    def __post_init__(self):
        if self.n_ivars < 0:
            raise ValueError("n_ivars cannot be negative.")
        if self.max_iters < 0:
            raise ValueError("max_iters cannot be negative.")
        if not self.gradient_tolerance > 0 or not self.loss_tolerance > 0:
            raise ValueError("Tolerances must be positive.")
        if self.restarts < 0:
            raise ValueError("restarts cannot be negative.")
        if self.regularization < 0:
            raise ValueError("The regularization weight cannot be negative.")
        if self.integration not in INTEGRATION_RULES:
            raise ValueError(f"integration should be one of {', '.join(INTEGRATION_RULES)}.")
        if self.initial_state not in INITIAL_STATES:
            raise ValueError(f"initial_state should be one of {', '.join(INITIAL_STATES)}.")


@dataclass(frozen=True, eq=False)
class IdentResult:
    model: HwNormalForm
    train_loss: float
    validation_r2: dict
    trace: pd.DataFrame
    init_model: HwNormalForm
    stability: dict = field(default_factory=dict)

    @property
    def n_ivars(self):
        return self.model.n_ivars

    @property
    def validation_score(self):
        return _score(self.validation_r2)


def loss(predicted, measured):
    if len(predicted) != len(measured):
        raise ValueError(f"Series lengths differ ({len(predicted)} vs {len(measured)} samples).")
    if abs(predicted.dt - measured.dt) > 1e-9 * measured.dt:
        raise ValueError("Series are sampled at different intervals.")
    difference = measured.theta - predicted.theta
    return float(np.sum(difference.real ** 2 + difference.imag ** 2))


def pack_parameters(model):
    if isinstance(model, HwDiscrete):
        A, B = model.A_d, model.B_d
    else:
        A, B = model.A, model.B
    return np.concatenate([A.ravel(), B.ravel(), model.C.real, model.C.imag, model.D.real, model.D.imag])


def _split_parameters(p, n):
    sizes = np.cumsum([n * n, 3 * n, n, n, 3, 3])
    A, B, Cr, Ci, Dr, Di = np.split(p, sizes[:-1])
    return A.reshape(n, n), B.reshape(n, 3), Cr + 1j * Ci, Dr + 1j * Di


def unpack_parameters(p, n_ivars, dt=None, setpoints=None):
    A, B, C, D = _split_parameters(np.asarray(p, dtype=float), n_ivars)
    kwargs = {} if setpoints is None else {'setpoints': setpoints}
    if dt is None:
        return HwNormalForm(A, B, C, D, **kwargs)
    return HwDiscrete(A, B, C, D, dt, **kwargs)


def _initial_state(A_d, B_d, e0, rule):
    n = A_d.shape[0]
    if rule == 'zero' or n == 0:
        return np.zeros(n)
    return np.linalg.solve(np.eye(n) - A_d, B_d @ e0)


def _record_objective(A_d, B_d, C, D, e, theta_m, dt, integration, initial_state):
    n = A_d.shape[0]
    x0 = _initial_state(A_d, B_d, e[0], initial_state)
    with np.errstate(over='ignore', invalid='ignore'):
        X = linear_recursion(A_d, e[:-1] @ B_d.T, x0)
        _, increments = phase_increments(X, e, C, D, dt, integration)
        theta = theta_m[0] + np.concatenate([[0j], np.cumsum(increments)])
        residual = theta - theta_m
        value = float(np.sum(residual.real ** 2 + residual.imag ** 2))
    if not np.isfinite(value):
        return np.inf, None

    g = 2 * residual
    G = np.cumsum(g[::-1])[::-1][1:]
    if integration == 'trapezoidal':
        s = 0.5 * dt * (X[:-1] + X[1:])
        padded = np.concatenate([[0j], G, [0j]])
        W = 0.5 * dt * (padded[1:] + padded[:-1])
    else:
        s = dt * X[:-1]
        W = dt * np.concatenate([G, [0j]])
    grad_C = s.T @ G.real + 1j * (s.T @ G.imag)
    grad_D = dt * (e[:-1].T @ G.real) + 1j * dt * (e[:-1].T @ G.imag)

    q = np.outer(W.real, C.real) + np.outer(W.imag, C.imag)
    costate = linear_recursion(A_d.T, q[::-1][1:], q[-1])[::-1]
    grad_A = costate[1:].T @ X[:-1]
    grad_B = costate[1:].T @ e[:-1]
    if initial_state == 'steady' and n:
        mu = np.linalg.solve((np.eye(n) - A_d).T, costate[0])
        grad_A += np.outer(mu, x0)
        grad_B += np.outer(mu, e[0])
    return value, (grad_A, grad_B, grad_C, grad_D)


def _flatten_gradient(grad_A, grad_B, grad_C, grad_D):
    return np.concatenate([grad_A.ravel(), grad_B.ravel(), grad_C.real, grad_C.imag, grad_D.real, grad_D.imag])


def _discrete_objective(p, n, records, dt, integration, initial_state, regularization):
    A_d, B_d, C, D = _split_parameters(p, n)
    total, gradient = 0.0, np.zeros_like(p)
    for e, theta_m in records:
        try:
            value, parts = _record_objective(A_d, B_d, C, D, e, theta_m, dt, integration, initial_state)
        except np.linalg.LinAlgError:
            value, parts = np.inf, None
        if parts is None:
            return np.inf, np.zeros_like(p)
        total += value
        gradient += _flatten_gradient(*parts)
    if regularization:
        total += regularization * float(p @ p)
        gradient += 2 * regularization * p
    return total, gradient


def _training_arrays(e_records, measured_phases):
    if len(e_records) != len(measured_phases):
        raise ValueError("Please provide one measured phase per error series.")
    arrays = []
    for e_series, phase in zip(e_records, measured_phases):
        if len(e_series) != len(phase):
            raise ValueError("Error series and measured phase must have equal lengths.")
        arrays.append((np.asarray(e_series.e, dtype=float), np.asarray(phase.theta, dtype=complex)))
    return arrays


def objective(model, e_records, measured_phases, integration='trapezoidal', initial_state='zero',
              regularization=0.0):
    """Summed trajectory loss of a sampled model over several records."""
    p = pack_parameters(model)
    value, _ = _discrete_objective(p, model.n_ivars, _training_arrays(e_records, measured_phases), model.dt,
                                   integration, initial_state, regularization)
    return value


def loss_gradient(model, e_records, measured_phases, integration='trapezoidal', initial_state='zero',
                  regularization=0.0):
    """Exact gradient of the summed loss, ordered like ``pack_parameters(model)``.

    A sampled ``HwDiscrete`` is differentiated directly. For a continuous ``HwNormalForm`` the
    derivative is chained through the zero-order-hold map using the Frechet derivative of the
    matrix exponential, at the sampling interval of the records.
    """
    records = _training_arrays(e_records, measured_phases)
    if isinstance(model, HwDiscrete):
        _, gradient = _discrete_objective(pack_parameters(model), model.n_ivars, records, model.dt, integration,
                                          initial_state, regularization)
        return gradient

    dt = e_records[0].dt
    n = model.n_ivars
    discrete = discretize(model, dt)
    _, gradient = _discrete_objective(pack_parameters(discrete), n, records, dt, integration, initial_state, 0.0)
    grad_A_d, grad_B_d, _, _ = _split_parameters(gradient, n)
    if n:
        M = np.zeros((n + 3, n + 3))
        M[:n, :n] = model.A
        M[:n, n:] = model.B
        G_E = np.zeros_like(M)
        G_E[:n, :n] = grad_A_d
        G_E[:n, n:] = grad_B_d
        G_M = dt * expm_frechet(M.T * dt, G_E, compute_expm=False)
        gradient[:n * n] = G_M[:n, :n].ravel()
        gradient[n * n:n * n + 3 * n] = G_M[:n, n:].ravel()
    if regularization:
        p = pack_parameters(model)
        gradient = gradient + 2 * regularization * p
    return gradient


def _accumulated(Z, dt, integration):
    if integration == 'trapezoidal':
        increments = 0.5 * dt * (Z[:-1] + Z[1:])
    else:
        increments = dt * Z[:-1]
    return np.concatenate([np.zeros((1,) + Z.shape[1:], dtype=Z.dtype), np.cumsum(increments, axis=0)])


def _parameter_scale(p, n, records, dt, integration, initial_state):
    """Inverse square root of the Gauss-Newton diagonal, used to precondition BFGS.

    Raw parameters differ by orders of magnitude in their effect on the phase: ``A_d`` sits
    next to one while ``B_d`` is of order ``dt``.
    """
    A_d, B_d, C, _ = _split_parameters(p, n)
    curvature = np.zeros_like(p)
    with np.errstate(over='ignore', invalid='ignore'):
        for e, _ in records:
            X = linear_recursion(A_d, e[:-1] @ B_d.T, _initial_state(A_d, B_d, e[0], initial_state))
            state_phase = _accumulated(X, dt, integration)
            feedthrough = np.concatenate([np.zeros((1, 3)), dt * np.cumsum(e[:-1], axis=0)])
            sensitivities = []
            for i in range(n):
                for l in range(n):
                    drive = np.zeros((e.shape[0] - 1, n))
                    drive[:, i] = X[:-1, l]
                    sensitivities.append(_accumulated(linear_recursion(A_d, drive, np.zeros(n)), dt, integration) @ C)
            for i in range(n):
                for j in range(3):
                    drive = np.zeros((e.shape[0] - 1, n))
                    drive[:, i] = e[:-1, j]
                    sensitivities.append(_accumulated(linear_recursion(A_d, drive, np.zeros(n)), dt, integration) @ C)
            blocks = [np.array([np.sum(np.abs(s) ** 2) for s in sensitivities]),
                      np.sum(state_phase ** 2, axis=0), np.sum(state_phase ** 2, axis=0),
                      np.sum(feedthrough ** 2, axis=0), np.sum(feedthrough ** 2, axis=0)]
            curvature += np.concatenate(blocks)
    curvature[~np.isfinite(curvature)] = 0.0
    peak = float(np.max(curvature, initial=0.0))
    if peak <= 0:
        return np.ones_like(p)
    return 1.0 / np.sqrt(np.maximum(curvature, 1e-6 * peak))


def _score(validation_r2):
    values = [np.mean(pair) for pair in validation_r2.values()]
    if not values or not np.all(np.isfinite(values)):
        return -np.inf
    return float(np.mean(values))


def _validation_r2(model, records, config):
    scores = {}
    for name, series in records.items():
        try:
            with np.errstate(over='ignore', invalid='ignore'):
                v = predict(model, series, config.epsilon_v, config.integration, config.initial_state)['v']
            scores[name] = (r2(series.v.real, v.real), r2(series.v.imag, v.imag))
        except (ValueError, np.linalg.LinAlgError):
            scores[name] = (np.nan, np.nan)
    return scores


def _perturb(p, scale, rng):
    return p + scale * (np.abs(p) + 1e-3) * rng.standard_normal(p.size)


class _Run:
    def __init__(self, start, n, dt, setpoints, validation, config):
        self.start, self.n, self.dt, self.setpoints = start, n, dt, setpoints
        self.validation, self.config = validation, config
        self.history, self.rows = [], []
        self.best = (-np.inf, None, None, None)

    def record(self, iteration, p, value, gradient):
        model = unpack_parameters(p, self.n, self.dt, self.setpoints)
        scores = _validation_r2(model, self.validation, self.config)
        score = _score(scores)
        self.history.append(value)
        self.rows.append({'start': self.start, 'iteration': iteration, 'loss': value,
                          'gradient_norm': float(np.max(np.abs(gradient), initial=0.0)), 'validation_r2': score})
        logger.debug("start %d iteration %d: loss %.6g, validation R2 %.6f", self.start, iteration, value, score)
        if self.best[1] is None or score > self.best[0]:
            self.best = (score, p.copy(), scores, value)

    def stalled(self):
        window = self.config.loss_window
        if len(self.history) <= window:
            return False
        old, new = self.history[-window - 1], self.history[-1]
        return old - new <= self.config.loss_tolerance * max(abs(old), np.finfo(float).tiny)


def _optimize(p0, start, n, records, dt, setpoints, validation, config):
    args = (n, records, dt, config.integration, config.initial_state, config.regularization)
    run = _Run(start, n, dt, setpoints, validation, config)
    value, gradient = _discrete_objective(p0, *args)
    if not np.isfinite(value):
        return run
    run.record(0, p0, value, gradient)
    if config.max_iters == 0:
        return run
    scale = _parameter_scale(p0, n, records, dt, config.integration, config.initial_state)
    cache = {}

    def fun(z):
        p = z * scale
        value, gradient = _discrete_objective(p, *args)
        cache['last'] = (p, value, gradient)
        return value, gradient * scale

    def callback(intermediate_result):
        p = intermediate_result.x * scale
        last_p, value, gradient = cache['last']
        if not np.array_equal(last_p, p):
            value, gradient = _discrete_objective(p, *args)
        run.record(len(run.history), p, float(intermediate_result.fun), gradient)
        if run.stalled():
            raise StopIteration

    result = minimize(fun, p0 / scale, method='BFGS', jac=True, callback=callback,
                      options={'maxiter': config.max_iters, 'gtol': config.gradient_tolerance, 'norm': np.inf})
    logger.info("start %d: %s after %d iteration(s), loss %.6g", start, result.message, result.nit, result.fun)
    return run


def _stability_report(model, init_model, network):
    eigenvalues = np.linalg.eigvals(model.A) if model.n_ivars else np.zeros(0, dtype=complex)
    closed_loop = linearize_closed_loop(model, network) if network is not None else None
    return {
        'eigenvalues': [complex(value) for value in eigenvalues],
        'max_real': float(np.max(eigenvalues.real)) if eigenvalues.size else float('-inf'),
        'closed_loop_eigenvalues': None if closed_loop is None else [complex(value) for value in closed_loop],
        'reflected': list(init_model.provenance.get('reflected', [])),
        'init_conversion': init_model.provenance.get('conversion'),
        'conversion': model.provenance.get('conversion'),
    }


def _starting_model(train, e_records, phases, records, dt, n, setpoints, config):
    """Subspace and fixed-pole starts; the one with the lower training loss wins."""
    candidates = [subspace_init(e_records, estimate_eta(train.values(), config.epsilon_v), n, config, setpoints),
                  fixed_pole_init(e_records, phases, n, config.integration, config.initial_state, setpoints)]
    losses = []
    for candidate in candidates:
        value, _ = _discrete_objective(pack_parameters(discretize(candidate, dt)), n, records, dt,
                                       config.integration, config.initial_state, config.regularization)
        losses.append(value if np.isfinite(value) else np.inf)
        logger.info("%s start for n_ivars = %d: training loss %.6g", candidate.provenance['init'], n, losses[-1])
    return candidates[int(np.argmin(losses))]


def identify(dataset, n_ivars=None, config=None, init=None, network=None, provenance=None):
    """Fit a normal form of order ``n_ivars`` to the training partition of ``dataset``.

    Starts from the better of the subspace and fixed-pole initializations (or from ``init``) plus
    ``config.restarts`` seeded perturbations of it. The returned model is the iterate with the
    best validation R2 over all starts, which may be the initialization itself. Entries of
    ``provenance`` are copied into its provenance.
    """
    config = config or IdentConfig()
    if n_ivars is not None:
        config = replace(config, n_ivars=n_ivars)
    n = config.n_ivars
    train, validation = dataset.partition('train'), dataset.partition('validation')
    if not train or not validation:
        raise ValueError("Identification needs non-empty train and validation partitions.")
    dt = next(iter(train.values())).dt
    if any(abs(series.dt - dt) > 1e-9 * dt for series in list(train.values()) + list(validation.values())):
        raise ValueError("All records must share one sampling interval.")
    setpoints = dataset.setpoints
    network = (stiff_bus(),) if network is None else network

    e_records = [error_series(series, setpoints) for series in train.values()]
    phases = [to_phase(series, config.epsilon_v) for series in train.values()]
    records = _training_arrays(e_records, phases)
    if init is None:
        init = _starting_model(train, e_records, phases, records, dt, n, setpoints, config)
    elif init.n_ivars != n:
        raise ValueError(f"The initial model has {init.n_ivars} internal variables, expected {n}.")
    p_init = pack_parameters(discretize(init, dt))

    rng = substream(config.seed, 'restarts')
    starts = [p_init] + [_perturb(p_init, config.perturbation_scale, rng) for _ in range(config.restarts)]
    runs = []
    for start, p0 in enumerate(starts):
        logger.info("Identifying n_ivars = %d, start %d of %d", n, start + 1, len(starts))
        try:
            runs.append(_optimize(p0, start, n, records, dt, setpoints, validation, config))
        except (np.linalg.LinAlgError, FloatingPointError) as error:
            logger.warning("start %d failed: %s", start, error)
    rows = [row for run in runs for row in run.rows]
    trace = pd.DataFrame(rows, columns=['start', 'iteration', 'loss', 'gradient_norm', 'validation_r2'])
    finite = [run for run in runs if run.best[1] is not None]
    if not finite:
        raise IdentificationError(f"All {len(starts)} start(s) diverged for n_ivars = {n}.", rows)

    best_run = max(finite, key=lambda run: run.best[0])
    score, p_best, scores, train_loss = best_run.best
    provenance = {**(provenance or {}), 'n_ivars': n, 'dt': dt, 'seed': config.seed,
                  'start': best_run.start, 'init': init.provenance.get('init', 'given'),
                  'initial_state': config.initial_state}
    if best_run.start == 0 and np.array_equal(p_best, p_init):
        model = HwNormalForm(init.A, init.B, init.C, init.D, setpoints, {**provenance, 'conversion': 'none'})
    else:
        discrete = unpack_parameters(p_best, n, dt, setpoints)
        model, method = to_continuous(discrete)
        model = HwNormalForm(model.A, model.B, model.C, model.D, setpoints, {**provenance, 'conversion': method})
    logger.info("n_ivars = %d: train loss %.6g, validation R2 %.6f", n, train_loss, score)
    return IdentResult(model=model, train_loss=train_loss, validation_r2=scores, trace=trace, init_model=init,
                       stability=_stability_report(model, init, network))


def _identify_job(job):
    dataset, n, config, provenance = job
    return identify(dataset, n, config, provenance=provenance)


def select_order(scores, epsilon_select=EPSILON_SELECT):
    best = max(scores.values())
    return min(n for n, score in scores.items() if score >= best - epsilon_select)


def order_sweep(dataset, n_range, config=None, epsilon_select=EPSILON_SELECT, workers=1, provenance=None):
    orders = sorted(set(int(n) for n in n_range))
    if not orders:
        raise ValueError("The order range is empty.")
    config = config or IdentConfig()
    jobs = [(dataset, n, config, provenance) for n in orders]
    if workers > 1 and len(orders) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_identify_job, jobs))
    else:
        results = [_identify_job(job) for job in jobs]
    scores = {result.n_ivars: result.validation_score for result in results}
    selected = select_order(scores, epsilon_select)
    logger.info("Order sweep %s: selected n_ivars = %d", orders, selected)
    return results, selected
