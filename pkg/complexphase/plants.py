"""Reference grid-forming inverter simulators.

Two outer-loop controllers (droop and dispatchable virtual oscillator) drive an ideal voltage
source through a first-order actuation lag ``tau_act`` that stands in for the cascaded inner
loops. Networks are algebraic: the terminal current is an explicit function of the terminal
voltages and of the slack angle. Everything is per-unit in a global dq frame rotating at
``omega_frame``; angles are relative to that frame.
"""
import cmath
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import root

from .exceptions import IntegrationError, NumericalError
from .signal import EPSILON_V, OMEGA0, DqSeries

logger = logging.getLogger(__name__)

NETWORK_KINDS = ('stiff-bus', 'resistive-load', 'line')
DEFAULT_LINE_IMPEDANCE = 0.01 + 0.1j
DEFAULT_DT_SIM = 5e-5

_TIME_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DroopParams:
    K_P: float = 0.02 * OMEGA0
    K_Q: float = 0.05
    tau_P: float = 0.05
    tau_Q: float = 0.05
    tau_act: float = 0.002
    P_set: float = 0.5
    Q_set: float = 0.0
    v_set: float = 1.0
    omega_set: float = OMEGA0

    def __post_init__(self):
        if self.tau_P <= 0 or self.tau_Q <= 0:
            raise ValueError("The power filter time constants tau_P and tau_Q must be positive.")
        if self.tau_act < 0:
            raise ValueError("The actuation lag tau_act cannot be negative.")
        if self.v_set <= 0:
            raise ValueError("The voltage setpoint v_set must be positive.")

    @property
    def slowest_time_constant(self):
        return max(self.tau_P, self.tau_Q, self.tau_act)


@dataclass(frozen=True)
class DvocParams:
    eta_gain: float = 20.0
    alpha_gain: float = 10.0
    kappa: float = math.pi / 2
    tau_act: float = 0.002
    P_set: float = 0.5
    Q_set: float = 0.0
    v_set: float = 1.0
    omega_set: float = OMEGA0

    def __post_init__(self):
        if self.eta_gain <= 0 or self.alpha_gain <= 0:
            raise ValueError("The dVOC gains eta_gain and alpha_gain must be positive.")
        if self.tau_act < 0:
            raise ValueError("The actuation lag tau_act cannot be negative.")
        if self.v_set <= 0:
            raise ValueError("The voltage setpoint v_set must be positive.")

    @property
    def slowest_time_constant(self):
        return max(1.0 / self.eta_gain, 1.0 / self.alpha_gain, self.tau_act)


@dataclass(frozen=True)
class NetworkElement:
    kind: str
    name: str = ''
    slack_magnitude: float = 1.0
    slack_frequency: float = 0.0
    admittance: complex = 1 / DEFAULT_LINE_IMPEDANCE
    conductance: float = 0.0
    closed: bool = True

    def __post_init__(self):
        if self.kind not in NETWORK_KINDS:
            raise ValueError(f"Network element kind should be one of {', '.join(NETWORK_KINDS)}.")
        if self.kind == 'resistive-load' and not self.conductance > 0:
            raise ValueError("A resistive load needs a positive conductance G.")
        if self.kind in ('stiff-bus', 'line') and not abs(self.admittance) > 0:
            raise ValueError("A line admittance must be non-zero.")
        if self.kind == 'stiff-bus' and not self.slack_magnitude > 0:
            raise ValueError("The slack voltage magnitude must be positive.")


@dataclass(frozen=True)
class MicroGrid:
    """Load bus fed by a stiff bus through a breaker; inverter 1 hangs off the load bus and
    inverter 2 off inverter 1."""
    feeder: NetworkElement
    load: NetworkElement
    line_1: NetworkElement
    line_12: NetworkElement

    def __post_init__(self):
        if self.feeder.kind != 'stiff-bus' or self.load.kind != 'resistive-load':
            raise ValueError("A micro-grid needs a stiff-bus feeder and a resistive load.")
        if self.line_1.kind != 'line' or self.line_12.kind != 'line':
            raise ValueError("Micro-grid inverters must be connected through lines.")

    @property
    def elements(self):
        return (self.feeder, self.load, self.line_1, self.line_12)


@dataclass(frozen=True)
class Event:
    time: float
    element: str
    field: str
    value: float


@dataclass(frozen=True)
class Plant:
    kind: str
    params: object

    def __post_init__(self):
        if self.kind == 'droop' and not isinstance(self.params, DroopParams):
            raise ValueError("A droop plant needs DroopParams.")
        if self.kind == 'dvoc' and not isinstance(self.params, DvocParams):
            raise ValueError("A dVOC plant needs DvocParams.")
        if self.kind not in ('droop', 'dvoc'):
            raise ValueError("Plant kind should be either 'droop' or 'dvoc'.")

    @property
    def state_names(self):
        return _STATE_NAMES[self.kind]


@dataclass(frozen=True, eq=False)
class PlantState:
    names: tuple
    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if len(self.names) != np.size(self.x):
            raise ValueError("Plant state names and values do not match.")

    def __getitem__(self, name):
        return self.x[self.names.index(name)]


_STATE_NAMES = {
    'droop': ('delta', 'P_bar', 'Q_bar', 'v_d', 'v_q'),
    'dvoc': ('u_d', 'u_q', 'v_d', 'v_q'),
}


def droop_plant(**params):
    return Plant('droop', DroopParams(**params))


def dvoc_plant(**params):
    return Plant('dvoc', DvocParams(**params))


def stiff_bus(magnitude=1.0, frequency=0.0, impedance=DEFAULT_LINE_IMPEDANCE, name='grid'):
    return NetworkElement('stiff-bus', name=name, slack_magnitude=magnitude, slack_frequency=frequency,
                          admittance=1 / complex(impedance))


def resistive_load(conductance, name='load'):
    return NetworkElement('resistive-load', name=name, conductance=conductance)


def line(impedance, name='line'):
    return NetworkElement('line', name=name, admittance=1 / complex(impedance))


def _droop_reference(x, p):
    v_ref = p.v_set + p.K_Q * (p.Q_set - x[2])
    return v_ref * cmath.exp(1j * x[0])


def _droop_voltage(x, p):
    if p.tau_act > 0:
        return complex(x[3], x[4])
    return _droop_reference(x, p)


def _droop_derivative(x, i, p, omega_frame):
    v = _droop_voltage(x, p)
    s = v * i.conjugate()
    dx = np.zeros(5)
    dx[0] = (p.omega_set - omega_frame) + p.K_P * (p.P_set - x[1])
    dx[1] = (s.real - x[1]) / p.tau_P
    dx[2] = (s.imag - x[2]) / p.tau_Q
    if p.tau_act > 0:
        dv = (_droop_reference(x, p) - v) / p.tau_act
        dx[3] = dv.real
        dx[4] = dv.imag
    return dx


def droop_rhs(state, terminal_current, params, omega_frame=OMEGA0):
    return _droop_derivative(np.asarray(state.x, dtype=float), complex(terminal_current), params, omega_frame)


def _dvoc_voltage(x, p):
    if p.tau_act > 0:
        return complex(x[2], x[3])
    return complex(x[0], x[1])


def _dvoc_derivative(x, i, p, omega_frame, t=0.0):
    u = complex(x[0], x[1])
    amplitude_squared = u.real * u.real + u.imag * u.imag
    if amplitude_squared <= EPSILON_V ** 2:
        raise IntegrationError("dVOC oscillator amplitude underflow", t)
    v_set_squared = p.v_set ** 2
    du = (1j * (p.omega_set - omega_frame) * u
          + p.eta_gain * cmath.exp(1j * p.kappa) * (complex(p.P_set, -p.Q_set) * u / v_set_squared - i)
          + p.alpha_gain * (v_set_squared - amplitude_squared) / v_set_squared * u)
    dx = np.zeros(4)
    dx[0] = du.real
    dx[1] = du.imag
    if p.tau_act > 0:
        dv = (u - complex(x[2], x[3])) / p.tau_act
        dx[2] = dv.real
        dx[3] = dv.imag
    return dx


def dvoc_rhs(state, terminal_current, params, omega_frame=OMEGA0):
    return _dvoc_derivative(np.asarray(state.x, dtype=float), complex(terminal_current), params, omega_frame,
                            state.t)


def terminal_voltage(plant, x):
    if plant.kind == 'droop':
        return _droop_voltage(x, plant.params)
    return _dvoc_voltage(x, plant.params)


def plant_rhs(plant, state, terminal_current, omega_frame=OMEGA0):
    if plant.kind == 'droop':
        return droop_rhs(state, terminal_current, plant.params, omega_frame)
    return dvoc_rhs(state, terminal_current, plant.params, omega_frame)


def _plant_derivative(plant, x, i, omega_frame, t):
    if plant.kind == 'droop':
        return _droop_derivative(x, i, plant.params, omega_frame)
    return _dvoc_derivative(x, i, plant.params, omega_frame, t)


def couple(voltage, element, slack_angle=0.0, remote_voltage=0j):
    if not element.closed:
        return 0j
    if element.kind == 'stiff-bus':
        v_slack = element.slack_magnitude * cmath.exp(1j * slack_angle)
        return (voltage - v_slack) * element.admittance
    if element.kind == 'resistive-load':
        return voltage * element.conductance
    return (voltage - remote_voltage) * element.admittance


def _load_bus_voltage(grid, v1, slack_angle):
    y_feeder = grid.feeder.admittance if grid.feeder.closed else 0j
    g_load = grid.load.conductance if grid.load.closed else 0.0
    y_line = grid.line_1.admittance if grid.line_1.closed else 0j
    v_slack = grid.feeder.slack_magnitude * cmath.exp(1j * slack_angle)
    denominator = g_load + y_feeder + y_line
    if denominator == 0:
        return 0j
    return (y_feeder * v_slack + y_line * v1) / denominator


def network_currents(network, voltages, slack_angle=0.0):
    if isinstance(network, MicroGrid):
        if len(voltages) != 2:
            raise ValueError("A micro-grid connects exactly two inverters.")
        v1, v2 = voltages
        v_load = _load_bus_voltage(network, v1, slack_angle)
        i2 = couple(v2, network.line_12, remote_voltage=v1)
        i1 = couple(v1, network.line_1, remote_voltage=v_load) - i2
        return [i1, i2]
    if len(voltages) != 1:
        raise ValueError("A terminal network connects exactly one inverter.")
    v = voltages[0]
    return [sum((couple(v, element, slack_angle) for element in network), 0j)]


def microgrid_import(grid, voltages, slack_angle=0.0):
    if not grid.feeder.closed:
        return 0.0
    v_load = _load_bus_voltage(grid, voltages[0], slack_angle)
    v_slack = grid.feeder.slack_magnitude * cmath.exp(1j * slack_angle)
    i_import = (v_slack - v_load) * grid.feeder.admittance
    return (v_slack * i_import.conjugate()).real


def _elements(network):
    return network.elements if isinstance(network, MicroGrid) else tuple(network)


def slack_frequency(network):
    for element in _elements(network):
        if element.kind == 'stiff-bus' and element.closed:
            return element.slack_frequency
    return 0.0


def has_stiff_bus(network):
    return any(element.kind == 'stiff-bus' and element.closed for element in _elements(network))


def apply_event(network, event):
    if isinstance(network, MicroGrid):
        for attribute in ('feeder', 'load', 'line_1', 'line_12'):
            element = getattr(network, attribute)
            if element.name == event.element:
                return replace(network, **{attribute: replace(element, **{event.field: event.value})})
    else:
        elements = list(network)
        for k, element in enumerate(elements):
            if element.name == event.element:
                elements[k] = replace(element, **{event.field: event.value})
                return tuple(elements)
    raise ValueError(f"The network has no element named '{event.element}'.")


def _rk4_interval(fun, x, t_start, t_end, dt):
    span = t_end - t_start
    if span <= _TIME_TOLERANCE * max(dt, abs(t_end)):
        return x
    n_steps = max(1, int(math.ceil(span / dt - 1e-9)))
    h = span / n_steps
    t = t_start
    for _ in range(n_steps):
        k1 = fun(t, x)
        k2 = fun(t + h / 2, x + (h / 2) * k1)
        k3 = fun(t + h / 2, x + (h / 2) * k2)
        k4 = fun(t + h, x + h * k3)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
        if not np.all(np.isfinite(x)):
            raise IntegrationError("Non-finite state during integration", t)
    return x


def solve_fixed_step(fun, x0, t_span, dt, dt_record=None, events=()):
    """Fixed-step 4th-order Runge-Kutta integration with discontinuous switches.

    ``events`` is a time-sorted sequence of ``(time, fun)`` pairs; from ``time`` on the
    right-hand side is replaced by ``fun`` and integration restarts there, so no step ever
    straddles a switch. States are recorded every ``dt_record`` seconds; a switch that falls
    on a record instant is applied before that sample is taken.
    """
    t0, t1 = (float(t) for t in t_span)
    dt_record = dt if dt_record is None else dt_record
    if not dt > 0 or not dt_record > 0:
        raise ValueError("The integration and record steps must be positive.")
    if dt > dt_record * (1 + _TIME_TOLERANCE):
        raise ValueError("The integration step dt_sim must not exceed the record step dt_record.")
    if t1 < t0:
        raise ValueError("The time span must be increasing.")
    times = [time for time, _ in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("Events must be sorted by time.")

    n_record = int(math.floor((t1 - t0) / dt_record + 1e-9)) + 1
    t_record = t0 + dt_record * np.arange(n_record)
    x = np.array(x0, dtype=float)
    states = np.empty((n_record, x.size))
    segments = np.empty(n_record, dtype=int)

    pending = list(events)
    active = fun
    segment = 0
    tolerance = _TIME_TOLERANCE * max(dt_record, 1.0)
    for k, t_k in enumerate(t_record):
        if k > 0:
            t_start = t_record[k - 1]
            while pending and pending[0][0] < t_k - tolerance:
                t_event, next_fun = pending.pop(0)
                x = _rk4_interval(active, x, t_start, t_event, dt)
                active, segment, t_start = next_fun, segment + 1, max(t_event, t_start)
            x = _rk4_interval(active, x, t_start, t_k, dt)
        while pending and pending[0][0] <= t_k + tolerance:
            active = pending.pop(0)[1]
            segment += 1
        states[k] = x
        segments[k] = segment
    return {'t': t_record, 'x': states, 'segment': segments}


def _layout(plants):
    slices, start = [], 0
    for plant in plants:
        size = len(plant.state_names)
        slices.append(slice(start, start + size))
        start += size
    return slices, start


def _system_fun(plants, slices, network, omega_frame):
    slack_rate = 2 * math.pi * slack_frequency(network)

    def fun(t, x):
        psi = x[-1]
        voltages = [terminal_voltage(plant, x[s]) for plant, s in zip(plants, slices)]
        currents = network_currents(network, voltages, psi)
        dx = np.empty_like(x)
        for plant, s, i in zip(plants, slices, currents):
            dx[s] = _plant_derivative(plant, x[s], i, omega_frame, t)
        dx[-1] = slack_rate
        return dx

    return fun


def _reduced_guess(plant, gauge_free):
    p = plant.params
    if plant.kind == 'droop':
        return [p.P_set, p.Q_set] if gauge_free else [0.0, p.P_set, p.Q_set]
    return [p.v_set] if gauge_free else [p.v_set, 0.0]


def _reduced_state(plant, z, gauge_free):
    p = plant.params
    if plant.kind == 'droop':
        delta, p_bar, q_bar = (0.0, *z) if gauge_free else z
        v = (p.v_set + p.K_Q * (p.Q_set - q_bar)) * cmath.exp(1j * delta)
        return np.array([delta, p_bar, q_bar, v.real, v.imag])
    u = complex(z[0], 0.0) if gauge_free else complex(z[0], z[1])
    return np.array([u.real, u.imag, u.real, u.imag])


def _reduced_residual(plant, dx, gauge_free):
    if plant.kind == 'droop':
        return dx[1:3] if gauge_free else dx[0:3]
    return dx[0:1] if gauge_free else dx[0:2]


def plant_equilibrium(plants, network, slack_angle=0.0, omega_frame=OMEGA0, tolerance=1e-9):
    """State vector at which every plant is at rest against ``network``.

    Without a closed stiff bus the network is rotation invariant; the angle is then pinned to
    zero and only the magnitude/power states are balanced (the frequency may stay offset).
    """
    plants = _as_plants(plants)
    slices, size = _layout(plants)
    gauge_free = not has_stiff_bus(network)
    sizes = [len(_reduced_guess(plant, gauge_free)) for plant in plants]
    offsets = np.cumsum([0] + sizes)

    def expand(z):
        x = np.zeros(size + 1)
        x[-1] = slack_angle
        for plant, s, a, b in zip(plants, slices, offsets[:-1], offsets[1:]):
            x[s] = _reduced_state(plant, z[a:b], gauge_free)
        return x

    fun = _system_fun(plants, slices, network, omega_frame)

    def residual(z):
        x = expand(z)
        dx = fun(0.0, x)
        return np.concatenate([_reduced_residual(plant, dx[s], gauge_free) for plant, s in zip(plants, slices)])

    guess = np.concatenate([_reduced_guess(plant, gauge_free) for plant in plants])
    solution = root(residual, guess, method='hybr', options={'xtol': 1e-14})
    worst = float(np.max(np.abs(residual(solution.x))))
    if worst > tolerance:
        raise NumericalError(f"No plant equilibrium found against the network (residual {worst:.3g}).")
    return expand(solution.x)[:-1]


def _as_plants(plants):
    return [plants] if isinstance(plants, Plant) else list(plants)


def simulate_plants(plants, network, t_span, dt_sim=DEFAULT_DT_SIM, dt_record=None, events=(), x0=None,
                    slack_angle=0.0, omega_frame=OMEGA0):
    """Integrate one or more plants against a network and an event script.

    Returns a dict with the record times ``t``, terminal ``voltages`` and ``currents``
    (one row per plant), the plant ``states`` and the slack angle ``psi``.
    """
    plants = _as_plants(plants)
    slices, size = _layout(plants)
    dt_record = dt_sim if dt_record is None else dt_record
    if x0 is None:
        x0 = plant_equilibrium(plants, network, slack_angle, omega_frame)
    x_init = np.concatenate([np.asarray(x0, dtype=float), [slack_angle]])
    if x_init.size != size + 1:
        raise ValueError(f"The initial state needs {size} entries for the given plants.")

    events = sorted(events, key=lambda e: e.time)
    networks = [network]
    for event in events:
        networks.append(apply_event(networks[-1], event))
    switches = [(event.time, _system_fun(plants, slices, net, omega_frame)) for event, net in zip(events, networks[1:])]

    logger.debug("Integrating %d plant(s) over %.3f s with dt_sim = %g s", len(plants), t_span[1] - t_span[0], dt_sim)
    run = solve_fixed_step(_system_fun(plants, slices, network, omega_frame), x_init, t_span, dt_sim, dt_record,
                           switches)

    states = run['x']
    n = states.shape[0]
    voltages = np.empty((len(plants), n), dtype=complex)
    currents = np.empty((len(plants), n), dtype=complex)
    for k in range(n):
        x = states[k]
        v = [terminal_voltage(plant, x[s]) for plant, s in zip(plants, slices)]
        voltages[:, k] = v
        currents[:, k] = network_currents(networks[run['segment'][k]], v, x[-1])
    return {
        't': run['t'],
        'voltages': voltages,
        'currents': currents,
        'states': [states[:, s] for s in slices],
        'psi': states[:, -1],
        'networks': networks,
        'segment': run['segment'],
    }


def integrate(plants, network, t_span, dt_sim=DEFAULT_DT_SIM, dt_record=None, events=(), x0=None, record=0,
              slack_angle=0.0, omega_frame=OMEGA0):
    run = simulate_plants(plants, network, t_span, dt_sim, dt_record, events, x0, slack_angle, omega_frame)
    dt_record = dt_sim if dt_record is None else dt_record
    return DqSeries(t=run['t'], v=run['voltages'][record], i=run['currents'][record], dt=dt_record)
