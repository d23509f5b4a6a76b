"""Excitation protocols, out-of-distribution scenarios and the partitioned dataset.

A scenario is a pure description: the network shape, the element values set at t = 0 and a
time-sorted list of events. Nothing is simulated until ``build_dataset``.
"""
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .normalform import HwNormalForm, Setpoints, discretize, equilibrium, error_coordinates, simulate_closed_loop
from .plants import (DEFAULT_DT_SIM, DEFAULT_LINE_IMPEDANCE, Event, MicroGrid, Plant, apply_event, integrate, line,
                     resistive_load, stiff_bus)
from .signal import downsample

logger = logging.getLogger(__name__)

SCENARIO_CLASSES = ('magnitude-step', 'frequency-step', 'rapid-small-changes')
OOD_SCENARIOS = ('ood-load-step', 'ood-islanding')
NETWORK_SHAPES = ('stiff-bus', 'resistive-load', 'microgrid')
PARTITIONS = ('train', 'validation', 'test')
DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)
DEFAULT_TARGET_DT = 1e-3
DEFAULT_DT_RECORD = 5e-5
EXCITATION_FLOOR = 1e-8


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str
    duration: float
    events: tuple = ()
    network: str = 'stiff-bus'
    setup: tuple = ()
    seed: int = None

    def __post_init__(self):
        if self.network not in NETWORK_SHAPES:
            raise ValueError(f"Scenario network should be one of {', '.join(NETWORK_SHAPES)}.")
        if not self.duration > 0:
            raise ValueError(f"Scenario '{self.name}' needs a positive duration.")
        events = tuple(sorted(self.events, key=lambda event: event.time))
        for event in events:
            if not 0 <= event.time <= self.duration:
                raise ValueError(f"Event at t = {event.time} s lies outside scenario '{self.name}'.")
        for event in events + tuple(self.setup):
            if event.field in ('slack_magnitude', 'conductance') and not event.value > 0:
                raise ValueError(f"Scenario '{self.name}' sets a non-positive {event.field}.")
        object.__setattr__(self, 'events', events)
        object.__setattr__(self, 'setup', tuple(self.setup))

    def to_dict(self):
        def encode(event):
            return {'time': event.time, 'element': event.element, 'field': event.field, 'value': event.value}
        return {
            'name': self.name,
            'kind': self.kind,
            'duration': self.duration,
            'network': self.network,
            'seed': self.seed,
            'setup': [encode(event) for event in self.setup],
            'events': [encode(event) for event in self.events],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(name=data['name'], kind=data['kind'], duration=data['duration'], network=data['network'],
                   seed=data.get('seed'), setup=tuple(Event(**event) for event in data.get('setup', ())),
                   events=tuple(Event(**event) for event in data.get('events', ())))


def _cycle_signs(cycles, seed):
    if seed is None:
        return [1] * cycles
    rng = np.random.default_rng(seed)
    return list(rng.choice([-1, 1], size=cycles))


def _step_protocol(nominal, step, cycles, seed):
    values = []
    for sign in _cycle_signs(cycles, seed):
        values += [nominal, nominal + sign * step, nominal, nominal - sign * step]
    return values + [nominal]


def _piecewise_events(values, dwell, element, field):
    events = []
    for k in range(1, len(values)):
        if values[k] != values[k - 1]:
            events.append(Event(k * dwell, element, field, float(values[k])))
    return tuple(events)


def _warn_short_dwell(dwell, settling_time_constant):
    if settling_time_constant is not None and dwell < 10 * settling_time_constant:
        warnings.warn(f"dwell = {dwell} s is shorter than 10x the slowest plant time constant "
                      f"({settling_time_constant} s); segments may not reach steady state.", RuntimeWarning,
                      stacklevel=3)


def magnitude_step_scenario(levels=None, dwell=2.0, seed=None, cycles=5, step=0.05, guard=(0.8, 1.2),
                            settling_time_constant=None, name='magnitude-step'):
    """Slack-bus voltage magnitude stepping through ``levels`` (pu), ``dwell`` seconds each.

    Without explicit levels the protocol is ``cycles`` rounds of 1 -> 1+step -> 1 -> 1-step;
    a seed randomizes the direction of each round.
    """
    if levels is None:
        levels = _step_protocol(1.0, step, cycles, seed)
    levels = [float(level) for level in levels] or [1.0]
    low, high = guard
    for level in levels:
        if not low <= level <= high:
            raise ValueError(f"Magnitude level {level} pu lies outside the guard band [{low}, {high}].")
    _warn_short_dwell(dwell, settling_time_constant)
    return Scenario(name=name, kind='magnitude-step', duration=dwell * len(levels),
                    events=_piecewise_events(levels, dwell, 'grid', 'slack_magnitude'),
                    setup=(Event(0.0, 'grid', 'slack_magnitude', levels[0]),), seed=seed)


def frequency_step_scenario(deviations=None, dwell=2.0, seed=None, cycles=5, step=0.2, guard=(-1.0, 1.0),
                            settling_time_constant=None, name='frequency-step'):
    if deviations is None:
        deviations = _step_protocol(0.0, step, cycles, seed)
    deviations = [float(deviation) for deviation in deviations] or [0.0]
    low, high = guard
    for deviation in deviations:
        if not low <= deviation <= high:
            raise ValueError(f"Frequency deviation {deviation} Hz lies outside the guard band [{low}, {high}].")
    _warn_short_dwell(dwell, settling_time_constant)
    return Scenario(name=name, kind='frequency-step', duration=dwell * len(deviations),
                    events=_piecewise_events(deviations, dwell, 'grid', 'slack_frequency'),
                    setup=(Event(0.0, 'grid', 'slack_frequency', deviations[0]),), seed=seed)


def rapid_small_changes_scenario(duration=60.0, step_period=1.0, mag_range=0.01, freq_range=0.1, seed=0,
                                 settling_time=2.0, name='rapid-small-changes'):
    """Seeded piecewise-constant random slack magnitude and frequency.

    A new (magnitude, frequency) pair is drawn uniformly every ``step_period`` seconds; only
    values that actually change produce events.
    """
    if not step_period > 0:
        raise ValueError("The step period must be positive.")
    if step_period > settling_time:
        warnings.warn(f"step_period = {step_period} s exceeds the settling time ({settling_time} s); the "
                      f"system will reach steady state between changes.", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    n_steps = int(np.ceil(duration / step_period - 1e-9))
    magnitudes = 1.0 + rng.uniform(-mag_range, mag_range, size=n_steps) if mag_range > 0 else np.ones(n_steps)
    frequencies = rng.uniform(-freq_range, freq_range, size=n_steps) if freq_range > 0 else np.zeros(n_steps)
    magnitudes[0], frequencies[0] = 1.0, 0.0
    events = []
    for k in range(1, n_steps):
        t = k * step_period
        if magnitudes[k] != magnitudes[k - 1]:
            events.append(Event(t, 'grid', 'slack_magnitude', float(magnitudes[k])))
        if frequencies[k] != frequencies[k - 1]:
            events.append(Event(t, 'grid', 'slack_frequency', float(frequencies[k])))
    return Scenario(name=name, kind='rapid-small-changes', duration=duration, events=tuple(events), seed=seed)


def ood_load_step_scenario(conductances=(0.5, 0.6, 0.7, 0.8), dwell=2.0, name='ood-load-step'):
    return Scenario(name=name, kind='ood-load-step', duration=dwell * len(conductances), network='resistive-load',
                    setup=(Event(0.0, 'load', 'conductance', float(conductances[0])),),
                    events=_piecewise_events(list(conductances), dwell, 'load', 'conductance'))


def ood_islanding_scenario(load=1.2, open_time=2.0, duration=6.0, name='ood-islanding'):
    return Scenario(name=name, kind='ood-islanding', duration=duration, network='microgrid',
                    setup=(Event(0.0, 'load', 'conductance', float(load)),),
                    events=(Event(open_time, 'grid', 'closed', False),))


def scenario_suite(classes=SCENARIO_CLASSES, instances_per_class=3, seeds=None, settling_time_constant=None,
                   overrides=None):
    """``instances_per_class`` seeded instances of every class, named ``<class>-<k>``."""
    builders = {
        'magnitude-step': magnitude_step_scenario,
        'frequency-step': frequency_step_scenario,
        'rapid-small-changes': rapid_small_changes_scenario,
    }
    overrides = overrides or {}
    scenarios = []
    for kind in classes:
        if kind not in builders:
            raise ValueError(f"Scenario class should be one of {', '.join(SCENARIO_CLASSES)}.")
        options = dict(overrides.get(kind, {}))
        if kind != 'rapid-small-changes' and settling_time_constant is not None:
            options.setdefault('settling_time_constant', settling_time_constant)
        for k in range(instances_per_class):
            seed = seeds(kind, k) if seeds is not None else k
            scenarios.append(builders[kind](seed=seed, name=f"{kind}-{k:02d}", **options))
    return scenarios


def build_network(scenario, line_impedance=DEFAULT_LINE_IMPEDANCE):
    if scenario.network == 'stiff-bus':
        network = (stiff_bus(impedance=line_impedance, name='grid'),)
    elif scenario.network == 'resistive-load':
        network = (resistive_load(1.0, name='load'),)
    else:
        network = MicroGrid(feeder=stiff_bus(impedance=line_impedance, name='grid'), load=resistive_load(1.0),
                            line_1=line(line_impedance, name='line_1'), line_12=line(line_impedance, name='line_12'))
    for event in scenario.setup:
        network = apply_event(network, event)
    return network


def plant_setpoints(plant):
    if isinstance(plant, HwNormalForm):
        return plant.setpoints
    p = plant.params
    return Setpoints(P=p.P_set, Q=p.Q_set, v=p.v_set)


def simulate_scenario(scenario, plant, dt_sim=DEFAULT_DT_SIM, dt_record=DEFAULT_DT_RECORD,
                      target_dt=DEFAULT_TARGET_DT, line_impedance=DEFAULT_LINE_IMPEDANCE):
    """Terminal dq trajectory of ``plant`` (first inverter on a micro-grid) at ``target_dt``."""
    network = build_network(scenario, line_impedance)
    t_span = (0.0, scenario.duration)
    if isinstance(plant, HwNormalForm):
        if isinstance(network, MicroGrid):
            raise ValueError("A normal-form model can only be replayed against a single-terminal network.")
        model = discretize(plant, target_dt)
        point = equilibrium(plant, network)
        theta0, x0 = point if point is not None else (complex(np.log(plant.setpoints.v)), None)
        return simulate_closed_loop(model, network, t_span, theta0, x0, scenario.events)
    plants = [plant, plant] if isinstance(network, MicroGrid) else [plant]
    series = integrate(plants, network, t_span, dt_sim, dt_record, scenario.events)
    return downsample(series, target_dt)


def _simulate_job(job):
    scenario, plant, options = job
    logger.info("Simulating scenario %s (%.1f s)", scenario.name, scenario.duration)
    return simulate_scenario(scenario, plant, **options)


def check_excitation(records, setpoints, floor=EXCITATION_FLOOR):
    """Sample variance of each error channel per record; warns for channels below ``floor``."""
    variances = {}
    for name, series in records.items():
        e = error_coordinates(series.v, series.i, setpoints)
        variances[name] = np.var(e, axis=0, ddof=1) if len(series) > 1 else np.zeros(3)
        starved = [channel for channel, value in zip(('P', 'Q', 'nu'), variances[name]) if value <= floor]
        if starved:
            warnings.warn(f"Record '{name}' barely excites channel(s) {', '.join(starved)} "
                          f"(variance <= {floor:g}).", RuntimeWarning, stacklevel=2)
    return variances


def validate_fractions(fractions):
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("Split fractions must be three non-negative numbers summing to 1.")
    return fractions


def _partition_counts(size, fractions, names=None):
    """Largest-remainder counts; of two equal remainders the partition holding the smaller record name wins.

    ``names`` is the order in which records are dealt to train, validation and test.
    """
    positive = fractions > 0
    if size < positive.sum():
        raise ValueError(f"Cannot stratify {size} record(s) over {int(positive.sum())} partition(s).")
    counts = positive.astype(int)
    remaining = size - counts.sum()
    demand = np.maximum(fractions * size - counts, 0.0)
    if remaining == 0:
        return counts
    target = demand * remaining / demand.sum() if demand.sum() > 0 else fractions * remaining
    floors = np.floor(target + 1e-9).astype(int)
    counts += floors
    leftover = remaining - floors.sum()
    names = list(names) if names is not None else [f"{k:09d}" for k in range(size)]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    first = [min(names[offsets[j]:offsets[j + 1]], default='') for j in range(3)]
    order = sorted(range(3), key=lambda j: (-round(float(target[j] - floors[j]), 9), first[j]))
    for j in order[:leftover]:
        counts[j] += 1
    return counts


def split_records(names_by_class, fractions=DEFAULT_FRACTIONS, rng=None):
    fractions = validate_fractions(fractions)
    rng = np.random.default_rng(0) if rng is None else rng
    split = {}
    for kind in sorted(names_by_class):
        names = sorted(names_by_class[kind])
        shuffled = [names[k] for k in rng.permutation(len(names))]
        counts = _partition_counts(len(names), fractions, shuffled)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for partition, start, stop in zip(PARTITIONS, offsets[:-1], offsets[1:]):
            for name in shuffled[start:stop]:
                split[name] = partition
    return split


@dataclass(frozen=True, eq=False)
class Dataset:
    records: dict
    scenarios: dict
    split: dict
    setpoints: Setpoints
    ood: dict = None
    seed: int = None

    def __post_init__(self):
        ood = dict(self.ood or {})
        if set(self.split) != set(self.records):
            raise ValueError("Every record must be assigned to exactly one partition.")
        unknown = set(self.split.values()) - set(PARTITIONS)
        if unknown:
            raise ValueError(f"Unknown partition(s): {', '.join(sorted(unknown))}.")
        if set(ood) & set(self.records):
            raise ValueError("Out-of-distribution records must be disjoint from the partitions.")
        object.__setattr__(self, 'ood', ood)

    def partition(self, name):
        if name == 'ood':
            return dict(sorted(self.ood.items()))
        if name not in PARTITIONS:
            raise ValueError(f"Partition should be one of {', '.join(PARTITIONS + ('ood',))}.")
        return {record: self.records[record] for record in sorted(self.records) if self.split[record] == name}

    @property
    def counts(self):
        return {partition: len(self.partition(partition)) for partition in PARTITIONS}


def build_dataset(scenarios, plant, fractions=DEFAULT_FRACTIONS, seed=0, dt_sim=DEFAULT_DT_SIM,
                  dt_record=DEFAULT_DT_RECORD, target_dt=DEFAULT_TARGET_DT, ood=(), workers=1, split_rng=None,
                  excitation_floor=EXCITATION_FLOOR, line_impedance=DEFAULT_LINE_IMPEDANCE):
    """Simulate every scenario against ``plant`` (a ``Plant`` or an ``HwNormalForm``) and split.

    ``split_rng`` defaults to a generator seeded with ``seed``. Records are simulated in
    worker processes when ``workers > 1``; results keep the scenario order.
    """
    if not isinstance(plant, (Plant, HwNormalForm)):
        raise ValueError("The plant must be a droop/dVOC Plant or an HwNormalForm.")
    scenarios, ood = list(scenarios), list(ood)
    names = [scenario.name for scenario in scenarios + ood]
    if len(set(names)) != len(names):
        raise ValueError("Scenario names must be unique.")
    options = {'dt_sim': dt_sim, 'dt_record': dt_record, 'target_dt': target_dt, 'line_impedance': line_impedance}
    jobs = [(scenario, plant, options) for scenario in scenarios + ood]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_simulate_job, jobs))
    else:
        results = [_simulate_job(job) for job in jobs]

    records = {scenario.name: series for scenario, series in zip(scenarios, results)}
    ood_records = {scenario.name: series for scenario, series in zip(ood, results[len(scenarios):])}
    names_by_class = {}
    for scenario in scenarios:
        names_by_class.setdefault(scenario.kind, []).append(scenario.name)
    rng = np.random.default_rng(seed) if split_rng is None else split_rng
    split = split_records(names_by_class, fractions, rng)

    setpoints = plant_setpoints(plant)
    check_excitation({name: records[name] for name in sorted(records) if split[name] == 'train'}, setpoints,
                     excitation_floor)
    logger.info("Dataset built: %d record(s), %d out-of-distribution", len(records), len(ood_records))
    return Dataset(records=records, scenarios={scenario.name: scenario for scenario in scenarios + ood},
                   split=split, setpoints=setpoints, ood=ood_records, seed=seed)
