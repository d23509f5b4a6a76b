"""TOML run configuration: defaults, validation, environment overrides and seed streams."""
import copy
import dataclasses
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import zlib
from pathlib import Path

import numpy as np

from .plants import DEFAULT_DT_SIM, DEFAULT_LINE_IMPEDANCE, DroopParams, DvocParams, Plant
from .scenarios import (DEFAULT_DT_RECORD, DEFAULT_FRACTIONS, DEFAULT_TARGET_DT, OOD_SCENARIOS, SCENARIO_CLASSES,
                        validate_fractions, ood_islanding_scenario, ood_load_step_scenario, scenario_suite)
from .signal import EPSILON_V, NOMINAL_FREQUENCY

PLANT_KINDS = ('droop', 'dvoc', 'normalform')
ENV_OUTPUT_DIR = 'COMPLEXPHASE_OUTPUT_DIR'
ENV_THREADS = 'COMPLEXPHASE_THREADS'

DEFAULTS = {
    'seed': 1,
    'output_dir': 'runs',
    'threads': 1,
    'plant': {
        'kind': 'droop',
        'droop': dataclasses.asdict(DroopParams()),
        'dvoc': dataclasses.asdict(DvocParams()),
        'normalform': {'model': ''},
    },
    'network': {'line_impedance': [DEFAULT_LINE_IMPEDANCE.real, DEFAULT_LINE_IMPEDANCE.imag]},
    'simulation': {
        'dt_sim': DEFAULT_DT_SIM,
        'dt_record': DEFAULT_DT_RECORD,
        'target_dt': DEFAULT_TARGET_DT,
        'nominal_frequency': NOMINAL_FREQUENCY,
        'epsilon_v': EPSILON_V,
    },
    'scenarios': {
        'classes': list(SCENARIO_CLASSES),
        'instances_per_class': 3,
        'magnitude-step': {'dwell': 2.0, 'cycles': 5, 'step': 0.05},
        'frequency-step': {'dwell': 2.0, 'cycles': 5, 'step': 0.2},
        'rapid-small-changes': {'duration': 60.0, 'step_period': 1.0, 'mag_range': 0.01, 'freq_range': 0.1},
        'ood': list(OOD_SCENARIOS),
        'ood-load-step': {'conductances': [0.5, 0.6, 0.7, 0.8], 'dwell': 2.0},
        'ood-islanding': {'load': 1.2, 'open_time': 2.0, 'duration': 6.0},
    },
    'split': {'fractions': list(DEFAULT_FRACTIONS)},
    'identify': {
        'n_ivars': 1,
        'max_iters': 2000,
        'gradient_tolerance': 1e-8,
        'loss_tolerance': 1e-12,
        'loss_window': 5,
        'restarts': 0,
        'perturbation_scale': 0.1,
        'hankel_rows': 20,
        'regularization': 0.0,
        'integration': 'trapezoidal',
        'initial_state': 'zero',
        'sweep': [1, 6],
        'epsilon_select': 0.002,
    },
    'closed_loop': {'scenario': 'ood-load-step', 'band': [0.5, 1.5]},
}


def substream(seed, name):
    """Independent generator for the named consumer of the root ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode('utf-8'))]))


def derive_seed(seed, name):
    return int(substream(seed, name).integers(2 ** 31))


def _check_type(value, default, field):
    if isinstance(default, bool):
        valid = isinstance(value, bool)
    elif isinstance(default, float):
        valid = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        valid = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, str):
        valid = isinstance(value, str)
    elif isinstance(default, list):
        valid = isinstance(value, list)
    else:
        valid = True
    if not valid:
        raise ValueError(f"Configuration field '{field}' should be of type {type(default).__name__}.")


def _merge(defaults, overrides, prefix=''):
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        field = f"{prefix}{key}"
        if key not in defaults:
            raise ValueError(f"Unknown configuration field '{field}'.")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"Configuration field '{field}' should be a table.")
            merged[key] = _merge(defaults[key], value, f"{field}.")
        else:
            _check_type(value, defaults[key], field)
            merged[key] = float(value) if isinstance(defaults[key], float) else value
    return merged


def _apply_environment(config, environ):
    if environ.get(ENV_OUTPUT_DIR):
        config['output_dir'] = environ[ENV_OUTPUT_DIR]
    if environ.get(ENV_THREADS):
        try:
            config['threads'] = int(environ[ENV_THREADS])
        except ValueError:
            raise ValueError(f"{ENV_THREADS} should be an integer.") from None


def _require(condition, field, message):
    if not condition:
        raise ValueError(f"Configuration field '{field}' {message}.")


def validate(config):
    _require(config['plant']['kind'] in PLANT_KINDS, 'plant.kind', f"should be one of {', '.join(PLANT_KINDS)}")
    _require(config['threads'] >= 1, 'threads', "must be at least 1")
    try:
        validate_fractions(config['split']['fractions'])
    except ValueError as error:
        raise ValueError(f"Configuration field 'split.fractions': {error}") from None
    simulation = config['simulation']
    for key in ('dt_sim', 'dt_record', 'target_dt', 'nominal_frequency', 'epsilon_v'):
        _require(simulation[key] > 0, f"simulation.{key}", "must be positive")
    _require(simulation['dt_sim'] <= simulation['dt_record'], 'simulation.dt_sim', "must not exceed dt_record")
    ratio = simulation['target_dt'] / simulation['dt_record']
    _require(abs(ratio - round(ratio)) < 1e-9 * ratio and round(ratio) >= 1, 'simulation.target_dt',
             "must be an integer multiple of dt_record")
    scenarios = config['scenarios']
    unknown = set(scenarios['classes']) - set(SCENARIO_CLASSES)
    _require(not unknown, 'scenarios.classes', f"has unknown class(es) {', '.join(sorted(unknown))}")
    unknown = set(scenarios['ood']) - set(OOD_SCENARIOS)
    _require(not unknown, 'scenarios.ood', f"has unknown scenario(s) {', '.join(sorted(unknown))}")
    _require(scenarios['instances_per_class'] >= 1, 'scenarios.instances_per_class', "must be at least 1")
    _require(len(config['network']['line_impedance']) == 2, 'network.line_impedance', "should be [R, X]")
    sweep = config['identify']['sweep']
    _require(len(sweep) == 2 and 0 <= sweep[0] <= sweep[1], 'identify.sweep', "should be [first, last] orders")
    band = config['closed_loop']['band']
    _require(len(band) == 2 and 0 < band[0] < band[1], 'closed_loop.band', "should be [low, high] in pu")
    if config['plant']['kind'] == 'normalform':
        _require(config['plant']['normalform']['model'], 'plant.normalform.model', "must name a model file")
    for kind in ('droop', 'dvoc'):
        try:
            plant_params(config, kind)
        except (TypeError, ValueError) as error:
            raise ValueError(f"Configuration table 'plant.{kind}': {error}") from None
    return config


def load_config(path=None, environ=None):
    """Defaults merged with the TOML file at ``path`` and the environment overrides."""
    environ = os.environ if environ is None else environ
    overrides = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, 'rb') as handle:
                overrides = tomllib.load(handle)
        except tomllib.TOMLDecodeError as error:
            raise ValueError(f"{path}: {error}") from None
    config = _merge(DEFAULTS, overrides)
    model = config['plant']['normalform']['model']
    if model and path is not None and not Path(model).is_absolute():
        config['plant']['normalform']['model'] = str(path.parent / model)
    _apply_environment(config, environ)
    return validate(config)


def plant_params(config, kind=None):
    kind = kind or config['plant']['kind']
    params = DroopParams if kind == 'droop' else DvocParams
    return params(**config['plant'][kind])


def line_impedance(config):
    resistance, reactance = config['network']['line_impedance']
    return complex(resistance, reactance)


def build_plant(config):
    kind = config['plant']['kind']
    if kind == 'normalform':
        from .persistence import load_model
        return load_model(config['plant']['normalform']['model'])
    return Plant(kind, plant_params(config))


def build_scenarios(config, plant=None):
    """The in-distribution scenario suite and the out-of-distribution scenarios of ``config``."""
    seed = config['seed']
    settings = config['scenarios']
    settling = getattr(getattr(plant, 'params', None), 'slowest_time_constant', None)
    scenarios = scenario_suite(settings['classes'], settings['instances_per_class'],
                               seeds=lambda kind, k: derive_seed(seed, f"scenario/{kind}/{k}"),
                               settling_time_constant=settling,
                               overrides={kind: settings[kind] for kind in SCENARIO_CLASSES})
    ood = [ood_scenario(config, name) for name in settings['ood']]
    return scenarios, ood


def ood_scenario(config, name):
    builders = {'ood-load-step': ood_load_step_scenario, 'ood-islanding': ood_islanding_scenario}
    if name not in builders:
        raise ValueError(f"Unknown closed-loop scenario '{name}'.")
    return builders[name](**config['scenarios'][name])


def ident_config(config, n_ivars=None):
    from .sysid import IdentConfig

    settings = {key: value for key, value in config['identify'].items() if key not in ('sweep', 'epsilon_select')}
    if n_ivars is not None:
        settings['n_ivars'] = n_ivars
    return IdentConfig(seed=config['seed'], epsilon_v=config['simulation']['epsilon_v'], **settings)
