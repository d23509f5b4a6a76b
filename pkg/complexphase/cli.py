"""Command-line driver: simulate -> identify -> evaluate -> closed-loop -> report.

Exit codes: 0 success, 1 numerical failure, 2 usage, configuration or input error.
"""
import argparse
import logging
import os
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import config as configuration
from .exceptions import NumericalError
from .metrics import evaluate, harmonic_check, MIN_SPECTRUM_SAMPLES
from .normalform import discretize, equilibrium, simulate_closed_loop
from .persistence import (MANIFEST, load_dataset, load_model, read_json, save_dataset, save_model, sha256_file,
                          verify_manifest, write_json, write_manifest)
from .plants import Plant
from .scenarios import OOD_SCENARIOS, SCENARIO_CLASSES, build_dataset, build_network, scenario_suite, \
    simulate_scenario
from .signal import complex_frequency, to_phase
from .sysid import identify, order_sweep
from .timeseries_csv import dq_frame, write_dq_csv, write_frame

logger = logging.getLogger(__name__)

PARTITION_CHOICES = ('train', 'validation', 'test', 'ood')


def _configure_logging(verbosity):
    level = {-1: logging.WARNING, 0: logging.INFO, 1: logging.DEBUG}[verbosity]
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s %(message)s', stream=sys.stderr,
                        force=True)
    logging.captureWarnings(True)


def _order_range(text):
    try:
        first, _, last = text.partition('..')
        orders = range(int(first), int(last or first) + 1)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an order range like 1..6") from None
    if not orders:
        raise argparse.ArgumentTypeError(f"'{text}' is an empty order range")
    return orders


def _load_run_config(path, dataset_dir=None):
    """The given TOML file, else the configuration recorded with the dataset, else the defaults."""
    if path is not None:
        return configuration.load_config(path)
    if dataset_dir is not None and (Path(dataset_dir) / MANIFEST).is_file():
        recorded = read_json(Path(dataset_dir) / MANIFEST).get('config')
        if recorded:
            config = configuration._merge(configuration.DEFAULTS, recorded)
            configuration._apply_environment(config, os.environ)
            return configuration.validate(config)
    return configuration.load_config(None)


def _output_dir(args, config, name):
    return Path(args.output) if args.output else Path(config['output_dir']) / name


def _replace_dir(partial, target):
    if target.exists():
        shutil.rmtree(target)
    partial.rename(target)


def cmd_simulate(args):
    config = configuration.load_config(args.config)
    output = _output_dir(args, config, 'dataset')
    partial = output.with_name(output.name + '.partial')
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir(parents=True)
    try:
        plant = configuration.build_plant(config)
        scenarios, ood = configuration.build_scenarios(config, plant)
        simulation = config['simulation']
        dataset = build_dataset(scenarios, plant, config['split']['fractions'], seed=config['seed'],
                                dt_sim=simulation['dt_sim'], dt_record=simulation['dt_record'],
                                target_dt=simulation['target_dt'], ood=ood, workers=config['threads'],
                                split_rng=configuration.substream(config['seed'], 'split'),
                                line_impedance=configuration.line_impedance(config))
        seeds = {'root': config['seed'], 'split': 'split',
                 **{scenario.name: scenario.seed for scenario in scenarios if scenario.seed is not None}}
        save_dataset(dataset, partial, config=config, seeds=seeds, stamp=args.stamp)
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    _replace_dir(partial, output)
    counts = dataset.counts
    print(f"Dataset written to {output}: {counts['train']} train, {counts['validation']} validation, "
          f"{counts['test']} test, {len(dataset.ood)} out-of-distribution record(s)")
    return 0


def _write_result(result, directory):
    directory.mkdir(parents=True, exist_ok=True)
    save_model(result.model, directory / 'model.json')
    write_frame(result.trace, directory / 'trace.csv')
    write_json(directory / 'report.json', {
        'n_ivars': result.n_ivars,
        'train_loss': result.train_loss,
        'validation_score': result.validation_score,
        'validation_r2': {name: {'r2_d': pair[0], 'r2_q': pair[1]} for name, pair in result.validation_r2.items()},
        'stability': result.stability,
    })
    return ['model.json', 'trace.csv', 'report.json']


def _dataset_reference(dataset_dir):
    return {'dataset': str(dataset_dir), 'dataset_manifest': sha256_file(Path(dataset_dir) / MANIFEST)}


def cmd_identify(args):
    config = _load_run_config(args.config, args.dataset)
    dataset = load_dataset(args.dataset)
    output = _output_dir(args, config, 'identify')
    output.mkdir(parents=True, exist_ok=True)
    ident = configuration.ident_config(config)
    orders = args.sweep
    if orders is None and args.command == 'sweep' and args.n_ivars is None:
        first, last = config['identify']['sweep']
        orders = range(first, last + 1)
    if orders is None:
        result = identify(dataset, args.n_ivars, ident, provenance=_dataset_reference(args.dataset))
        artifacts = _write_result(result, output)
        write_manifest(output, artifacts, config, {'root': config['seed'], 'restarts': 'restarts'},
                       _dataset_reference(args.dataset), stamp=args.stamp)
        print(f"n_ivars = {result.n_ivars}: validation R2 {result.validation_score:.6f}, model in {output}")
        return 0

    epsilon_select = config['identify']['epsilon_select']
    results, selected = order_sweep(dataset, orders, ident, epsilon_select, workers=config['threads'],
                                    provenance=_dataset_reference(args.dataset))
    artifacts, rows = [], []
    for result in results:
        name = f"n{result.n_ivars:02d}"
        artifacts += [f"{name}/{artifact}" for artifact in _write_result(result, output / name)]
        d = np.mean([pair[0] for pair in result.validation_r2.values()])
        q = np.mean([pair[1] for pair in result.validation_r2.values()])
        rows.append({'n_ivars': result.n_ivars, 'train_loss': result.train_loss, 'validation_r2_d': d,
                     'validation_r2_q': q, 'validation_score': result.validation_score})
    table = pd.DataFrame(rows)
    write_frame(table, output / 'sweep.csv')
    write_json(output / 'selection.json', {'selected': selected, 'epsilon_select': epsilon_select,
                                           'scores': {str(row['n_ivars']): row['validation_score'] for row in rows}})
    artifacts += ['sweep.csv', 'selection.json']
    if args.svg:
        from .plotting import plot_order_sweep, save_svg
        save_svg(plot_order_sweep(table['n_ivars'], {'v_d': table['validation_r2_d'],
                                                     'v_q': table['validation_r2_q']}), output / 'sweep.svg')
        artifacts.append('sweep.svg')
    write_manifest(output, artifacts, config, {'root': config['seed'], 'restarts': 'restarts'},
                   _dataset_reference(args.dataset), stamp=args.stamp)
    print(table.to_string(index=False))
    print(f"Selected n_ivars = {selected}")
    return 0


def cmd_evaluate(args):
    model = load_model(args.model)
    dataset = load_dataset(args.dataset)
    records = dataset.partition(args.partition)
    if not records:
        raise ValueError(f"Partition '{args.partition}' of {args.dataset} is empty.")
    config = _load_run_config(args.config, args.dataset)
    output = _output_dir(args, config, f"evaluate-{args.partition}")
    (output / 'overlays').mkdir(parents=True, exist_ok=True)
    report = evaluate(model, records, args.partition, config['simulation']['epsilon_v'],
                      config['identify']['integration'], initial_state=config['identify']['initial_state'],
                      setpoints=dataset.setpoints)
    artifacts = ['report.csv', 'report.json']
    write_frame(report['records'], output / 'report.csv')

    harmonics = {}
    for name, series in records.items():
        predicted = report['predictions'][name]
        overlay = pd.DataFrame({'t': series.t, 'measured_v_d': series.v.real, 'predicted_v_d': predicted.real,
                                'measured_v_q': series.v.imag, 'predicted_v_q': predicted.imag})
        write_frame(overlay, output / 'overlays' / f"{name}.csv")
        artifacts.append(f"overlays/{name}.csv")
        if len(series) >= MIN_SPECTRUM_SAMPLES and 0.5 / series.dt > 150.0:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter('always')
                harmonics[name] = harmonic_check(np.abs(series.v), np.abs(predicted), series.dt)
            for warning in caught:
                logger.warning("%s: %s", name, warning.message)
        if args.svg:
            from .plotting import plot_overlay, save_svg
            save_svg(plot_overlay(series.t, series.v.real, predicted.real, title=f"{name}: v_d", ylabel='v_d [pu]'),
                     output / 'overlays' / f"{name}.svg")
            artifacts.append(f"overlays/{name}.svg")
    write_json(output / 'report.json', {'partition': args.partition, 'model': str(args.model),
                                        'mean': report['mean'],
                                        'records': report['records'].to_dict(orient='records'),
                                        'harmonics': harmonics})
    write_manifest(output, artifacts, config, {'root': config['seed']},
                   {**_dataset_reference(args.dataset), 'model_sha256': sha256_file(args.model)}, stamp=args.stamp)
    print(report['records'].to_string(index=False))
    return 0


def _closed_loop_scenario(config, name):
    if name in OOD_SCENARIOS:
        return configuration.ood_scenario(config, name)
    if name in SCENARIO_CLASSES:
        settings = config['scenarios']
        return scenario_suite([name], 1, seeds=lambda kind, k: configuration.derive_seed(config['seed'],
                                                                                         f"closed-loop/{kind}"),
                              overrides={name: settings[name]})[0]
    raise ValueError(f"Unknown closed-loop scenario '{name}'.")


def _first_exit(series, band):
    magnitude = np.abs(series.v)
    outside = np.flatnonzero((magnitude < band[0]) | (magnitude > band[1]))
    return float(series.t[outside[0]]) if outside.size else None


def _steady_frequency(series, epsilon_v):
    eta = complex_frequency(to_phase(series, epsilon_v))
    tail = eta[-max(3, len(eta) // 5):]
    return float(np.mean(tail.imag) / (2 * np.pi))


def cmd_closed_loop(args):
    config = configuration.load_config(args.config)
    model = load_model(args.model)
    scenario = _closed_loop_scenario(config, args.scenario or config['closed_loop']['scenario'])
    dt = config['simulation']['target_dt']
    band = config['closed_loop']['band']
    epsilon_v = config['simulation']['epsilon_v']
    network = build_network(scenario, configuration.line_impedance(config))
    output = _output_dir(args, config, f"closed-loop-{scenario.name}")
    output.mkdir(parents=True, exist_ok=True)

    point = equilibrium(model, network)
    if point is None:
        logger.warning("No closed-loop equilibrium found; starting at the voltage setpoint")
        theta0, x0 = complex(np.log(model.setpoints.v)), None
    else:
        theta0, x0 = point
    replay = simulate_closed_loop(discretize(model, dt), network, (0.0, scenario.duration), theta0, x0,
                                  scenario.events, integration=config['identify']['integration'],
                                  stop_magnitude=(band[0] / 5, band[1] * 5))
    write_dq_csv(replay, output / 'model.csv')
    artifacts = ['model.csv']
    summary = {'scenario': scenario.to_dict(), 'band': band, 'divergence_time': _first_exit(replay, band),
               'samples': len(replay), 'completed': bool(replay.t[-1] >= scenario.duration - 0.5 * dt)}
    if summary['divergence_time'] is not None:
        logger.warning("|v| left the band %s at t = %.4f s", band, summary['divergence_time'])

    plant = configuration.build_plant(config)
    if isinstance(plant, Plant):
        simulation = config['simulation']
        reference = simulate_scenario(scenario, plant, simulation['dt_sim'], simulation['dt_record'], dt,
                                      configuration.line_impedance(config))
        write_dq_csv(reference, output / 'plant.csv')
        artifacts.append('plant.csv')
        size = min(len(reference), len(replay))
        difference = np.abs(np.abs(replay.v[:size]) - np.abs(reference.v[:size]))
        summary['max_abs_magnitude_error'] = float(np.max(difference))
        summary['mean_abs_magnitude_error'] = float(np.mean(difference))
        if summary['completed']:
            model_frequency = _steady_frequency(replay, epsilon_v)
            plant_frequency = _steady_frequency(reference, epsilon_v)
            summary['frequency_deviation_model'] = model_frequency
            summary['frequency_deviation_plant'] = plant_frequency
            summary['frequency_error_relative'] = (abs(model_frequency - plant_frequency) / abs(plant_frequency)
                                                   if plant_frequency else None)
    write_json(output / 'summary.json', summary)
    artifacts.append('summary.json')
    if args.svg and 'plant.csv' in artifacts:
        from .plotting import plot_overlay, save_svg
        size = min(len(reference), len(replay))
        save_svg(plot_overlay(replay.t[:size], np.abs(reference.v[:size]), np.abs(replay.v[:size]),
                              title=f"{scenario.name}: |v|", ylabel='|v| [pu]'), output / 'magnitude.svg')
        artifacts.append('magnitude.svg')
    write_manifest(output, artifacts, config, {'root': config['seed']}, {'model_sha256': sha256_file(args.model)},
                   stamp=args.stamp)
    print(dq_frame(replay).describe().to_string())
    for key in ('divergence_time', 'max_abs_magnitude_error', 'frequency_error_relative'):
        if key in summary:
            print(f"{key}: {summary[key]}")
    return 0


def cmd_report(args):
    run = Path(args.run)
    manifest = verify_manifest(run)
    print(f"{run}: {len(manifest['artifacts'])} artifact(s) verified (complexphase {manifest['version']})")
    if (run / 'selection.json').is_file():
        print(pd.read_csv(run / 'sweep.csv').to_string(index=False))
        print(f"Selected n_ivars = {read_json(run / 'selection.json')['selected']}")
    if (run / 'report.csv').is_file():
        table = pd.read_csv(run / 'report.csv')
        print(table.to_string(index=False))
        print(table[['r2_d', 'r2_q', 'max_err', 'mean_err']].mean().to_string())
    elif (run / 'report.json').is_file():
        report = read_json(run / 'report.json')
        print(f"n_ivars = {report['n_ivars']}, train loss {report['train_loss']:.6g}, "
              f"validation R2 {report['validation_score']:.6f}")
    if 'counts' in manifest:
        print(', '.join(f"{partition}: {count}" for partition, count in manifest['counts'].items()))
    if (run / 'summary.json').is_file():
        for key, value in read_json(run / 'summary.json').items():
            if key != 'scenario':
                print(f"{key}: {value}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='complexphase',
                                     description='Gray-box normal-form identification of grid-forming inverters.')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_const', const=1, dest='verbosity', default=0)
    verbosity.add_argument('-q', '--quiet', action='store_const', const=-1, dest='verbosity')
    commands = parser.add_subparsers(dest='command', required=True)

    def add_common(command):
        command.add_argument('--output', help='output directory (default: <output_dir>/<command>)')
        command.add_argument('--stamp', action='store_true', help='record the current time in the manifest')
        return command

    simulate = add_common(commands.add_parser('simulate', help='simulate the scenario suite into a dataset'))
    simulate.add_argument('config', help='TOML configuration file')
    simulate.set_defaults(handler=cmd_simulate)

    for name, help_text in (('identify', 'identify a normal form from a dataset'),
                            ('sweep', 'identify every order of a range and select one')):
        command = add_common(commands.add_parser(name, help=help_text))
        command.add_argument('dataset', help='dataset directory written by simulate')
        command.add_argument('--config', help='TOML configuration file (default: the dataset configuration)')
        command.add_argument('--svg', action='store_true', help='also write SVG charts')
        orders = command.add_mutually_exclusive_group()
        orders.add_argument('--n-ivars', type=int, help='number of internal variables')
        orders.add_argument('--sweep', '--range', type=_order_range, help='order range such as 1..6')
        command.set_defaults(handler=cmd_identify)

    evaluate_parser = add_common(commands.add_parser('evaluate', help='score a model on a dataset partition'))
    evaluate_parser.add_argument('model', help='model JSON file')
    evaluate_parser.add_argument('dataset', help='dataset directory')
    evaluate_parser.add_argument('--partition', choices=PARTITION_CHOICES, default='test')
    evaluate_parser.add_argument('--config', help='TOML configuration file (default: the dataset configuration)')
    evaluate_parser.add_argument('--svg', action='store_true', help='also write SVG overlays')
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    closed_loop = add_common(commands.add_parser('closed-loop', help='replay a model against a network scenario'))
    closed_loop.add_argument('model', help='model JSON file')
    closed_loop.add_argument('--config', help='TOML configuration file (plant and scenario settings)')
    closed_loop.add_argument('--scenario', help='scenario name (default: closed_loop.scenario)')
    closed_loop.add_argument('--svg', action='store_true', help='also write an SVG comparison')
    closed_loop.set_defaults(handler=cmd_closed_loop)

    report = commands.add_parser('report', help='verify a run directory and summarize it')
    report.add_argument('run', help='directory with a manifest.json')
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbosity)
    try:
        return args.handler(args)
    except NumericalError as error:
        logger.error("%s", error)
        return 1
    except (ValueError, KeyError, OSError) as error:
        logger.error("%s", error)
        return 2
