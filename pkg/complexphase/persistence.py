"""Model files, dataset directories and run manifests.

JSON is written with sorted keys and shortest round-trip floats, CSV through
``timeseries_csv``; together with a timestamp that is only set on request this makes
repeated runs byte-identical.
"""
import datetime
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .normalform import HwNormalForm, Setpoints
from .scenarios import Dataset, Scenario
from .timeseries_csv import read_dq_csv, write_dq_csv

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return {'re': float(value.real), 'im': float(value.imag)}
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, data):
    Path(path).write_text(json.dumps(to_jsonable(data), sort_keys=True, indent=2) + '\n', encoding='utf-8')


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as error:
        raise ValueError(f"{path}:{error.lineno}: {error.msg}") from None


def model_to_dict(model):
    return {
        'n_ivars': model.n_ivars,
        'A': model.A.tolist(),
        'B': model.B.tolist(),
        'C': {'re': model.C.real.tolist(), 'im': model.C.imag.tolist()},
        'D': {'re': model.D.real.tolist(), 'im': model.D.imag.tolist()},
        'setpoints': {'P': model.setpoints.P, 'Q': model.setpoints.Q, 'v': model.setpoints.v},
        'provenance': model.provenance,
    }


def model_from_dict(data, source='model'):
    try:
        n = int(data['n_ivars'])
        A = np.array(data['A'], dtype=float).reshape(n, n)
        B = np.array(data['B'], dtype=float).reshape(n, 3)
        C = np.array(data['C']['re'], dtype=float) + 1j * np.array(data['C']['im'], dtype=float)
        D = np.array(data['D']['re'], dtype=float) + 1j * np.array(data['D']['im'], dtype=float)
        setpoints = Setpoints(**data['setpoints'])
    except (KeyError, TypeError) as error:
        raise ValueError(f"{source}: malformed model file ({error!r}).") from None
    return HwNormalForm(A, B, C, D, setpoints, data.get('provenance', {}))


def save_model(model, path):
    write_json(path, model_to_dict(model))


def load_model(path):
    return model_from_dict(read_json(path), str(path))


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def timestamp(stamp=False):
    """ISO time from ``SOURCE_DATE_EPOCH`` if set, the current time if ``stamp``, else None."""
    epoch = os.environ.get('SOURCE_DATE_EPOCH')
    if epoch is not None:
        return datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc).isoformat()
    if stamp:
        return datetime.datetime.now(datetime.timezone.utc).isoformat()
    return None


def write_manifest(directory, artifacts, config=None, seeds=None, extra=None, stamp=False):
    from . import __version__

    directory = Path(directory)
    manifest = {
        'tool': 'complexphase',
        'version': __version__,
        'created': timestamp(stamp),
        'config': config or {},
        'seeds': seeds or {},
        'artifacts': {Path(name).as_posix(): sha256_file(directory / name) for name in sorted(artifacts)},
    }
    manifest.update(extra or {})
    write_json(directory / MANIFEST, manifest)
    return manifest


def verify_manifest(directory):
    """Re-hash every listed artifact; any missing or altered file raises ``ValueError``."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise ValueError(f"{directory}: no {MANIFEST} found.")
    manifest = read_json(path)
    problems = []
    for name, digest in manifest.get('artifacts', {}).items():
        artifact = directory / name
        if not artifact.is_file():
            problems.append(f"missing {name}")
        elif sha256_file(artifact) != digest:
            problems.append(f"altered {name}")
    if problems:
        raise ValueError(f"{path}: manifest verification failed: {'; '.join(problems)}.")
    return manifest


def save_dataset(dataset, directory, config=None, seeds=None, stamp=False):
    directory = Path(directory)
    (directory / 'records').mkdir(parents=True, exist_ok=True)
    artifacts = []
    for group, records in (('records', dataset.records), ('ood', dataset.ood)):
        if records:
            (directory / group).mkdir(parents=True, exist_ok=True)
        for name in sorted(records):
            relative = f"{group}/{name}.csv"
            write_dq_csv(records[name], directory / relative)
            artifacts.append(relative)
    write_json(directory / 'scenarios.json', {name: scenario.to_dict()
                                              for name, scenario in sorted(dataset.scenarios.items())})
    artifacts.append('scenarios.json')
    sp = dataset.setpoints
    extra = {
        'split': dict(sorted(dataset.split.items())),
        'counts': dataset.counts,
        'ood': sorted(dataset.ood),
        'setpoints': {'P': sp.P, 'Q': sp.Q, 'v': sp.v},
        'seed': dataset.seed,
    }
    logger.info("Writing dataset with %d record(s) to %s", len(dataset.records), directory)
    return write_manifest(directory, artifacts, config, seeds, extra, stamp)


def load_dataset(directory, verify=True):
    directory = Path(directory)
    manifest = verify_manifest(directory) if verify else read_json(directory / MANIFEST)
    try:
        split = manifest['split']
        setpoints = Setpoints(**manifest['setpoints'])
    except (KeyError, TypeError) as error:
        raise ValueError(f"{directory / MANIFEST}: not a dataset manifest ({error!r}).") from None
    records = {name: read_dq_csv(directory / 'records' / f"{name}.csv") for name in sorted(split)}
    ood = {name: read_dq_csv(directory / 'ood' / f"{name}.csv") for name in manifest.get('ood', [])}
    scenario_file = directory / 'scenarios.json'
    scenarios = {}
    if scenario_file.is_file():
        scenarios = {name: Scenario.from_dict(data) for name, data in read_json(scenario_file).items()}
    return Dataset(records=records, scenarios=scenarios, split=split, setpoints=setpoints, ood=ood,
                   seed=manifest.get('seed'))
