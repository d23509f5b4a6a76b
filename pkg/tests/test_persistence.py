import numpy as np
import pytest

from complexphase.normalform import HwNormalForm, Setpoints
from complexphase.persistence import (load_dataset, load_model, read_json, save_dataset, save_model, timestamp,
                                      verify_manifest, write_manifest)

MODEL = HwNormalForm(A=[[-2.0, 0.5], [-0.5, -3.0]], B=[[1.0, 0.0, 0.2], [0.0, 0.7, -0.1]],
                     C=[0.1 - 1.5j, 0.3 + 0.1j], D=[0.0, -0.25j, -2.0], setpoints=Setpoints(0.4, 0.1, 1.0),
                     provenance={'init': 'subspace', 'n_ivars': 2})


def test_model_file_round_trip(tmp_path):
    first, second = tmp_path / 'first.json', tmp_path / 'second.json'
    save_model(MODEL, first)
    loaded = load_model(first)
    np.testing.assert_array_equal(loaded.A, MODEL.A)
    np.testing.assert_array_equal(loaded.C, MODEL.C)
    assert loaded.setpoints == MODEL.setpoints
    assert loaded.provenance == MODEL.provenance
    save_model(loaded, second)
    assert first.read_bytes() == second.read_bytes()


def test_malformed_model_file(tmp_path):
    path = tmp_path / 'model.json'
    path.write_text('{"n_ivars": 1, "A": [[-1.0]]}\n')
    with pytest.raises(ValueError, match="malformed model file"):
        load_model(path)
    path.write_text('{"n_ivars": 1,\n "A": [[-1.0]\n')
    with pytest.raises(ValueError, match=r"model\.json:\d+:"):
        read_json(path)


def test_timestamp_follows_source_date_epoch(monkeypatch):
    monkeypatch.setenv('SOURCE_DATE_EPOCH', '0')
    assert timestamp() == '1970-01-01T00:00:00+00:00'
    monkeypatch.delenv('SOURCE_DATE_EPOCH')
    assert timestamp() is None
    assert timestamp(stamp=True) is not None


def test_manifest_detects_tampering(tmp_path, monkeypatch):
    monkeypatch.delenv('SOURCE_DATE_EPOCH', raising=False)
    (tmp_path / 'a.txt').write_text('alpha\n')
    (tmp_path / 'b.txt').write_text('beta\n')
    manifest = write_manifest(tmp_path, ['a.txt', 'b.txt'], config={'seed': 1}, seeds={'split': 5})
    assert manifest['created'] is None
    assert verify_manifest(tmp_path)['seeds'] == {'split': 5}

    (tmp_path / 'a.txt').write_text('alpha!\n')
    with pytest.raises(ValueError, match="altered a.txt"):
        verify_manifest(tmp_path)
    (tmp_path / 'b.txt').unlink()
    with pytest.raises(ValueError, match="missing b.txt"):
        verify_manifest(tmp_path)


def test_manifest_is_required(tmp_path):
    with pytest.raises(ValueError, match="no manifest.json"):
        verify_manifest(tmp_path)


def test_dataset_directory_round_trip(generated_dataset, tmp_path):
    directory = tmp_path / 'dataset'
    save_dataset(generated_dataset, directory, config={'seed': 0})
    loaded = load_dataset(directory)
    assert loaded.split == generated_dataset.split
    assert loaded.setpoints == generated_dataset.setpoints
    assert loaded.counts == generated_dataset.counts
    for name, series in generated_dataset.records.items():
        np.testing.assert_array_equal(loaded.records[name].v, series.v)
        np.testing.assert_array_equal(loaded.records[name].i, series.i)
    assert loaded.scenarios == generated_dataset.scenarios


def test_dataset_is_rewritten_byte_identical(generated_dataset, tmp_path, monkeypatch):
    monkeypatch.delenv('SOURCE_DATE_EPOCH', raising=False)
    save_dataset(generated_dataset, tmp_path / 'first')
    save_dataset(load_dataset(tmp_path / 'first'), tmp_path / 'second')
    for path in sorted((tmp_path / 'first').rglob('*')):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / 'second' / path.relative_to(tmp_path / 'first')).read_bytes()


def test_corrupted_dataset_is_refused(generated_dataset, tmp_path):
    directory = tmp_path / 'dataset'
    save_dataset(generated_dataset, directory)
    record = next((directory / 'records').glob('*.csv'))
    with open(record, 'a') as handle:
        handle.write('9,1,0,0.5,0\n')
    with pytest.raises(ValueError, match="altered records/"):
        load_dataset(directory)
