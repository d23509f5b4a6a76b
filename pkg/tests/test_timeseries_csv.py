import numpy as np
import pytest

from complexphase.signal import DqSeries
from complexphase.timeseries_csv import read_abc_csv, read_dq_csv, write_abc_csv, write_dq_csv

DT = 1e-3


@pytest.fixture
def series():
    t = DT * np.arange(50)
    v = 0.98 * np.exp(1j * (0.1 + 0.3 * t))
    return DqSeries(t=t, v=v, i=0.5 * v, dt=DT)


def test_dq_file_is_rewritten_byte_identical(series, tmp_path):
    first, second = tmp_path / 'first.csv', tmp_path / 'second.csv'
    write_dq_csv(series, first)
    write_dq_csv(read_dq_csv(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().splitlines()[0] == 't,v_d,v_q,i_d,i_q'


def test_read_dq_infers_sampling_interval(series, tmp_path):
    path = tmp_path / 'record.csv'
    write_dq_csv(series, path)
    loaded = read_dq_csv(path)
    assert loaded.dt == pytest.approx(DT)
    np.testing.assert_array_equal(loaded.v, series.v)


def test_bad_value_names_file_and_line(series, tmp_path):
    path = tmp_path / 'record.csv'
    write_dq_csv(series, path)
    lines = path.read_text().splitlines()
    fields = lines[4].split(',')
    fields[2] = 'abc'
    lines[4] = ','.join(fields)
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(ValueError, match=r"record\.csv:5: column 'v_q' is not a finite number"):
        read_dq_csv(path)


def test_missing_column(tmp_path):
    path = tmp_path / 'record.csv'
    path.write_text('t,v_d,v_q,i_d\n0,1,0,0.5\n0.001,1,0,0.5\n')
    with pytest.raises(ValueError, match="missing column"):
        read_dq_csv(path)


def test_empty_file(tmp_path):
    path = tmp_path / 'record.csv'
    path.write_text('')
    with pytest.raises(ValueError, match="empty"):
        read_dq_csv(path)
    path.write_text('t,v_d,v_q,i_d,i_q\n')
    with pytest.raises(ValueError, match="no data rows"):
        read_dq_csv(path)


def test_abc_file_maps_back_to_dq(series, tmp_path):
    path = tmp_path / 'abc.csv'
    write_abc_csv(series, path)
    loaded = read_abc_csv(path)
    np.testing.assert_allclose(loaded.v, series.v, atol=1e-12)
    np.testing.assert_allclose(loaded.i, series.i, atol=1e-12)
