import numpy as np
import pandas as pd

from .signal import NOMINAL_FREQUENCY, DqSeries, abc_to_series, inverse_park

DQ_COLUMNS = ['t', 'v_d', 'v_q', 'i_d', 'i_q']
ABC_COLUMNS = ['t', 'v_a', 'v_b', 'v_c', 'i_a', 'i_b', 'i_c']


def _validate_columns(frame, columns, path):
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}.")


def _is_number(text):
    try:
        return np.isfinite(float(text))
    except ValueError:
        return False


def _first_bad_line(path, columns):
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    for row, values in enumerate(raw[columns].itertuples(index=False), start=2):
        for column, text in zip(columns, values):
            if not _is_number(text):
                return row, column
    return None


def _load_frame(path, columns):
    try:
        frame = pd.read_csv(path, float_precision='round_trip')
    except pd.errors.ParserError as error:
        raise ValueError(f"{path}: {error}") from None
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: the file is empty.") from None
    _validate_columns(frame, columns, path)
    if frame.empty:
        raise ValueError(f"{path}: no data rows.")
    numeric = all(pd.api.types.is_numeric_dtype(frame[column]) for column in columns)
    if not numeric or not np.all(np.isfinite(frame[columns].to_numpy(dtype=float))):
        line, column = _first_bad_line(path, columns)
        raise ValueError(f"{path}:{line}: column '{column}' is not a finite number.")
    return frame[columns].astype(float)


def _infer_dt(t, path):
    if t.size < 2:
        raise ValueError(f"{path}: at least two samples are needed to infer the sampling interval.")
    return (t[-1] - t[0]) / (t.size - 1)


def read_dq_csv(path, dt=None):
    frame = _load_frame(path, DQ_COLUMNS)
    t = frame['t'].to_numpy(dtype=float)
    try:
        return DqSeries(t=t, v=frame['v_d'].to_numpy() + 1j * frame['v_q'].to_numpy(),
                        i=frame['i_d'].to_numpy() + 1j * frame['i_q'].to_numpy(),
                        dt=_infer_dt(t, path) if dt is None else dt)
    except ValueError as error:
        raise ValueError(f"{path}: {error}") from None


def dq_frame(series):
    return pd.DataFrame({'t': series.t, 'v_d': series.v.real, 'v_q': series.v.imag, 'i_d': series.i.real,
                         'i_q': series.i.imag}, columns=DQ_COLUMNS)


def write_frame(frame, path):
    """Write with shortest round-trip float text and Unix line endings."""
    frame.to_csv(path, index=False, lineterminator='\n')


def write_dq_csv(series, path):
    write_frame(dq_frame(series), path)


def read_abc_csv(path, nominal_frequency=NOMINAL_FREQUENCY, balance_tolerance=1e-6):
    frame = _load_frame(path, ABC_COLUMNS)
    t = frame['t'].to_numpy(dtype=float)
    _infer_dt(t, path)
    try:
        return abc_to_series(t, frame[['v_a', 'v_b', 'v_c']].to_numpy(), frame[['i_a', 'i_b', 'i_c']].to_numpy(),
                             nominal_frequency, balance_tolerance)
    except ValueError as error:
        raise ValueError(f"{path}: {error}") from None


def write_abc_csv(series, path, nominal_frequency=NOMINAL_FREQUENCY):
    angle = 2 * np.pi * nominal_frequency * series.t
    v_abc = inverse_park(series.v, angle)
    i_abc = inverse_park(series.i, angle)
    frame = pd.DataFrame(np.column_stack([series.t, v_abc, i_abc]), columns=ABC_COLUMNS)
    write_frame(frame, path)
