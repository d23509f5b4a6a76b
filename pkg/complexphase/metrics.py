import warnings

import numpy as np
import pandas as pd
from scipy.signal import periodogram

from .normalform import HwDiscrete, HwNormalForm, discretize, error_series, simulate_open_loop, steady_state
from .signal import EPSILON_V, to_phase

REPORT_COLUMNS = ['name', 'partition', 'r2_d', 'r2_q', 'r2_lnv', 'r2_phi', 'max_err', 'mean_err']
MIN_SPECTRUM_SAMPLES = 256
HARMONIC_FREQUENCIES = (150.0,)
HARMONIC_THRESHOLD_DB = 10.0


def _validate_pair(observed, predicted):
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.ndim != 1 or observed.shape != predicted.shape:
        raise ValueError("Observed and predicted series must be one-dimensional and of equal length.")
    if observed.size < 2:
        raise ValueError("At least two samples are needed for an R2 score.")
    return observed, predicted


def r2(observed, predicted):
    observed, predicted = _validate_pair(observed, predicted)
    total = np.sum((observed - observed.mean()) ** 2)
    if total == 0:
        raise ValueError("undefined R2 (zero variance)")
    return float(1.0 - np.sum((observed - predicted) ** 2) / total)


def predict(model, series, epsilon_v=EPSILON_V, integration='trapezoidal', initial_state='zero'):
    """Open-loop prediction of a record, started at its measured phase.

    ``model`` may be continuous (it is sampled at the record's ``dt``) or already discrete. The
    internal state starts at zero, or at rest under the first error sample for ``'steady'``.
    """
    if isinstance(model, HwNormalForm):
        model = discretize(model, series.dt)
    measured = to_phase(series, epsilon_v)
    e = error_series(series, model.setpoints)
    if initial_state == 'steady':
        x0 = steady_state(model, e.e[0])
    elif initial_state == 'zero':
        x0 = np.zeros(model.n_ivars)
    else:
        raise ValueError("initial_state should be one of zero, steady.")
    phase, v = simulate_open_loop(model, e, measured.theta[0], x0, integration, t0=float(series.t[0]))
    return {'measured': measured, 'phase': phase, 'v': v}


def _record_row(name, partition, series, prediction):
    v_measured, v_predicted = series.v, prediction['v']
    theta_measured, theta_predicted = prediction['measured'].theta, prediction['phase'].theta
    error = np.abs(v_predicted - v_measured)
    return {
        'name': name,
        'partition': partition,
        'r2_d': r2(v_measured.real, v_predicted.real),
        'r2_q': r2(v_measured.imag, v_predicted.imag),
        'r2_lnv': r2(theta_measured.real, theta_predicted.real),
        'r2_phi': r2(theta_measured.imag, theta_predicted.imag),
        'max_err': float(np.max(error)),
        'mean_err': float(np.mean(error)),
    }


def _check_compatible(model, records, setpoints):
    if setpoints is not None and not np.allclose([model.setpoints.P, model.setpoints.Q, model.setpoints.v],
                                                 [setpoints.P, setpoints.Q, setpoints.v], rtol=0, atol=1e-12):
        raise ValueError(f"The model was identified at {model.setpoints}, the records belong to {setpoints}.")
    dt = model.dt if isinstance(model, HwDiscrete) else model.provenance.get('dt')
    for name, series in records.items():
        if dt is not None and abs(series.dt - dt) > 1e-9 * dt:
            raise ValueError(f"Record {name} is sampled every {series.dt} s but the model every {dt} s.")


def evaluate(model, records, partition='', epsilon_v=EPSILON_V, integration='trapezoidal', spectra=False,
             initial_state='zero', setpoints=None):
    """Per-record open-loop scores of ``model`` on ``records`` (name -> DqSeries).

    Scores are never pooled across records; the reported means are plain averages of the
    per-record values. ``setpoints`` are those the records were generated at; a model identified
    at other setpoints or at another sampling interval is rejected.
    """
    _check_compatible(model, records, setpoints)
    rows, predictions, spectrum_tables = [], {}, {}
    for name in sorted(records):
        series = records[name]
        prediction = predict(model, series, epsilon_v, integration, initial_state)
        rows.append(_record_row(name, partition, series, prediction))
        predictions[name] = prediction['v']
        if spectra and len(series) >= MIN_SPECTRUM_SAMPLES:
            frequencies, measured_power = spectrum(np.abs(series.v), series.dt)
            _, predicted_power = spectrum(np.abs(prediction['v']), series.dt)
            spectrum_tables[name] = pd.DataFrame({'frequency': frequencies, 'measured': measured_power,
                                                  'predicted': predicted_power})
    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return {
        'records': table,
        'mean': {column: float(table[column].mean()) for column in REPORT_COLUMNS[2:]} if rows else {},
        'predictions': predictions,
        'spectra': spectrum_tables,
    }


def spectrum(series, dt, plot_output=False):
    """One-sided Hann-windowed periodogram density of a real series.

    The mean is removed before windowing and reinstated as the DC bin, so that
    ``sum(power) * df`` equals the time-domain mean square.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < MIN_SPECTRUM_SAMPLES:
        raise ValueError(f"A spectrum needs at least {MIN_SPECTRUM_SAMPLES} samples.")
    mean = x.mean()
    frequencies, power = periodogram(x - mean, fs=1.0 / dt, window='hann', detrend=False, scaling='density',
                                     return_onesided=True)
    df = frequencies[1] - frequencies[0]
    power[0] = mean ** 2 / df
    if plot_output:
        from .plotting import plot_spectrum
        plot_spectrum(frequencies, {'|v|': power})
    return frequencies, power


def _band_power(frequencies, power, frequency, half_width=2):
    k = int(np.argmin(np.abs(frequencies - frequency)))
    return float(np.sum(power[max(k - half_width, 1):k + half_width + 1]))


def harmonic_check(measured, predicted, dt, frequencies=HARMONIC_FREQUENCIES, threshold_db=HARMONIC_THRESHOLD_DB):
    """Compare measured and predicted ``|v|`` power around each harmonic frequency.

    A harmonic is flagged when the prediction carries at least ``threshold_db`` less power
    than the measurement.
    """
    f, measured_power = spectrum(measured, dt)
    _, predicted_power = spectrum(predicted, dt)
    if max(frequencies) > f[-1]:
        raise ValueError(f"Harmonic frequencies must lie below the Nyquist frequency {f[-1]} Hz.")
    tiny = np.finfo(float).tiny
    report = {}
    for frequency in frequencies:
        measured_db = 10 * np.log10(_band_power(f, measured_power, frequency) + tiny)
        predicted_db = 10 * np.log10(_band_power(f, predicted_power, frequency) + tiny)
        deficit = measured_db - predicted_db
        report[float(frequency)] = {'measured_db': measured_db, 'predicted_db': predicted_db,
                                    'deficit_db': deficit, 'flagged': bool(deficit >= threshold_db)}
        if deficit >= threshold_db:
            warnings.warn(f"The prediction misses the {frequency:g} Hz component of |v| by {deficit:.1f} dB.",
                          RuntimeWarning, stacklevel=2)
    return report
