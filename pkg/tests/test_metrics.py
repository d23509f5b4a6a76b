import numpy as np
import pytest

from complexphase.metrics import REPORT_COLUMNS, evaluate, harmonic_check, predict, r2, spectrum
from complexphase.normalform import HwNormalForm, Setpoints, discretize

rng = np.random.default_rng(2)


def test_r2_examples():
    observed = np.array([1.0, 2.0, 3.0])
    assert r2(observed, observed) == 1.0
    assert r2(observed, np.full(3, 2.0)) == 0.0
    assert r2(observed, np.array([1.0, 2.0, 4.0])) == pytest.approx(0.5)


def test_r2_of_constant_series_is_undefined():
    with pytest.raises(ValueError, match="zero variance"):
        r2(np.ones(4), np.zeros(4))


def test_r2_is_invariant_to_affine_rescaling():
    observed = rng.standard_normal(50)
    predicted = observed + 0.1 * rng.standard_normal(50)
    assert r2(3 * observed - 2, 3 * predicted - 2) == pytest.approx(r2(observed, predicted))


def test_r2_needs_matching_shapes():
    with pytest.raises(ValueError):
        r2(np.ones(3), np.ones(4))


def test_spectrum_peak_of_sinusoid():
    dt = 1e-3
    t = dt * np.arange(2000)
    frequencies, power = spectrum(np.sin(2 * np.pi * 50 * t), dt)
    peak = np.argmax(power[1:]) + 1
    assert frequencies[peak] == pytest.approx(50.0)
    assert 10 * np.log10(power[peak] / np.median(power[1:])) >= 40


def test_spectrum_of_constant_is_dc():
    frequencies, power = spectrum(np.full(512, 2.0), 1e-3)
    df = frequencies[1] - frequencies[0]
    assert power[0] * df == pytest.approx(4.0)
    np.testing.assert_allclose(power[1:], 0, atol=1e-20)


def test_spectrum_preserves_mean_square():
    t = 1e-3 * np.arange(4096)
    x = 1.0 + 0.5 * np.sin(2 * np.pi * 50 * t) + 0.2 * np.cos(2 * np.pi * 120 * t)
    frequencies, power = spectrum(x, 1e-3)
    df = frequencies[1] - frequencies[0]
    assert np.sum(power) * df == pytest.approx(np.mean(x ** 2), rel=0.01)


def test_spectrum_needs_enough_samples():
    with pytest.raises(ValueError, match="at least"):
        spectrum(np.ones(100), 1e-3)


def test_harmonic_check_flags_missing_component():
    dt = 1e-3
    t = dt * np.arange(2000)
    predicted = 1.0 + 0.01 * np.sin(2 * np.pi * 5 * t)
    measured = predicted + 0.01 * np.sin(2 * np.pi * 150 * t)
    with pytest.warns(RuntimeWarning, match="150 Hz"):
        report = harmonic_check(measured, predicted, dt)
    assert report[150.0]['flagged']
    assert not harmonic_check(measured, measured, dt)[150.0]['flagged']


def test_harmonic_check_needs_nyquist_headroom():
    with pytest.raises(ValueError, match="Nyquist"):
        harmonic_check(np.ones(512), np.ones(512), 1e-2)


def test_generating_model_predicts_its_records(generated_dataset, generator):
    records = generated_dataset.partition('test')
    report = evaluate(generator, records, 'test')
    table = report['records']
    assert list(table.columns) == REPORT_COLUMNS
    assert len(table) == len(records)
    assert (table['partition'] == 'test').all()
    assert report['mean']['r2_d'] >= 0.999
    assert report['mean']['r2_phi'] >= 0.999
    assert table['max_err'].max() < 1e-8
    assert set(report['predictions']) == set(records)


def test_prediction_starts_at_measured_phase(generated_dataset, generator):
    series = generated_dataset.records['frequency-step-01']
    prediction = predict(generator, series)
    assert prediction['phase'].theta[0] == prediction['measured'].theta[0]
    assert len(prediction['v']) == len(series)


def test_evaluate_collects_spectra(generated_dataset, generator):
    records = generated_dataset.partition('validation')
    report = evaluate(generator, records, 'validation', spectra=True)
    assert set(report['spectra']) == set(records)
    table = next(iter(report['spectra'].values()))
    assert list(table.columns) == ['frequency', 'measured', 'predicted']


def test_evaluate_rejects_foreign_setpoints(generated_dataset, generator):
    records = generated_dataset.partition('test')
    with pytest.raises(ValueError, match="identified at"):
        evaluate(generator, records, 'test', setpoints=Setpoints(P=0.2, Q=0.0, v=1.0))
    evaluate(generator, records, 'test', setpoints=generated_dataset.setpoints)


def test_evaluate_rejects_other_sampling_interval(generated_dataset, generator):
    records = generated_dataset.partition('test')
    with pytest.raises(ValueError, match="sampled every"):
        evaluate(discretize(generator, 2e-3), records, 'test')
    identified_elsewhere = HwNormalForm(generator.A, generator.B, generator.C, generator.D, generator.setpoints,
                                        {'dt': 5e-4})
    with pytest.raises(ValueError, match="sampled every"):
        evaluate(identified_elsewhere, records, 'test')


def test_prediction_starts_at_rest_or_in_steady_state(generated_dataset, generator):
    series = generated_dataset.records['magnitude-step-00']
    zero = predict(generator, series)
    steady = predict(generator, series, initial_state='steady')
    # the records start at the operating point, where both rules coincide
    np.testing.assert_allclose(zero['v'], steady['v'], atol=1e-9)
    with pytest.raises(ValueError, match="initial_state"):
        predict(generator, series, initial_state='random')
