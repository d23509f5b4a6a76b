import numpy as np
import pytest

from complexphase.signal import (DqSeries, PhaseSeries, abc_to_series, complex_frequency, complex_power, downsample,
                                 inverse_park, park_transform, to_phase)

TWO_PI_THIRDS = 2 * np.pi / 3


def balanced(amplitude, phi):
    return amplitude * np.array([np.cos(phi), np.cos(phi - TWO_PI_THIRDS), np.cos(phi + TWO_PI_THIRDS)])


def test_park_transform_of_aligned_set():
    assert park_transform(balanced(1.0, 0.0), 0.0) == pytest.approx(1 + 0j, abs=1e-12)


def test_park_transform_of_zero_signal():
    assert park_transform(np.zeros(3), 0.7) == 0


def test_park_transform_of_shifted_set():
    assert park_transform(balanced(0.95, 0.1), 0.0) == pytest.approx(0.95 * np.exp(0.1j), abs=1e-12)


@pytest.mark.parametrize('angle', [0.0, 1.3, -2.9])
@pytest.mark.parametrize('theta', [0.4, -1.7, np.pi])
def test_rotating_the_set_rotates_the_phasor(angle, theta):
    reference = park_transform(balanced(0.9, angle + 0.2), angle)
    rotated = park_transform(balanced(0.9, angle + 0.2 + theta), angle)
    assert rotated == pytest.approx(np.exp(1j * theta) * reference, abs=1e-12)


def test_park_transform_warns_on_unbalanced_input():
    with pytest.warns(RuntimeWarning, match="not balanced"):
        park_transform(np.array([1.0, 0.0, 0.0]), 0.0)


def test_park_transform_rejects_non_finite_input():
    with pytest.raises(ValueError):
        park_transform(np.array([np.nan, 0.0, 0.0]), 0.0)


def test_inverse_park():
    np.testing.assert_allclose(inverse_park(1 + 0j, 0.0), [1.0, -0.5, -0.5], atol=1e-15)
    np.testing.assert_allclose(inverse_park(0j, 1.3), [0.0, 0.0, 0.0])
    v = 0.8 * np.exp(0.3j)
    assert abs(park_transform(inverse_park(v, 0.4), 0.4) - v) < 1e-12


def test_complex_power():
    s = complex_power(1 + 0j, 1 + 0j)
    assert (s.P, s.Q, s.nu) == pytest.approx((1.0, 0.0, 1.0))
    s = complex_power(1 + 0j, 0.5 - 0.5j)
    assert (s.P, s.Q, s.nu) == pytest.approx((0.5, 0.5, 1.0))
    alpha = 1.234
    s = complex_power(np.exp(1j * alpha), np.exp(1j * alpha))
    assert (s.P, s.Q) == pytest.approx((1.0, 0.0), abs=1e-12)


def series_from_voltage(v, dt=1e-3):
    v = np.asarray(v, dtype=complex)
    return DqSeries(t=dt * np.arange(v.size), v=v, i=np.zeros(v.size), dt=dt)


def test_to_phase_of_constant_voltage():
    np.testing.assert_allclose(to_phase(series_from_voltage(np.ones(10))).theta, 0)
    np.testing.assert_allclose(to_phase(series_from_voltage(0.5 * np.ones(10))).theta, np.log(0.5))


def test_to_phase_unwraps_rotating_voltage():
    dt, omega = 1e-3, 2 * np.pi * 5
    t = dt * np.arange(1001)
    phase = to_phase(series_from_voltage(np.exp(1j * omega * t), dt))
    np.testing.assert_allclose(phase.theta.imag, omega * t, atol=1e-9)
    assert np.all(np.diff(phase.theta.imag) > 0)
    np.testing.assert_allclose(phase.t, t)
    np.testing.assert_allclose(phase.voltage, np.exp(1j * omega * t), atol=1e-12)


def test_to_phase_rejects_vanishing_voltage():
    v = np.ones(5, dtype=complex)
    v[3] = 1e-9
    with pytest.raises(ValueError, match="voltage magnitude too small for complex phase"):
        to_phase(series_from_voltage(v))


def test_complex_frequency_of_ramps():
    dt = 1e-3
    t = dt * np.arange(50)
    omega = 2 * np.pi * 50.3
    np.testing.assert_allclose(complex_frequency(PhaseSeries(1j * omega * t, dt)), 1j * omega, rtol=1e-9)
    np.testing.assert_allclose(complex_frequency(PhaseSeries(-0.7 * t, dt)), -0.7, rtol=1e-9)
    np.testing.assert_allclose(complex_frequency(PhaseSeries(np.full(50, 0.2 + 1j), dt)), 0)


def test_complex_frequency_needs_three_samples():
    with pytest.raises(ValueError):
        complex_frequency(PhaseSeries([0j, 1j], 1e-3))


def test_downsample_counts_samples():
    dt = 5e-5
    t = dt * np.arange(20000)
    series = DqSeries(t=t, v=np.ones(t.size), i=0.5 * np.ones(t.size), dt=dt)
    result = downsample(series, 1e-3)
    assert len(result) == 1000
    assert result.dt == 1e-3
    assert downsample(series, dt) is series


def test_downsample_keeps_slow_sinusoid():
    dt = 5e-5
    t = dt * np.arange(20000)
    v = 1 + 0.1 * np.sin(2 * np.pi * 10 * t)
    result = downsample(DqSeries(t=t, v=v, i=np.zeros(t.size), dt=dt), 1e-3)
    expected = 1 + 0.1 * np.sin(2 * np.pi * 10 * result.t)
    np.testing.assert_allclose(result.v.real[50:-50], expected[50:-50], atol=1e-3)


def test_downsample_rejects_non_integer_ratio():
    series = series_from_voltage(np.ones(100), dt=1e-4)
    with pytest.raises(ValueError, match="integer multiple"):
        downsample(series, 2.5e-4)


def test_series_must_be_uniformly_sampled():
    with pytest.raises(ValueError, match="uniformly"):
        DqSeries(t=[0.0, 1e-3, 3e-3], v=np.ones(3), i=np.zeros(3), dt=1e-3)


def test_abc_to_series_recovers_dq_signal():
    dt = 1e-4
    t = dt * np.arange(200)
    v = 0.98 * np.exp(1j * (0.2 + 0.5 * t))
    i = 0.4 * np.exp(-0.3j) * np.ones(t.size)
    angle = 2 * np.pi * 50 * t
    series = abc_to_series(t, inverse_park(v, angle), inverse_park(i, angle))
    np.testing.assert_allclose(series.v, v, atol=1e-12)
    np.testing.assert_allclose(series.i, i, atol=1e-12)
    assert series.dt == pytest.approx(dt)
