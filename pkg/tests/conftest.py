import numpy as np
import pytest

from complexphase.normalform import HwNormalForm, Setpoints
from complexphase.plants import DEFAULT_LINE_IMPEDANCE, droop_plant, dvoc_plant
from complexphase.scenarios import (build_dataset, frequency_step_scenario, magnitude_step_scenario,
                                    rapid_small_changes_scenario)


def operating_point(angle=0.05, impedance=DEFAULT_LINE_IMPEDANCE):
    """Setpoints at which a unit voltage leading a stiff unit bus by ``angle`` is at rest."""
    v = np.exp(1j * angle)
    s = v * np.conj((v - 1.0) / impedance)
    return Setpoints(P=float(s.real), Q=float(s.imag), v=1.0)


# droop-like normal form: filtered P drives the frequency, filtered Q and |v|^2 the magnitude
GENERATOR = HwNormalForm(A=[[-20.0, 0.0], [0.0, -10.0]],
                         B=[[20.0, 0.0, 0.0], [0.0, 10.0, 0.0]],
                         C=[-3.0j, -0.5],
                         D=[0.0, 0.0, -5.0],
                         setpoints=operating_point())


def short_scenarios():
    scenarios = []
    for k, step in enumerate((0.02, 0.03, 0.04)):
        scenarios.append(magnitude_step_scenario([1.0, 1.0 + step, 1.0 - step, 1.0], dwell=0.5,
                                                 name=f"magnitude-step-{k:02d}"))
        scenarios.append(frequency_step_scenario([0.0, 5 * step, -5 * step, 0.0], dwell=0.5,
                                                 name=f"frequency-step-{k:02d}"))
        scenarios.append(rapid_small_changes_scenario(duration=2.0, step_period=0.2, mag_range=0.02,
                                                      freq_range=0.2, seed=k, name=f"rapid-small-changes-{k:02d}"))
    return scenarios


def small_signal_scenarios():
    scenarios = []
    for k, step in enumerate((0.005, 0.0075, 0.01)):
        scenarios.append(magnitude_step_scenario([1.0, 1.0 + step, 1.0 - step, 1.0], dwell=0.5,
                                                 name=f"magnitude-step-{k:02d}"))
        scenarios.append(frequency_step_scenario([0.0, 10 * step, -10 * step, 0.0], dwell=0.5,
                                                 name=f"frequency-step-{k:02d}"))
        scenarios.append(rapid_small_changes_scenario(duration=3.0, step_period=0.2, mag_range=0.005,
                                                      freq_range=0.05, seed=k, name=f"rapid-small-changes-{k:02d}"))
    return scenarios


@pytest.fixture(scope='session')
def generator():
    return GENERATOR


@pytest.fixture(scope='session')
def generated_dataset():
    """Nine 2 s records of ``GENERATOR`` against a stiff bus, one per class in every partition."""
    return build_dataset(short_scenarios(), GENERATOR, seed=0, split_rng=np.random.default_rng(5))


@pytest.fixture(scope='session')
def operating_setpoints():
    return operating_point()


@pytest.fixture(scope='session')
def droop_dataset(operating_setpoints):
    """Small-signal records of the droop plant around its operating point on a stiff bus."""
    plant = droop_plant(P_set=operating_setpoints.P, Q_set=operating_setpoints.Q)
    return build_dataset(small_signal_scenarios(), plant, seed=0, split_rng=np.random.default_rng(5))


@pytest.fixture(scope='session')
def dvoc_dataset(operating_setpoints):
    plant = dvoc_plant(P_set=operating_setpoints.P, Q_set=operating_setpoints.Q)
    return build_dataset(small_signal_scenarios(), plant, seed=0, split_rng=np.random.default_rng(5))
