__version__ = '0.1.0'

from .exceptions import IdentificationError, IntegrationError, NumericalError
from .metrics import evaluate, r2, spectrum
from .normalform import (HwDiscrete, HwNormalForm, Setpoints, discretize, equilibrium, error_coordinates,
                         simulate_closed_loop, simulate_open_loop, to_continuous)
from .plants import droop_plant, dvoc_plant, integrate
from .scenarios import Dataset, Scenario, build_dataset, scenario_suite
from .signal import DqSeries, PhaseSeries, complex_frequency, downsample, park_transform, to_phase
from .subspace import subspace_init
from .sysid import IdentConfig, IdentResult, identify, order_sweep

__all__ = ['IdentificationError', 'IntegrationError', 'NumericalError', 'evaluate', 'r2', 'spectrum', 'HwDiscrete',
           'HwNormalForm', 'Setpoints', 'discretize', 'equilibrium', 'error_coordinates', 'simulate_closed_loop',
           'simulate_open_loop', 'to_continuous', 'droop_plant', 'dvoc_plant', 'integrate', 'Dataset', 'Scenario',
           'build_dataset', 'scenario_suite', 'DqSeries', 'PhaseSeries', 'complex_frequency', 'downsample',
           'park_transform', 'to_phase', 'subspace_init', 'IdentConfig', 'IdentResult', 'identify', 'order_sweep',
           '__version__']
