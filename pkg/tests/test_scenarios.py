import numpy as np
import pytest

from complexphase.plants import Event, MicroGrid
from complexphase.scenarios import (PARTITIONS, Dataset, Scenario, build_network, check_excitation,
                                    frequency_step_scenario, magnitude_step_scenario, ood_islanding_scenario,
                                    ood_load_step_scenario, rapid_small_changes_scenario, scenario_suite,
                                    split_records, validate_fractions, _partition_counts)
from complexphase.normalform import Setpoints
from complexphase.signal import DqSeries


def test_magnitude_levels_become_events():
    scenario = magnitude_step_scenario([1.0, 1.05, 1.0], dwell=2.0)
    assert scenario.duration == 6.0
    assert [(event.time, event.value) for event in scenario.events] == [(2.0, 1.05), (4.0, 1.0)]
    assert all(event.field == 'slack_magnitude' for event in scenario.events)


def test_single_level_has_no_events():
    scenario = magnitude_step_scenario([1.02], dwell=3.0)
    assert scenario.events == ()
    assert scenario.setup[0].value == 1.02


def test_repeated_levels_do_not_produce_events():
    scenario = frequency_step_scenario([0.0, 0.0, 0.2, 0.2, 0.0], dwell=1.0)
    assert [(event.time, event.value) for event in scenario.events] == [(2.0, 0.2), (4.0, 0.0)]


def test_default_protocol_cycles():
    scenario = magnitude_step_scenario(cycles=2, step=0.05, dwell=1.0)
    assert scenario.duration == 9.0
    assert len(scenario.events) == 8


def test_guard_band():
    with pytest.raises(ValueError, match="guard band"):
        magnitude_step_scenario([1.0, 1.3])
    with pytest.raises(ValueError, match="guard band"):
        frequency_step_scenario([0.0, 2.0])


def test_short_dwell_warns():
    with pytest.warns(RuntimeWarning, match="dwell"):
        magnitude_step_scenario([1.0, 1.05], dwell=0.1, settling_time_constant=0.05)


def test_rapid_changes_are_seeded():
    first = rapid_small_changes_scenario(duration=10.0, seed=4)
    second = rapid_small_changes_scenario(duration=10.0, seed=4)
    other = rapid_small_changes_scenario(duration=10.0, seed=5)
    assert first.events == second.events
    assert first.events != other.events
    assert all(abs(event.value - 1.0) <= 0.01 for event in first.events if event.field == 'slack_magnitude')
    assert all(abs(event.value) <= 0.1 for event in first.events if event.field == 'slack_frequency')


def test_rapid_changes_with_zero_ranges_are_silent():
    assert rapid_small_changes_scenario(duration=5.0, mag_range=0.0, freq_range=0.0).events == ()


def test_slow_rapid_changes_warn():
    with pytest.warns(RuntimeWarning, match="settling time"):
        rapid_small_changes_scenario(duration=10.0, step_period=5.0)


def test_scenario_suite_names_and_seeds():
    suite = scenario_suite(instances_per_class=2, seeds=lambda kind, k: 10 + k)
    assert [scenario.name for scenario in suite] == [
        'magnitude-step-00', 'magnitude-step-01', 'frequency-step-00', 'frequency-step-01',
        'rapid-small-changes-00', 'rapid-small-changes-01']
    assert [scenario.seed for scenario in suite[:2]] == [10, 11]
    with pytest.raises(ValueError):
        scenario_suite(classes=('chirp',))


def test_scenario_dictionary_is_lossless():
    scenario = ood_load_step_scenario((0.5, 0.7), dwell=1.5)
    assert Scenario.from_dict(scenario.to_dict()) == scenario


def test_events_must_lie_inside_the_scenario():
    with pytest.raises(ValueError, match="outside"):
        Scenario(name='x', kind='magnitude-step', duration=1.0, events=(Event(2.0, 'grid', 'slack_magnitude', 1.0),))


def test_ood_builders():
    load_step = ood_load_step_scenario((0.5, 0.6, 0.7, 0.8), dwell=2.0)
    assert load_step.network == 'resistive-load'
    assert load_step.duration == 8.0
    assert [event.value for event in load_step.events] == [0.6, 0.7, 0.8]
    islanding = ood_islanding_scenario(open_time=2.0, duration=6.0)
    assert isinstance(build_network(islanding), MicroGrid)
    assert islanding.events[0].field == 'closed'
    assert islanding.events[0].value is False


def test_build_network_applies_setup():
    network = build_network(magnitude_step_scenario([1.03, 1.0]))
    assert network[0].slack_magnitude == 1.03


def test_split_counts():
    names = {'magnitude-step': [f"m{k}" for k in range(10)]}
    split = split_records(names, (0.7, 0.2, 0.1), np.random.default_rng(0))
    counts = [list(split.values()).count(partition) for partition in PARTITIONS]
    assert counts == [7, 2, 1]


def test_equal_remainders_go_to_the_smaller_record_name():
    fractions = np.array([0.4, 0.3, 0.3])
    # validation and test both ask for 1.5 records; the one dealt the smaller name gets two
    assert list(_partition_counts(5, fractions, ['a', 'b', 'c', 'd', 'e'])) == [2, 2, 1]
    assert list(_partition_counts(5, fractions, ['e', 'd', 'c', 'b', 'a'])) == [2, 1, 2]


def test_split_is_stratified_per_class():
    names = {kind: [f"{kind}-{k}" for k in range(3)] for kind in ('a', 'b', 'c')}
    split = split_records(names, (0.7, 0.2, 0.1), np.random.default_rng(1))
    for kind in names:
        assigned = sorted(split[name] for name in names[kind])
        assert assigned == ['test', 'train', 'validation']


def test_split_everything_to_train():
    names = {'a': ['x', 'y', 'z']}
    assert set(split_records(names, (1.0, 0.0, 0.0)).values()) == {'train'}


def test_split_is_reproducible():
    names = {'a': [f"r{k}" for k in range(20)]}
    assert (split_records(names, rng=np.random.default_rng(8)) ==
            split_records(names, rng=np.random.default_rng(8)))


def test_infeasible_split():
    with pytest.raises(ValueError, match="Cannot stratify"):
        split_records({'a': ['x', 'y']}, (0.7, 0.2, 0.1))
    with pytest.raises(ValueError):
        validate_fractions((0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        validate_fractions((1.2, -0.2, 0.0))


def constant_series(samples=10):
    t = 1e-3 * np.arange(samples)
    return DqSeries(t=t, v=np.ones(samples), i=0.5 * np.ones(samples), dt=1e-3)


def test_dataset_partitions():
    records = {'b': constant_series(), 'a': constant_series(), 'c': constant_series()}
    dataset = Dataset(records=records, scenarios={}, split={'a': 'train', 'b': 'train', 'c': 'test'},
                      setpoints=Setpoints())
    assert list(dataset.partition('train')) == ['a', 'b']
    assert dataset.counts == {'train': 2, 'validation': 0, 'test': 1}
    assert dataset.partition('ood') == {}
    with pytest.raises(ValueError):
        dataset.partition('holdout')


def test_dataset_rejects_inconsistent_split():
    with pytest.raises(ValueError, match="exactly one partition"):
        Dataset(records={'a': constant_series()}, scenarios={}, split={}, setpoints=Setpoints())
    with pytest.raises(ValueError, match="disjoint"):
        Dataset(records={'a': constant_series()}, scenarios={}, split={'a': 'train'}, setpoints=Setpoints(),
                ood={'a': constant_series()})


def test_silent_channels_warn():
    with pytest.warns(RuntimeWarning, match="barely excites"):
        variances = check_excitation({'flat': constant_series()}, Setpoints())
    np.testing.assert_allclose(variances['flat'], 0)


def test_generated_dataset(generated_dataset):
    assert generated_dataset.counts == {'train': 3, 'validation': 3, 'test': 3}
    for series in generated_dataset.records.values():
        assert len(series) == 2001
        assert series.dt == pytest.approx(1e-3)
        assert np.all(np.isfinite(series.v))
    record = generated_dataset.records['magnitude-step-00']
    assert np.max(np.abs(record.v)) > np.abs(record.v[0])
