import numpy as np
import pytest

from complexphase.config import (DEFAULTS, build_plant, build_scenarios, derive_seed, ident_config, load_config,
                                 substream)


def write_config(tmp_path, text):
    path = tmp_path / 'run.toml'
    path.write_text(text)
    return path


def test_defaults_are_valid():
    config = load_config(environ={})
    assert config == DEFAULTS
    assert build_plant(config).kind == 'droop'


def test_default_records_at_the_integration_step_from_rest():
    config = load_config(environ={})
    assert config['simulation']['dt_record'] == 5e-5
    assert config['simulation']['dt_record'] == config['simulation']['dt_sim']
    assert config['identify']['initial_state'] == 'zero'
    assert ident_config(config).initial_state == 'zero'


def test_file_overrides_defaults(tmp_path):
    path = write_config(tmp_path, 'seed = 7\n[plant]\nkind = "dvoc"\n[plant.dvoc]\neta_gain = 15\n')
    config = load_config(path, environ={})
    assert config['seed'] == 7
    assert config['plant']['dvoc']['eta_gain'] == 15.0
    assert build_plant(config).params.eta_gain == 15.0
    assert config['plant']['droop'] == DEFAULTS['plant']['droop']


def test_unknown_field_is_named(tmp_path):
    path = write_config(tmp_path, '[identify]\nmax_iter = 10\n')
    with pytest.raises(ValueError, match="Unknown configuration field 'identify.max_iter'"):
        load_config(path, environ={})


def test_wrong_type_is_named(tmp_path):
    path = write_config(tmp_path, '[identify]\nmax_iters = "many"\n')
    with pytest.raises(ValueError, match="'identify.max_iters' should be of type int"):
        load_config(path, environ={})


def test_invalid_values_are_refused(tmp_path):
    path = write_config(tmp_path, '[split]\nfractions = [0.5, 0.5, 0.5]\n')
    with pytest.raises(ValueError, match="split.fractions"):
        load_config(path, environ={})
    path = write_config(tmp_path, '[simulation]\ntarget_dt = 0.00025\n')
    with pytest.raises(ValueError, match="integer multiple"):
        load_config(path, environ={})


def test_broken_toml_names_file(tmp_path):
    path = write_config(tmp_path, 'seed = \n')
    with pytest.raises(ValueError, match="run.toml"):
        load_config(path, environ={})


def test_environment_overrides(tmp_path):
    config = load_config(environ={'COMPLEXPHASE_OUTPUT_DIR': str(tmp_path), 'COMPLEXPHASE_THREADS': '4'})
    assert config['output_dir'] == str(tmp_path)
    assert config['threads'] == 4
    with pytest.raises(ValueError, match="COMPLEXPHASE_THREADS"):
        load_config(environ={'COMPLEXPHASE_THREADS': 'four'})


def test_model_path_is_relative_to_config_file(tmp_path):
    path = write_config(tmp_path, '[plant]\nkind = "normalform"\n[plant.normalform]\nmodel = "model.json"\n')
    config = load_config(path, environ={})
    assert config['plant']['normalform']['model'] == str(tmp_path / 'model.json')


def test_normal_form_plant_needs_a_model(tmp_path):
    path = write_config(tmp_path, '[plant]\nkind = "normalform"\n')
    with pytest.raises(ValueError, match="plant.normalform.model"):
        load_config(path, environ={})


def test_substreams_are_deterministic_and_distinct():
    np.testing.assert_array_equal(substream(3, 'split').random(4), substream(3, 'split').random(4))
    assert not np.array_equal(substream(3, 'split').random(4), substream(3, 'restarts').random(4))
    assert derive_seed(3, 'a') == derive_seed(3, 'a')
    assert derive_seed(3, 'a') != derive_seed(4, 'a')


def test_scenarios_follow_the_seed():
    config = load_config(environ={})
    first, ood = build_scenarios(config)
    second, _ = build_scenarios(config)
    assert [scenario.to_dict() for scenario in first] == [scenario.to_dict() for scenario in second]
    assert len(first) == 9
    assert [scenario.name for scenario in ood] == ['ood-load-step', 'ood-islanding']


def test_ident_config_carries_seed():
    config = load_config(environ={})
    ident = ident_config(config, n_ivars=3)
    assert ident.n_ivars == 3
    assert ident.seed == config['seed']
    assert ident.max_iters == 2000
