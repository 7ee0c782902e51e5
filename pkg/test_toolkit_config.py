"""Tests for configuration loading, presets and the per-command settings."""

import copy
import logging
from pathlib import Path

import pytest
import yaml

from errors import ConfigError
from mine_estimator import critic_from_layout
from toolkit_config import (generate, generator_configs, load_configuration, preset_dims,
                            resolve_preset, setup_logging, strategy_config, sweep_settings,
                            train_missing_settings, verify_settings, estimate_settings,
                            gen_settings)

REPO_CONFIG = Path(__file__).parent / 'config.yaml'


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('COMPLEMENTARITY_CONFIG', 'COMPLEMENTARITY_OUTPUT_ROOT', 'COMPLEMENTARITY_LOG_LEVEL'):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def config():
    return load_configuration(str(REPO_CONFIG))


def _with(config, section, **values):
    updated = copy.deepcopy(config)
    updated.setdefault(section, {}).update(values)
    return updated


class TestLoading:
    def test_defaults_are_filled(self, config):
        assert config['output']['output_dir'] == './runs'
        assert config['logging']['level'] == 'INFO'
        assert 'excel' in config['output']['formats']

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv('COMPLEMENTARITY_OUTPUT_ROOT', '/tmp/elsewhere')
        monkeypatch.setenv('COMPLEMENTARITY_LOG_LEVEL', 'debug')
        config = load_configuration(str(REPO_CONFIG))
        assert config['output']['output_dir'] == '/tmp/elsewhere'
        assert config['logging']['level'] == 'DEBUG'

    def test_config_path_from_environment(self, monkeypatch, tmp_path):
        path = tmp_path / 'alt.yaml'
        path.write_text(yaml.safe_dump({'run': {'seed': 9}}))
        monkeypatch.setenv('COMPLEMENTARITY_CONFIG', str(path))
        assert load_configuration()['run']['seed'] == 9

    def test_missing_explicit_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_configuration(str(tmp_path / 'absent.yaml'))

    def test_unknown_output_format(self, tmp_path):
        path = tmp_path / 'bad.yaml'
        path.write_text(yaml.safe_dump({'output': {'formats': ['json', 'pdf']}}))
        with pytest.raises(ConfigError) as info:
            load_configuration(str(path))
        assert info.value.field == 'output.formats'

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / 'bad.yaml'
        path.write_text('run: [unclosed\n')
        with pytest.raises(ConfigError):
            load_configuration(str(path))

    def test_setup_logging_writes_file(self, tmp_path):
        log_file = tmp_path / 'logs' / 'run.log'
        logger = setup_logging({'logging': {'level': 'INFO', 'file': str(log_file), 'console': False}})
        logger.info("hello")
        logging.getLogger('complementarity.tables').warning("child")
        for handler in logging.getLogger().handlers:
            handler.flush()
        text = log_file.read_text()
        assert 'hello' in text and 'complementarity.tables' in text


class TestPresets:
    def test_dims_follow_generator(self, config):
        assert preset_dims(resolve_preset(config, 'synthetic-2mod')) == (200, 100)
        assert preset_dims(resolve_preset(config, 'synthetic-4mod')) == (50, 50, 50, 50)
        assert preset_dims(resolve_preset(config, 'remix')) == (32, 32)

    def test_expected_dims_filled_in(self, config):
        preset = resolve_preset(config, 'desk')
        assert preset.estimator.expected_dims == (20, 10)
        assert preset.estimator.train.epochs == 40
        assert preset.estimator.parallel == config['run']['parallel']

    @pytest.mark.parametrize('name, num_classes, shapes', [
        ('synthetic-2mod', 2, [(1000, 300), (200, 1000), (10, 200), (12, 12), (1, 12)]),
        ('synthetic-4mod', 2, [(1000, 200), (500, 1000), (100, 500), (12, 102), (1, 12)]),
        ('remix', 10, [(1000, 64), (100, 1000), (110, 110), (1, 110)]),
        ('desk', 2, [(64, 30), (8, 64), (12, 10), (1, 12)]),
    ])
    def test_label_critic_layouts(self, config, name, num_classes, shapes):
        preset = resolve_preset(config, name)
        dims = preset_dims(preset)
        est = preset.estimator
        critic = critic_from_layout(dims[0], sum(dims[1:]), est.label_hidden, num_classes,
                                    est.label_concat_after)
        assert critic.mlp.shapes() == shapes
        assert critic.mlp.activation[critic.mlp.label_concat_at] == 'elu'

    def test_label_critic_without_room_after_slot(self, config):
        config = copy.deepcopy(config)
        config['presets']['desk']['estimator']['label_hidden'] = [64]
        with pytest.raises(ConfigError) as info:
            resolve_preset(config, 'desk')
        assert info.value.field == 'presets.desk.estimator.label_hidden'

    def test_unknown_preset(self, config):
        with pytest.raises(ConfigError) as info:
            resolve_preset(config, 'nope')
        assert info.value.field == 'preset'

    def test_remix_schedule(self, config):
        optimizer = resolve_preset(config, 'remix').estimator.train.optimizer
        assert optimizer.lr_at(39) == pytest.approx(1e-3)
        assert optimizer.lr_at(40) == pytest.approx(1e-4)

    def test_alpha_override_rejected_with_path(self, config):
        preset = resolve_preset(config, 'desk')
        with pytest.raises(ConfigError) as info:
            generator_configs(preset, seed=0, alpha=1.5)
        assert info.value.field == 'presets.desk.gen.alpha'

    def test_sigma_override_for_remix(self, config):
        pool, remix = generator_configs(resolve_preset(config, 'remix'), seed=3, sigma=0.5)
        assert remix.sigma == 0.5 and remix.seed == 3
        assert pool.num_classes == remix.num_classes == 10

    def test_generate_desk(self, config):
        train, val = generate(resolve_preset(config, 'desk'), seed=1, alpha=0.5)
        assert train.n_rows + val.n_rows == 600
        assert train.dims == [20, 10]

    def test_strategy_config_uses_model_section(self, config):
        preset = resolve_preset(config, 'desk')
        cfg = strategy_config(preset, config['train_missing'], 'UmeMma', seed=2)
        assert cfg.hidden == 32 and cfg.epochs == 20 and cfg.phase2_epochs == 10
        assert cfg.drop_probs == (0.3,)
        assert cfg.phase1.lr == pytest.approx(3e-3)


class TestSections:
    def test_gen_rejects_bad_alpha(self, config):
        with pytest.raises(ConfigError):
            gen_settings(_with(config, 'gen', alpha=1.5), preset='desk')

    def test_estimate_subset_is_one_based(self, config):
        settings = estimate_settings(config, preset='desk', subset='2')
        assert settings.subset.s1 == (1,)
        assert settings.normalizer_floor == pytest.approx(0.02)

    def test_estimate_bad_mode(self, config):
        with pytest.raises(ConfigError) as info:
            estimate_settings(_with(config, 'estimate', normalizer_mode='magic'))
        assert info.value.field == 'estimate.normalizer_mode'

    def test_sweep_empty_seeds(self, config):
        with pytest.raises(ConfigError) as info:
            sweep_settings(_with(config, 'sweep', seeds=[]))
        assert info.value.field == 'sweep.seeds'

    def test_sweep_duplicate_seeds(self, config):
        with pytest.raises(ConfigError):
            sweep_settings(_with(config, 'sweep', seeds=[1, 1]))

    def test_sweep_seed_override(self, config):
        assert sweep_settings(config, seed=7).seeds == [7]

    def test_sweep_empty_grid(self, config):
        with pytest.raises(ConfigError) as info:
            sweep_settings(_with(config, 'sweep', values=[]))
        assert info.value.field == 'sweep.values'

    def test_sweep_alpha_out_of_range(self, config):
        with pytest.raises(ConfigError):
            sweep_settings(_with(config, 'sweep', values=[0.5, 1.5]))

    def test_sigma_sweep_needs_remix(self, config):
        with pytest.raises(ConfigError):
            sweep_settings(_with(config, 'sweep', parameter='sigma', values=[1.0]))
        settings = sweep_settings(_with(config, 'sweep', parameter='sigma', values=[0.0, 1.0],
                                        preset='remix'))
        assert settings.values == [0.0, 1.0]

    def test_sweep_unknown_strategy(self, config):
        with pytest.raises(ConfigError):
            sweep_settings(_with(config, 'sweep', strategies=['Oracle']))

    def test_verify_cap_range(self, config):
        with pytest.raises(ConfigError):
            verify_settings(_with(config, 'verify_bounds', cap=17))
        assert verify_settings(config, seed=5).seed == 5

    def test_train_missing_needs_strategies(self, config):
        with pytest.raises(ConfigError):
            train_missing_settings(_with(config, 'train_missing', strategies=[]))

    def test_train_missing_bad_drop_probability(self, config):
        with pytest.raises(ConfigError):
            train_missing_settings(_with(config, 'train_missing', drop_probs=[1.0]))

    def test_negative_seed(self, config):
        with pytest.raises(ConfigError):
            verify_settings(config, seed=-1)
