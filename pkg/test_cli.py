"""End-to-end tests of the command line front end on the small desk preset."""

import json
from pathlib import Path

import pytest
import yaml

import complementarity_cli
from complementarity_cli import main
from errors import EXIT_UNDEFINED_METRIC
from sweep_tables import read_sweep

REPO_CONFIG = Path(__file__).parent / 'config.yaml'


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('COMPLEMENTARITY_CONFIG', 'COMPLEMENTARITY_OUTPUT_ROOT', 'COMPLEMENTARITY_LOG_LEVEL'):
        monkeypatch.delenv(name, raising=False)


def _write_config(tmp_path, **sections):
    config = yaml.safe_load(REPO_CONFIG.read_text())
    config['run'] = {'parallel': 1, 'show_progress': False, 'seed': 0}
    config['output'] = {'formats': ['json', 'csv', 'html'], 'output_dir': str(tmp_path / 'runs')}
    config['logging'] = {'level': 'INFO', 'file': str(tmp_path / 'logs' / 'run.log'), 'console': False}
    desk = config['presets']['desk']
    desk['estimator'].update(epochs=3, replicates=1)
    desk['model'].update(epochs=2, phase2_epochs=1)
    config['verify_bounds'] = {'count': 100, 'cap': 4, 'seed': 0}
    config['sweep'].update(preset='desk', values=[0.0, 0.5], seeds=[0], strategies=['Naive'])
    config['train_missing'].update(preset='desk', strategies=['Naive', 'UmeMma'])
    for name, values in sections.items():
        config[name].update(values)
    path = tmp_path / 'config.yaml'
    path.write_text(yaml.safe_dump(config))
    return path


def _run(config_path, *args):
    return main(['--config', str(config_path), '--preset', 'desk', *args])


@pytest.fixture
def generated(tmp_path):
    config = _write_config(tmp_path)
    assert _run(config, 'gen') == 0
    return config, tmp_path / 'runs' / 'desk_seed0'


class TestVerifyBounds:
    def test_no_violations(self, tmp_path):
        assert _run(_write_config(tmp_path), 'verify-bounds') == 0
        payload = json.loads((tmp_path / 'runs' / 'bound_check.json').read_text())
        assert payload['summary']['joints'] == 100
        assert payload['counterexample']['gap'] == pytest.approx(1.0)

    def test_zero_joints(self, tmp_path):
        config = _write_config(tmp_path, verify_bounds={'count': 0})
        assert _run(config, 'verify-bounds') == 0


class TestGen:
    def test_writes_both_splits(self, capsys, generated):
        _, target = generated
        assert (target / 'train.json').exists() and (target / 'val.json').exists()
        assert 'class histogram' in capsys.readouterr().out

    def test_alpha_out_of_range_is_config_error(self, tmp_path):
        assert _run(_write_config(tmp_path), 'gen', '--alpha', '1.5') == 2

    def test_unknown_preset(self, tmp_path):
        assert main(['--config', str(_write_config(tmp_path)), '--preset', 'nope', 'gen']) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(['--config', str(tmp_path / 'absent.yaml'), 'gen']) == 2


class TestEstimate:
    def test_report_written(self, generated):
        config, target = generated
        code = _run(config, 'estimate', str(target), '--subset', '2')
        assert code in (0, EXIT_UNDEFINED_METRIC)
        out = config.parent / 'runs' / 'estimate'
        report = json.loads((out / 'desk_s1-2_seed0.json').read_text())
        assert report['report']['subset'] == [1]
        assert (out / 'desk_s1-2_seed0_terms.csv').exists()
        assert (out / 'desk_s1-2_seed0.html').exists()

    def test_bad_subset(self, generated):
        config, target = generated
        assert _run(config, 'estimate', str(target), '--subset', '3') != 0


class TestSweep:
    def test_sweep_and_resume(self, tmp_path):
        config = _write_config(tmp_path)
        assert _run(config, 'sweep') == 0
        table = tmp_path / 'runs' / 'sweep.csv'
        first = table.read_text()
        assert len(first.splitlines()) == 4
        assert (tmp_path / 'runs' / 'sweep_summary.json').exists()
        assert _run(config, 'sweep') == 0
        assert table.read_text() == first

    def test_crashing_cell_does_not_stop_sweep(self, tmp_path, monkeypatch):
        real = complementarity_cli.estimate_complementarity

        def singular_at_half(train, subset, settings, val=None):
            if train.provenance['config']['alpha'] == 0.5:
                raise ValueError('singular matrix')
            return real(train, subset, settings, val)

        monkeypatch.setattr(complementarity_cli, 'estimate_complementarity', singular_at_half)
        assert _run(_write_config(tmp_path), 'sweep') == 0
        frame = read_sweep(tmp_path / 'runs' / 'sweep.csv').set_index('value')
        assert frame.loc[0.5, 'error'] == 'ValueError: singular matrix'
        assert bool(frame.loc[0.0, 'ok'])

    def test_empty_seed_list(self, tmp_path):
        assert _run(_write_config(tmp_path, sweep={'seeds': []}), 'sweep') == 2


class TestTrainMissing:
    def test_comparison_written(self, generated):
        config, target = generated
        assert _run(config, 'train-missing', str(target)) == 0
        runs = config.parent / 'runs'
        assert (runs / 'models' / 'Naive_seed0.json').exists()
        lines = (runs / 'comparison_desk_seed0.csv').read_text().splitlines()
        assert [line.split(',')[0] for line in lines[2:]] == ['Naive', 'UmeMma']


def test_version():
    assert main(['--version']) == 0
