"""Tests for the command-line surface and its exit codes."""
import csv

import pytest
import yaml

from rsc_runner.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, build_parser, collect_overrides, run
from rsc_runner.config import SEED_ENV


TINY_RUN = {
    'seed': 0,
    'model': {'num_vertices': 50, 'num_joints': 6, 'num_betas': 4},
    'scheme': {'canonical_size': 16, 'bounds': [16, 10, 6, 3]},
    'network': {'stem_channels': 4, 'feature_dim': 8, 'num_blocks': 2, 'downsample_after': 1,
                'hidden_dim': 16, 'iterations': 2},
    'data': {'n': 4, 'n_eval': 2},
    'train': {'iterations': 4, 'batch_size': 2, 'learning_rate': 1.0e-3, 'queue_capacity': 4, 'log_every': 1},
    'eval': {'include_first': True, 'batch_size': 2},
}


@pytest.fixture(autouse=True)
def isolated(monkeypatch, tmp_path):
    monkeypatch.delenv(SEED_ENV, raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def tiny_config(tmp_path):
    document = dict(TINY_RUN, output_dir=str(tmp_path / 'run'), data=dict(TINY_RUN['data'], path=str(tmp_path / 'data')))
    path = tmp_path / 'tiny.yaml'
    path.write_text(yaml.safe_dump(document))
    return path


class TestParsing:

    def test_alias_and_explicit_key(self):
        args = build_parser().parse_args(['train', '--seed', '3', '--out', 'x', '--train.batch_size', '4'])
        assert collect_overrides(args) == {'seed': 3, 'output_dir': 'x', 'train.batch_size': 4}

    def test_explicit_key_wins_over_alias(self):
        args = build_parser().parse_args(['gen-data', '--n', '5', '--data.n', '7'])
        assert collect_overrides(args)['data.n'] == 7

    def test_list_values(self):
        args = build_parser().parse_args(['ablate', '--cells', 'Ba, RA', '--scheme.bounds', '[32, 16, 8]'])
        overrides = collect_overrides(args)
        assert overrides['ablation.cells'] == ['Ba', 'RA']
        assert overrides['scheme.bounds'] == [32, 16, 8]

    def test_dump_ppm_default_count(self):
        args = build_parser().parse_args(['gen-data', '--dump-ppm'])
        assert collect_overrides(args)['data.dump_ppm'] == 4


class TestExitCodes:

    def test_unknown_flag(self, capsys):
        assert run(['train', '--train.learning_rat', '0.1']) == EXIT_VALIDATION
        assert 'learning_rat' in capsys.readouterr().err

    def test_missing_command(self):
        assert run([]) == EXIT_VALIDATION

    def test_invalid_value(self, tmp_path):
        assert run(['train', '--out', str(tmp_path), '--train.batch_size', '0']) == EXIT_VALIDATION

    def test_missing_config_file(self, tmp_path):
        assert run(['train', '--config', str(tmp_path / 'absent.yaml')]) == EXIT_VALIDATION

    def test_bad_environment_seed(self, monkeypatch, tmp_path):
        monkeypatch.setenv(SEED_ENV, 'seven')
        assert run(['gradcheck', '--out', str(tmp_path), '--suites', 'primitives']) == EXIT_VALIDATION

    def test_unknown_suite(self, tmp_path):
        assert run(['gradcheck', '--out', str(tmp_path), '--suites', 'bogus']) == EXIT_VALIDATION

    def test_gradcheck_suite_passes(self, tmp_path, capsys):
        assert run(['gradcheck', '--out', str(tmp_path), '--suites', 'primitives']) == EXIT_OK
        assert '✓ primitives' in capsys.readouterr().out

    def test_gradcheck_failure_is_runtime(self, tmp_path, monkeypatch):
        from rsc_runner import commands
        monkeypatch.setattr(commands, 'all_passed', lambda results: False)
        assert run(['gradcheck', '--out', str(tmp_path), '--suites', 'primitives']) == EXIT_RUNTIME

    def test_train_without_dataset(self, tmp_path):
        assert run(['train', '--out', str(tmp_path / 'run'), '--data', str(tmp_path / 'none')]) == EXIT_VALIDATION

    def test_eval_without_checkpoint(self, tiny_config):
        assert run(['gen-data', '--config', str(tiny_config)]) == EXIT_OK
        assert run(['eval', '--config', str(tiny_config)]) == EXIT_VALIDATION

    def test_unknown_cell(self, tiny_config):
        assert run(['gen-data', '--config', str(tiny_config)]) == EXIT_OK
        assert run(['ablate', '--config', str(tiny_config), '--cells', 'Ba,nope']) == EXIT_VALIDATION

    def test_dataset_scheme_mismatch(self, tiny_config):
        assert run(['gen-data', '--config', str(tiny_config)]) == EXIT_OK
        code = run(['train', '--config', str(tiny_config), '--scheme.bounds', '[16, 8, 4]'])
        assert code == EXIT_VALIDATION


class TestEndToEnd:

    def test_generate_train_evaluate(self, tiny_config, tmp_path, capsys):
        assert run(['gen-data', '--config', str(tiny_config)]) == EXIT_OK
        assert (tmp_path / 'data' / 'manifest.yml').exists()

        assert run(['train', '--config', str(tiny_config)]) == EXIT_OK
        run_dir = tmp_path / 'run'
        assert (run_dir / 'checkpoint.rsc').exists()
        assert (run_dir / 'logs' / 'train.log').exists()
        with open(run_dir / 'loss_curve.csv') as f:
            assert len(list(csv.reader(f))) == 5

        assert run(['eval', '--config', str(tiny_config), '--eval.cell', 'RA+SS+CL']) == EXIT_OK
        with open(run_dir / 'metrics.csv') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['cell', 'range_midpoint', 'mpjpe', 'mpjpe_pa', 'n']
        assert [row[1] for row in rows[1:]] == ['16', '13', '8', '4']
        assert all(row[0] == 'RA+SS+CL' and row[4] == '2' for row in rows[1:])
        assert '✓ Metrics written' in capsys.readouterr().out
