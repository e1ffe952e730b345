"""Tests for ablation cells and resumable ablation runs."""
import logging

import pytest

from rsc_engine import ablation
from rsc_engine.ablation import (
    CELLS,
    AblationError,
    cell_directory,
    cell_settings,
    parse_cells,
    run_ablation,
)
from rsc_engine.dataset import Dataset, generate_dataset
from rsc_engine.metrics import METRICS_HEADER

from conftest import TINY_NETWORK


TRAIN = {'iterations': 2, 'batch_size': 2, 'learning_rate': 1e-3, 'queue_capacity': 4, 'log_every': 1}


@pytest.fixture
def dataset(tmp_path, model, scheme, camera):
    root = tmp_path / 'data'
    generate_dataset(root, model, scheme, camera, n_train=4, n_eval=2, seed=0)
    return Dataset.load(root)


class TestCells:

    def test_matrix(self):
        assert len(CELLS) == 10
        assert CELLS['Ba'] == {'resolution_aware': False, 'ss_mode': 'off', 'feature_variant': 'off'}
        assert CELLS['w/o PT']['progressive'] is False
        assert CELLS['SS-o']['ss_mode'] == 'symmetric'

    def test_parse_keeps_order_and_drops_duplicates(self):
        assert parse_cells(['RA', ' Ba', 'RA']) == ['RA', 'Ba']
        assert parse_cells(None) == list(CELLS)

    def test_unknown_cell(self):
        with pytest.raises(AblationError, match='RA\\+XX'):
            parse_cells(['RA+XX'])

    def test_settings_split_network_and_training_keys(self):
        network, training = cell_settings('Ba+SS', dict(TINY_NETWORK), dict(TRAIN))
        assert network['resolution_aware'] is False
        assert training['ss_mode'] == 'directional'
        assert training['feature_variant'] == 'off'
        assert 'resolution_aware' not in training

    def test_directory_names_are_filesystem_safe(self, tmp_path):
        assert cell_directory(tmp_path, 'w/o PT').name == 'w_o_PT'
        assert cell_directory(tmp_path, 'RA+SS+CL').name == 'RA_SS_CL'


class TestRunAblation:

    def test_run_and_resume(self, dataset, scheme, tmp_path, monkeypatch, caplog):
        out = tmp_path / 'ablate'
        results = run_ablation(['Ba', 'RA+SS+CL'], dataset, dict(TINY_NETWORK), dict(TRAIN), 0, out)

        assert [cell for cell, _ in results] == ['Ba', 'RA+SS+CL']
        lines = (out / 'metrics.csv').read_text().splitlines()
        assert lines[0] == ','.join(METRICS_HEADER)
        assert len(lines) == 1 + 2 * len(scheme.midpoints())
        assert (cell_directory(out, 'Ba') / 'checkpoint.rsc').exists()
        assert (cell_directory(out, 'RA+SS+CL') / 'loss_curve.csv').exists()

        def fail(*args, **kwargs):
            raise AssertionError('completed cell was retrained')

        monkeypatch.setattr(ablation, 'train', fail)
        with caplog.at_level(logging.WARNING, logger='rsc_engine'):
            again = run_ablation(['Ba', 'RA+SS+CL'], dataset, dict(TINY_NETWORK), dict(TRAIN), 0, out)
        assert 'already complete' in caplog.text
        assert [r.to_dicts() for _, r in again] == [r.to_dicts() for _, r in results]

    def test_changed_settings_retrain(self, dataset, tmp_path, monkeypatch):
        out = tmp_path / 'ablate'
        run_ablation(['RA'], dataset, dict(TINY_NETWORK), dict(TRAIN), 0, out)
        calls = []
        real_train = ablation.train

        def counting(*args, **kwargs):
            calls.append(1)
            return real_train(*args, **kwargs)

        monkeypatch.setattr(ablation, 'train', counting)
        run_ablation(['RA'], dataset, dict(TINY_NETWORK), dict(TRAIN, learning_rate=5e-4), 0, out)
        assert calls == [1]

    def test_unknown_cell_fails_before_training(self, dataset, tmp_path):
        with pytest.raises(AblationError):
            run_ablation(['Ba', 'nope'], dataset, dict(TINY_NETWORK), dict(TRAIN), 0, tmp_path)
        assert not (tmp_path / 'cells').exists()
