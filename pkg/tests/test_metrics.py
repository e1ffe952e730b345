"""Tests for Procrustes alignment, joint errors and evaluation reports."""
import numpy as np
import pytest

from rsc_engine.body_model import keypoints, rodrigues
from rsc_engine.metrics import (
    METRICS_HEADER,
    AlignmentError,
    EvalReport,
    EvalRow,
    EvaluationError,
    evaluate,
    evaluate_network,
    evaluation_sizes,
    format_table,
    mean_reprojection,
    mpjpe,
    procrustes_align,
    write_metrics_csv,
)
from rsc_engine.network import NetworkError, ResolutionScheme, SchemeMismatchError


def _oracle(model, camera, samples):
    truth = {s.source_id: keypoints(model, s.scene.params, camera[0], camera[1]) for s in samples}

    def run(images, range_index, pixel_sizes, source_ids):
        assert images.shape[0] == len(source_ids) == len(pixel_sizes)
        return (np.stack([truth[i][0] for i in source_ids]),
                np.stack([truth[i][1] for i in source_ids]))

    return run


def _row(size=13, mpjpe_value=1.5):
    return EvalRow(size, 2, 'midpoint', mpjpe_value, 0.75, 4, 2.0)


class TestProcrustes:

    def test_recovers_similarity_transform(self, rng):
        gt = rng.normal(size=(8, 3))
        rotation = rodrigues(np.array([0.3, -0.4, 1.1])).data
        pred = 2.5 * gt @ rotation.T + np.array([1.0, -2.0, 0.5])
        r, s, t, aligned = procrustes_align(pred, gt)
        np.testing.assert_allclose(aligned, gt, atol=1e-9)
        assert s == pytest.approx(0.4)
        assert np.linalg.det(r) == pytest.approx(1.0)
        assert mpjpe(pred, gt, aligned=True) == pytest.approx(0.0, abs=1e-9)

    def test_never_reflects(self, rng):
        gt = rng.normal(size=(6, 3))
        mirrored = gt * np.array([-1.0, 1.0, 1.0])
        rotation = procrustes_align(mirrored, gt)[0]
        assert np.linalg.det(rotation) == pytest.approx(1.0)

    def test_aligned_error_never_exceeds_raw(self, rng):
        for _ in range(1000):
            gt = rng.normal(size=(12, 3))
            pred = rng.normal(size=(12, 3)) + rng.normal(scale=2.0, size=3)
            assert mpjpe(pred, gt, aligned=True) <= mpjpe(pred, gt) + 1e-9

    def test_uniform_offset(self, rng):
        gt = rng.normal(size=(12, 3))
        pred = gt + np.array([3.0, 0.0, 4.0])
        assert abs(mpjpe(pred, gt) - 5.0) < 1e-12
        assert mpjpe(pred, gt, aligned=True) < 1e-9

    def test_mpjpe_is_mean_distance(self):
        gt = np.zeros((2, 3))
        pred = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
        assert mpjpe(pred, gt) == pytest.approx(3.0)

    @pytest.mark.parametrize('pred, gt', [
        (np.zeros((2, 3)), np.ones((2, 3))),
        (np.ones((4, 3)), np.arange(12.0).reshape(4, 3)),
        (np.arange(12.0).reshape(4, 3), np.ones((4, 3))),
    ])
    def test_degenerate_inputs(self, pred, gt):
        with pytest.raises(AlignmentError):
            procrustes_align(pred, gt)

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            mpjpe(np.zeros((3, 3)), np.zeros((4, 3)))


class TestReports:

    def test_csv_layout(self, tmp_path):
        reports = [('Ba', EvalReport([_row(13), _row(8)])), ('RA', EvalReport([_row(13, 1.25)]))]
        path = write_metrics_csv(tmp_path / 'out' / 'metrics.csv', reports)
        lines = path.read_text().splitlines()
        assert lines[0] == ','.join(METRICS_HEADER)
        assert lines[1] == 'Ba,13,1.500000,0.750000,4'
        assert lines[3] == 'RA,13,1.250000,0.750000,4'
        assert len(lines) == 4

    def test_dict_round_trip(self):
        report = EvalReport([_row(13), _row(4)])
        again = EvalReport.from_dicts(report.to_dicts())
        assert again.to_dicts() == report.to_dicts()

    def test_means_and_midpoints(self):
        report = EvalReport([_row(13, 1.0), _row(8, 3.0), EvalRow(16, 1, 'canonical', 5.0, 1.0, 4, 1.0)])
        assert report.means()['mpjpe'] == pytest.approx(3.0)
        assert [r.pixel_size for r in report.midpoint_rows()] == [13, 8]

    def test_empty_report(self):
        with pytest.raises(EvaluationError):
            EvalReport([])

    def test_table_mentions_every_cell(self):
        table = format_table([('Ba', EvalReport([_row()])), ('RA+SS', EvalReport([_row()]))])
        assert 'Ba' in table and 'RA+SS' in table


class TestEvaluate:

    def test_plan_order(self, scheme):
        plan = evaluation_sizes(scheme, include_first=True, sizes=[5])
        assert plan == [(16, 'canonical'), (13, 'midpoint'), (8, 'midpoint'), (4, 'midpoint'), (5, 'sweep')]

    def test_plan_rejects_out_of_scheme_size(self, scheme):
        with pytest.raises(NetworkError):
            evaluation_sizes(scheme, sizes=[2])

    def test_oracle_scores_zero(self, samples, scheme, model, camera):
        report = evaluate(_oracle(model, camera, samples), samples, scheme, model, camera, batch_size=3)
        assert [r.pixel_size for r in report.rows] == scheme.midpoints()
        for row in report.rows:
            assert row.n == len(samples)
            assert row.mpjpe == pytest.approx(0.0, abs=1e-12)
            assert row.mpjpe_pa == pytest.approx(0.0, abs=1e-6)
            assert row.reproj_px == pytest.approx(0.0, abs=1e-12)

    def test_predictor_sees_range_of_each_size(self, samples, scheme, model, camera):
        seen = []
        oracle = _oracle(model, camera, samples)

        def recording(images, range_index, pixel_sizes, source_ids):
            seen.append((pixel_sizes[0], range_index))
            assert images.shape[-1] == scheme.canonical_size
            return oracle(images, range_index, pixel_sizes, source_ids)

        evaluate(recording, samples[:2], scheme, model, camera, sizes=[11, 3])
        assert sorted(set(seen)) == [(3, 4), (4, 4), (8, 3), (11, 2), (13, 2)]

    def test_empty_set(self, scheme, model, camera):
        with pytest.raises(EvaluationError):
            evaluate(lambda *a: None, [], scheme, model, camera)

    def test_network_report(self, tiny_net, samples, scheme, model, camera):
        report = evaluate_network(tiny_net, samples[:3], scheme, model, camera, include_first=True)
        assert len(report.rows) == scheme.num_ranges
        assert all(np.isfinite(r.mpjpe) and np.isfinite(r.mpjpe_pa) for r in report.rows)
        assert np.isfinite(mean_reprojection(tiny_net, model, camera, samples[:3], range_index=2))

    def test_network_scheme_mismatch(self, tiny_net, samples, model, camera):
        other = ResolutionScheme(16, (16, 8, 4))
        with pytest.raises(SchemeMismatchError):
            evaluate_network(tiny_net, samples[:1], other, model, camera)
