"""Tests for the supervised, self-supervised and feature consistency losses."""
import numpy as np
import pytest

from rsc_engine.losses import (
    FeatureQueue,
    LabelSet,
    LossConfig,
    LossError,
    LossWeights,
    basic_loss,
    consistency_vector,
    contrastive_g,
    feature_loss,
    self_sup_loss,
    ss_weight,
    ss_weight_matrix,
    total_loss,
)
from rsc_engine.pipeline import Prediction
from rsc_engine.tensor import Tensor, backward


D, K = 2, 2
PARAM_DIM = D + 3 * K + 3


def _prediction(params, joints3d, joints2d, features=None):
    params = params if isinstance(params, Tensor) else Tensor(params)
    p = 3 * K
    return Prediction(params, params[:, :D], params[:, D:D + p], params[:, D + p:],
                      Tensor(joints3d), Tensor(joints2d),
                      None if features is None else Tensor(features))


@pytest.fixture
def labels(rng):
    return LabelSet(
        joints2d=rng.normal(size=(2, K, 2)),
        has_3d=np.array([True, False]),
        joints3d=rng.normal(size=(2, K, 3)),
        beta=rng.normal(size=(2, D)),
        theta=rng.normal(size=(2, 3 * K)),
    )


class TestBasicLoss:

    def test_zero_at_ground_truth(self, labels):
        params = np.concatenate([labels.beta, labels.theta, np.zeros((2, 3))], axis=1)
        pred = _prediction(params, labels.joints3d, labels.joints2d)
        assert basic_loss(pred, labels, LossWeights()).item() == pytest.approx(0.0)

    def test_matches_hand_computation(self, labels, rng):
        params = rng.normal(size=(2, PARAM_DIM))
        joints3d = rng.normal(size=(2, K, 3))
        joints2d = rng.normal(size=(2, K, 2))
        weights = LossWeights(lambda_1=2.0, lambda_2=3.0)
        value = basic_loss(_prediction(params, joints3d, joints2d), labels, weights).item()

        expected = 3.0 * np.sum((joints2d - labels.joints2d) ** 2)
        pose = params[0, :D + 3 * K] - np.concatenate([labels.beta[0], labels.theta[0]])
        expected += np.sum(pose ** 2) + 2.0 * np.sum((joints3d[0] - labels.joints3d[0]) ** 2)
        assert value == pytest.approx(expected / 2.0)

    def test_2d_only_rows_ignore_3d_labels(self, rng):
        labels = LabelSet(joints2d=np.zeros((1, K, 2)), has_3d=np.array([False]),
                          joints3d=np.full((1, K, 3), np.nan))
        pred = _prediction(rng.normal(size=(1, PARAM_DIM)), rng.normal(size=(1, K, 3)), np.ones((1, K, 2)))
        assert basic_loss(pred, labels, LossWeights(lambda_2=1.0)).item() == pytest.approx(2.0 * K)

    def test_sums_over_resolutions(self, labels, rng):
        a = _prediction(rng.normal(size=(2, PARAM_DIM)), rng.normal(size=(2, K, 3)), rng.normal(size=(2, K, 2)))
        b = _prediction(rng.normal(size=(2, PARAM_DIM)), rng.normal(size=(2, K, 3)), rng.normal(size=(2, K, 2)))
        weights = LossWeights()
        both = basic_loss([a, b], labels, weights).item()
        assert both == pytest.approx(basic_loss(a, labels, weights).item() + basic_loss(b, labels, weights).item())

    def test_requires_3d_labels_when_flagged(self):
        with pytest.raises(LossError):
            LabelSet(joints2d=np.zeros((1, K, 2)), has_3d=np.array([True]))

    def test_negative_weight(self):
        with pytest.raises(LossError):
            LossWeights(lambda_s=-0.1)


class TestSelfSupervision:

    def test_gap_weights(self):
        assert ss_weight(1, 3) == 2.0
        assert ss_weight(3, 1) == 0.0
        assert ss_weight(2, 2) == 0.0
        np.testing.assert_array_equal(ss_weight_matrix(3), [[0, 1, 2], [0, 0, 1], [0, 0, 0]])

    def test_directional_value(self, rng):
        outputs = [rng.normal(size=(2, 4)) for _ in range(3)]
        value = self_sup_loss(outputs, 'directional').item()
        expected = sum(
            ss_weight(i + 1, j + 1) * np.sum((outputs[i] - outputs[j]) ** 2) / 2.0
            for i in range(3) for j in range(3)
        )
        assert value == pytest.approx(expected)

    def test_directional_barrier_on_higher_resolution(self, rng):
        high = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        low = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        backward(self_sup_loss([high, low], 'directional'), wrt=[high, low])
        np.testing.assert_array_equal(high.grad, np.zeros((2, 4)))
        np.testing.assert_allclose(low.grad, (low.data - high.data))

    def test_symmetric_has_no_barrier(self, rng):
        a = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        backward(self_sup_loss([a, b], 'symmetric'), wrt=[a, b])
        np.testing.assert_allclose(a.grad, -b.grad)
        assert np.any(a.grad != 0.0)

    def test_symmetric_sums_every_ordered_pair(self, rng):
        outputs = [rng.normal(size=(2, 4)) for _ in range(3)]
        value = self_sup_loss(outputs, 'symmetric').item()
        expected = sum(
            np.sum((outputs[i] - outputs[j]) ** 2) / 2.0
            for i in range(3) for j in range(3) if i != j
        )
        assert value == pytest.approx(expected)
        unordered = sum(np.sum((outputs[i] - outputs[j]) ** 2) / 2.0 for i in range(3) for j in range(i + 1, 3))
        assert value == pytest.approx(2.0 * unordered)

    def test_highest_only_skips_lower_pairs(self, rng):
        outputs = [rng.normal(size=(1, 3)) for _ in range(3)]
        value = self_sup_loss(outputs, 'highest_only').item()
        expected = np.sum((outputs[0] - outputs[1]) ** 2) + 2.0 * np.sum((outputs[0] - outputs[2]) ** 2)
        assert value == pytest.approx(expected)

    def test_identical_outputs_give_zero(self, rng):
        x = rng.normal(size=(2, 4))
        assert self_sup_loss([x, x.copy(), x.copy()], 'directional').item() == 0.0

    def test_needs_two_outputs(self, rng):
        with pytest.raises(LossError):
            self_sup_loss([rng.normal(size=(2, 4))])

    def test_part_weights_scale_squared_error(self):
        params = Tensor(np.ones((1, PARAM_DIM)))
        scaled = consistency_vector(params, D, K, {'beta': 4.0, 'theta': 1.0, 'camera': 0.0}).data
        np.testing.assert_allclose(scaled[0, :D] ** 2, 4.0)
        np.testing.assert_allclose(scaled[0, -3:], 0.0)


class TestFeatureLoss:

    def test_queue_evicts_whole_batches(self, rng):
        queue = FeatureQueue(4)
        for _ in range(3):
            queue.enqueue(rng.normal(size=(2, 3)))
        assert len(queue) == 4
        assert queue.is_full
        assert len(queue.batches()) == 2
        np.testing.assert_allclose(np.linalg.norm(queue.entries(), axis=1), 1.0)

    def test_queue_rejects_non_dividing_batch(self, rng):
        with pytest.raises(LossError):
            FeatureQueue(4).enqueue(rng.normal(size=(3, 3)))

    def test_queue_rejects_zero_vector(self):
        with pytest.raises(LossError):
            FeatureQueue(2).enqueue(np.zeros((2, 3)))

    def test_contrastive_single_negative_closed_form(self):
        anchor = np.array([[1.0, 0.0]])
        positive = np.array([[1.0, 0.0]])
        negative = np.array([[0.0, 1.0]])
        tau = 0.5
        value = contrastive_g(anchor, positive, negative, tau).item()
        expected = -np.log(np.exp(1.0 / tau) / (np.exp(1.0 / tau) + np.exp(0.0)))
        assert value == pytest.approx(expected)

    def test_contrastive_matches_reference_over_random_cases(self, rng):
        def unit(x):
            return x / np.linalg.norm(x, axis=-1, keepdims=True)

        for case in range(200):
            batch, dim = int(rng.integers(1, 5)), int(rng.integers(2, 9))
            size = int(rng.integers(1, 65))
            tau = (0.05, 0.1, 1.0)[case % 3]
            anchor, positive = rng.normal(size=(batch, dim)), rng.normal(size=(batch, dim))
            negatives = rng.normal(size=(size, dim))

            pos = np.sum(unit(anchor) * unit(positive), axis=1, keepdims=True)
            neg = unit(positive) @ unit(negatives).T
            logits = np.concatenate([pos, neg], axis=1) / tau
            top = logits.max(axis=1)
            expected = np.mean(np.log(np.exp(logits - top[:, None]).sum(axis=1)) + top - logits[:, 0])

            value = contrastive_g(anchor, positive, negatives, tau).item()
            assert value == pytest.approx(expected, rel=1e-10, abs=1e-12), f"case {case}"

    @pytest.mark.parametrize('size', [1, 8, 64])
    def test_contrastive_uniform_similarities(self, rng, size):
        positive = rng.normal(size=(3, 5))
        negatives = np.repeat(positive[:1], size, axis=0)
        value = contrastive_g(positive[:1], positive[:1], negatives, 0.1).item()
        assert value == pytest.approx(np.log(size + 1), rel=1e-12)

    def test_contrastive_is_stable_at_small_temperature(self, rng):
        value = contrastive_g(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(8, 4)), 1e-3).item()
        assert np.isfinite(value)

    def test_contrastive_barrier_on_anchor(self, rng):
        anchor = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        positive = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        backward(contrastive_g(anchor, positive, rng.normal(size=(4, 4)), 0.1), wrt=[anchor, positive])
        np.testing.assert_array_equal(anchor.grad, np.zeros((2, 4)))
        assert np.any(positive.grad != 0.0)

    def test_contrastive_needs_negatives(self, rng):
        with pytest.raises(LossError):
            contrastive_g(rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), FeatureQueue(2), 0.1)

    def test_cosine_variant_zero_for_parallel_features(self, rng):
        f = rng.normal(size=(2, 5))
        assert feature_loss([f, 3.0 * f], None, 'CD').item() == pytest.approx(0.0, abs=1e-12)

    def test_mean_squared_variant_is_gap_weighted(self, rng):
        features = [rng.normal(size=(2, 3)) for _ in range(3)]
        value = feature_loss(features, None, 'MS', range_indices=[1, 2, 4]).item()
        expected = (
            np.sum((features[0] - features[1]) ** 2) + 3.0 * np.sum((features[0] - features[2]) ** 2)
            + 2.0 * np.sum((features[1] - features[2]) ** 2)
        ) / 2.0
        assert value == pytest.approx(expected)

    def test_cl_without_queue(self, rng):
        with pytest.raises(LossError):
            feature_loss([rng.normal(size=(2, 3))] * 2, FeatureQueue(4), 'CL')


class TestTotalLoss:

    def _predictions(self, rng, count):
        return [
            _prediction(rng.normal(size=(2, PARAM_DIM)), rng.normal(size=(2, K, 3)),
                        rng.normal(size=(2, K, 2)), rng.normal(size=(2, 5)))
            for _ in range(count)
        ]

    def test_composition(self, labels, rng):
        preds = self._predictions(rng, 2)
        weights = LossWeights(lambda_s=0.5, lambda_f=0.25)
        value, terms = total_loss(preds, labels, weights, LossConfig('directional', 'MS'), range_indices=[1, 2])
        assert set(terms) == {'L_b', 'L_s', 'L_f', 'total'}
        assert terms['total'] == pytest.approx(terms['L_b'] + 0.5 * terms['L_s'] + 0.25 * terms['L_f'])
        assert value.item() == pytest.approx(terms['total'])

    def test_single_resolution_has_only_basic_term(self, labels, rng):
        _, terms = total_loss(self._predictions(rng, 1), labels, LossWeights(), LossConfig('directional', 'CL'))
        assert terms['L_s'] == 0.0 and terms['L_f'] == 0.0
        assert terms['total'] == pytest.approx(terms['L_b'])

    def test_disabled_terms(self, labels, rng):
        _, terms = total_loss(self._predictions(rng, 3), labels, LossWeights(), LossConfig('off', 'off'))
        assert terms['total'] == pytest.approx(terms['L_b'])

    def test_unknown_modes(self):
        with pytest.raises(LossError):
            LossConfig(ss_mode='sideways')
        with pytest.raises(LossError):
            LossConfig(feature_variant='XY')
        with pytest.raises(LossError):
            LossConfig(tau=0.0)
