"""Training losses: supervised, cross-resolution consistency and feature consistency."""
import logging
from collections import deque
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .pipeline import Prediction
from .tensor import Tensor, stop_gradient


logger = logging.getLogger('rsc_engine')

SS_MODES = ('off', 'directional', 'symmetric', 'highest_only')
FEATURE_VARIANTS = ('off', 'MS', 'CD', 'CL')


class LossError(Exception):
    """Exception raised for invalid loss inputs."""
    pass


class LossWeights:
    """Balances of the supervised terms and of the total loss."""

    def __init__(self, lambda_1: float = 5.0, lambda_2: float = 5.0,
                 lambda_s: float = 0.1, lambda_f: float = 0.1):
        values = {'lambda_1': lambda_1, 'lambda_2': lambda_2, 'lambda_s': lambda_s, 'lambda_f': lambda_f}
        negative = [name for name, value in values.items() if value < 0]
        if negative:
            raise LossError(f"Loss weights must be nonnegative: {negative}")
        self.lambda_1 = float(lambda_1)
        self.lambda_2 = float(lambda_2)
        self.lambda_s = float(lambda_s)
        self.lambda_f = float(lambda_f)


class LabelSet:
    """Batched ground truth; 3D fields are only read for rows with has_3d."""

    def __init__(self, joints2d: Optional[np.ndarray], has_3d: Optional[np.ndarray] = None,
                 joints3d: Optional[np.ndarray] = None, beta: Optional[np.ndarray] = None,
                 theta: Optional[np.ndarray] = None):
        self.joints2d = None if joints2d is None else np.asarray(joints2d, dtype=np.float64)
        batch = 0 if self.joints2d is None else self.joints2d.shape[0]
        self.has_3d = np.zeros(batch, dtype=bool) if has_3d is None else np.asarray(has_3d, dtype=bool)
        self.joints3d = None if joints3d is None else np.asarray(joints3d, dtype=np.float64)
        self.beta = None if beta is None else np.asarray(beta, dtype=np.float64)
        self.theta = None if theta is None else np.asarray(theta, dtype=np.float64)
        if self.has_3d.any() and (self.joints3d is None or self.beta is None or self.theta is None):
            raise LossError("Rows flagged has_3d need joints3d, beta and theta labels")


class LossConfig:
    """Which consistency terms are active and how they are shaped."""

    def __init__(self, ss_mode: str = 'directional', feature_variant: str = 'CL', tau: float = 0.1,
                 part_weights: Optional[Dict[str, float]] = None, include_camera: bool = True):
        if ss_mode not in SS_MODES:
            raise LossError(f"Unknown self-supervision mode: {ss_mode}")
        if feature_variant not in FEATURE_VARIANTS:
            raise LossError(f"Unknown feature-loss variant: {feature_variant}")
        if tau <= 0:
            raise LossError(f"Temperature must be positive, got {tau}")
        self.ss_mode = ss_mode
        self.feature_variant = feature_variant
        self.tau = float(tau)
        weights = {'beta': 1.0, 'theta': 1.0, 'camera': 1.0}
        weights.update(part_weights or {})
        if not include_camera:
            weights['camera'] = 0.0
        self.part_weights = weights


def _as_list(predictions: Union[Prediction, Sequence[Prediction]]) -> List[Prediction]:
    if isinstance(predictions, Prediction):
        return [predictions]
    return list(predictions)


# ---------------------------------------------------------------------------
# Supervised loss
# ---------------------------------------------------------------------------

def basic_loss(predictions: Union[Prediction, Sequence[Prediction]], labels: LabelSet,
               weights: LossWeights) -> Tensor:
    """Batch-mean supervised loss summed over resolutions.

    Per sample: |[beta, theta] - [beta_g, theta_g]|^2 + lambda_1 |X - X_g|^2
    + lambda_2 |J - J_g|^2, with the first two terms only for has_3d rows.

    Raises:
        LossError: If 2D labels are missing or shapes disagree
    """
    if labels.joints2d is None:
        raise LossError("2D keypoint labels are required")

    total = None
    for pred in _as_list(predictions):
        batch = pred.joints2d.shape[0]
        if labels.joints2d.shape != pred.joints2d.shape:
            raise LossError(f"2D label shape {labels.joints2d.shape} != prediction {pred.joints2d.shape}")

        term = weights.lambda_2 * T.squared_l2(pred.joints2d - labels.joints2d)
        rows = np.flatnonzero(labels.has_3d)
        if rows.size:
            pose = T.concat([T.take(pred.beta, rows), T.take(pred.theta, rows)], axis=1)
            target = np.concatenate([labels.beta[rows], labels.theta[rows]], axis=1)
            term = term + T.squared_l2(pose - target)
            term = term + weights.lambda_1 * T.squared_l2(T.take(pred.joints3d, rows) - labels.joints3d[rows])
        term = term / float(batch)
        total = term if total is None else total + term
    if total is None:
        raise LossError("basic_loss needs at least one prediction")
    return total


# ---------------------------------------------------------------------------
# Self-supervision
# ---------------------------------------------------------------------------

def ss_weight(i: int, j: int) -> float:
    """Gap weight: j - i when j is a lower resolution than i, else 0."""
    return float(j - i) if j > i else 0.0


def ss_weight_matrix(num_ranges: int) -> np.ndarray:
    """(P, P) matrix of gap weights indexed by 0-based range."""
    return np.array([[ss_weight(i, j) for j in range(1, num_ranges + 1)] for i in range(1, num_ranges + 1)])


def consistency_vector(params: Tensor, num_betas: int, num_joints: int,
                       part_weights: Optional[Dict[str, float]] = None) -> Tensor:
    """Parameter vector with each part scaled so its squared error is weighted by part_weights."""
    if not part_weights or all(w == 1.0 for w in part_weights.values()):
        return params
    scale = np.concatenate([
        np.full(num_betas, np.sqrt(part_weights.get('beta', 1.0))),
        np.full(3 * num_joints, np.sqrt(part_weights.get('theta', 1.0))),
        np.full(3, np.sqrt(part_weights.get('camera', 1.0))),
    ])
    return params * scale


def _pairs(count: int, ranges: Sequence[int], mode: str) -> List[Tuple[int, int, float, bool]]:
    """(i, j, weight, barrier) over list positions for a consistency mode."""
    if mode == 'symmetric':
        return [(i, j, 1.0, False) for i in range(count) for j in range(count) if i != j]
    pairs = []
    for i in range(count):
        if mode == 'highest_only' and i != 0:
            continue
        for j in range(i + 1, count):
            weight = ss_weight(ranges[i], ranges[j])
            if weight > 0:
                pairs.append((i, j, weight, True))
    return pairs


def self_sup_loss(outputs: Sequence[Tensor], mode: str = 'directional',
                  range_indices: Optional[Sequence[int]] = None) -> Tensor:
    """Output consistency across resolutions of the same images.

    Args:
        outputs: (B, D) parameter vectors ordered from highest to lowest resolution
        mode: 'directional' (gap weights, higher resolution behind a barrier),
            'symmetric' (every ordered pair, unit weights, no barrier) or
            'highest_only' (directional pairs anchored on the first output)
        range_indices: 1-based range of each output (default 1..P)

    Raises:
        LossError: On fewer than two outputs or an unknown mode
    """
    if len(outputs) < 2:
        raise LossError(f"Self-supervision needs at least two outputs, got {len(outputs)}")
    if mode not in SS_MODES or mode == 'off':
        raise LossError(f"Invalid self-supervision mode: {mode}")
    ranges = list(range_indices) if range_indices is not None else list(range(1, len(outputs) + 1))

    total = T.zeros(())
    for i, j, weight, barrier in _pairs(len(outputs), ranges, mode):
        anchor = stop_gradient(outputs[i]) if barrier else outputs[i]
        batch = outputs[j].shape[0]
        total = total + (weight / batch) * T.squared_l2(anchor - outputs[j])
    return total


# ---------------------------------------------------------------------------
# Feature consistency
# ---------------------------------------------------------------------------

class FeatureQueue:
    """FIFO of detached, unit-normalized feature mini-batches."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise LossError(f"Queue capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._batches: deque = deque()
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def is_full(self) -> bool:
        return self._size >= self.capacity

    def enqueue(self, features) -> None:
        """Append one mini-batch and evict whole oldest batches beyond capacity.

        Raises:
            LossError: If the batch does not divide capacity or has a zero row
        """
        data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        if data.ndim != 2:
            raise LossError(f"Queue entries must be (B, F), got {data.shape}")
        batch = data.shape[0]
        if batch > self.capacity:
            raise LossError(f"Batch of {batch} exceeds queue capacity {self.capacity}")
        if self.capacity % batch != 0:
            raise LossError(f"Batch size {batch} does not divide queue capacity {self.capacity}")
        norms = np.linalg.norm(data, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise LossError("Cannot enqueue a zero-norm feature vector")

        entry = data / norms
        entry.flags.writeable = False
        self._batches.append(entry)
        self._size += batch
        while self._size > self.capacity:
            self._size -= self._batches.popleft().shape[0]

    def entries(self) -> np.ndarray:
        """(Q, F) stored vectors, oldest first."""
        if not self._batches:
            return np.zeros((0, 0))
        return np.concatenate(list(self._batches), axis=0)

    def batches(self) -> List[np.ndarray]:
        return list(self._batches)


def contrastive_g(anchor, positive, queue: Union[FeatureQueue, np.ndarray], tau: float) -> Tensor:
    """(|Q|+1)-way softmax cross-entropy over cosine similarities, batch mean.

    The positive logit pairs the barrier-wrapped anchor with ``positive``;
    negatives pair every queued vector with ``positive``.

    Raises:
        LossError: On an empty queue or a non-positive temperature
        TensorError: If any operand has zero norm
    """
    if tau <= 0:
        raise LossError(f"Temperature must be positive, got {tau}")
    negatives = queue.entries() if isinstance(queue, FeatureQueue) else np.asarray(queue, dtype=np.float64)
    if negatives.size == 0:
        raise LossError("Contrastive loss needs a nonempty queue")

    anchor, positive = T.as_tensor(anchor), T.as_tensor(positive)
    if anchor.ndim == 1:
        anchor = anchor.reshape(1, -1)
        positive = positive.reshape(1, -1)
    batch, dim = positive.shape

    pos = T.cosine_similarity(stop_gradient(anchor), positive, axis=-1).reshape(batch, 1)
    neg = T.cosine_similarity(positive.reshape(batch, 1, dim), negatives.reshape(1, -1, dim), axis=-1)
    logits = T.concat([pos, neg], axis=1) / tau

    shift = np.max(logits.data, axis=1, keepdims=True)
    log_norm = T.log(T.tensor_sum(T.exp(logits - shift), axis=1)) + shift.reshape(batch)
    return T.mean(log_norm - logits[:, 0])


def feature_distance(anchor: Tensor, positive: Tensor, variant: str,
                     queue: Optional[FeatureQueue] = None, tau: float = 0.1) -> Tensor:
    """Batch-mean distance g between barrier-wrapped anchor and positive features."""
    if variant == 'CL':
        return contrastive_g(anchor, positive, queue, tau)
    batch = positive.shape[0]
    if variant == 'MS':
        return T.squared_l2(stop_gradient(anchor) - positive) / float(batch)
    if variant == 'CD':
        return T.mean(1.0 - T.cosine_similarity(stop_gradient(anchor), positive, axis=-1))
    raise LossError(f"Unknown feature-loss variant: {variant}")


def feature_loss(features: Sequence[Tensor], queue: Optional[FeatureQueue], variant: str,
                 tau: float = 0.1, range_indices: Optional[Sequence[int]] = None) -> Tensor:
    """Gap-weighted feature consistency over all higher/lower resolution pairs.

    Raises:
        LossError: On fewer than two feature sets or an unusable queue for CL
    """
    if len(features) < 2:
        raise LossError(f"Feature loss needs at least two feature sets, got {len(features)}")
    if variant == 'CL' and (queue is None or len(queue) == 0):
        raise LossError("Contrastive feature loss enabled with an empty queue")
    ranges = list(range_indices) if range_indices is not None else list(range(1, len(features) + 1))

    total = T.zeros(())
    for i, j, weight, _ in _pairs(len(features), ranges, 'directional'):
        total = total + weight * feature_distance(features[i], features[j], variant, queue, tau)
    return total


def queue_update(queue: FeatureQueue, minibatch_features) -> FeatureQueue:
    """Enqueue a detached mini-batch; returns the same queue."""
    queue.enqueue(minibatch_features)
    return queue


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def total_loss(
    predictions: Sequence[Prediction],
    labels: LabelSet,
    weights: LossWeights,
    config: LossConfig,
    queue: Optional[FeatureQueue] = None,
    range_indices: Optional[Sequence[int]] = None,
    num_betas: Optional[int] = None,
    num_joints: Optional[int] = None
) -> Tuple[Tensor, Dict[str, float]]:
    """L_b + lambda_s L_s + lambda_f L_f over the enabled terms.

    Args:
        predictions: One prediction per active range, highest resolution first
        labels: Shared labels of the source images
        weights: Loss balances
        config: Enabled terms and their shapes
        queue: Feature queue (required for CL)
        range_indices: 1-based range of each prediction
        num_betas: Shape dimension for consistency part weights
        num_joints: Joint count for consistency part weights

    Returns:
        (total loss, {'L_b', 'L_s', 'L_f', 'total'} as floats)
    """
    predictions = _as_list(predictions)
    l_b = basic_loss(predictions, labels, weights)
    total = l_b
    terms = {'L_b': l_b.item(), 'L_s': 0.0, 'L_f': 0.0}

    multi = len(predictions) >= 2
    if config.ss_mode != 'off' and weights.lambda_s > 0 and multi:
        if num_betas is None or num_joints is None:
            outputs = [p.params for p in predictions]
        else:
            outputs = [consistency_vector(p.params, num_betas, num_joints, config.part_weights)
                       for p in predictions]
        l_s = self_sup_loss(outputs, config.ss_mode, range_indices)
        total = total + weights.lambda_s * l_s
        terms['L_s'] = l_s.item()

    if config.feature_variant != 'off' and weights.lambda_f > 0 and multi:
        l_f = feature_loss([p.features for p in predictions], queue, config.feature_variant,
                           config.tau, range_indices)
        total = total + weights.lambda_f * l_f
        terms['L_f'] = l_f.item()

    terms['total'] = total.item()
    return total, terms
