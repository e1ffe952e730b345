"""Finite-difference verification of reverse-mode gradients."""
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .body_model import forward_model, generate_toy_model, project, regress_joints, rodrigues
from .losses import (
    LabelSet,
    LossConfig,
    LossWeights,
    basic_loss,
    contrastive_g,
    feature_loss,
    self_sup_loss,
    total_loss,
)
from .network import ResolutionScheme, RscNet
from .pipeline import Prediction, predict
from .resample import degrade
from .tensor import Tensor, backward
from .utils import STREAM_EVAL, derive_rng


logger = logging.getLogger('rsc_engine')

DEFAULT_EPSILON = 1e-5
DEFAULT_TOLERANCE = 1e-4
PRIMITIVE_POINTS = 20


class GradCheckError(Exception):
    """Exception raised for an unusable finite-difference setup."""
    pass


class GradReport:
    """Outcome of one finite-difference comparison."""

    def __init__(self, name: str, max_rel_error: float, checked: int, tolerance: float,
                 failures: Optional[List[str]] = None):
        self.name = name
        self.max_rel_error = float(max_rel_error)
        self.checked = int(checked)
        self.tolerance = float(tolerance)
        self.failures = list(failures or [])

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tolerance

    def __repr__(self) -> str:
        status = 'ok' if self.passed else 'FAIL'
        return f"GradReport({self.name}: {status}, max_rel={self.max_rel_error:.3e}, coords={self.checked})"


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = DEFAULT_EPSILON,
    tolerance: float = DEFAULT_TOLERANCE,
    max_coords: Optional[int] = None,
    seed: int = 0,
    name: str = 'op'
) -> GradReport:
    """Compare reverse-mode gradients of fn with central differences.

    Non-scalar outputs are reduced with fixed random weights. The relative
    error of a coordinate is |analytic - numeric| / max(1, |analytic|).

    Args:
        fn: Function of tensors returning a tensor
        inputs: Point at which to differentiate, one array per argument
        epsilon: Central-difference step
        tolerance: Pass threshold on the maximum relative error
        max_coords: Optional cap on perturbed coordinates per input
        seed: Seed for the reduction weights and coordinate subsampling
        name: Label used in the report

    Returns:
        GradReport; non-finite perturbed values are listed as failures

    Raises:
        GradCheckError: If epsilon is not positive
    """
    if epsilon <= 0:
        raise GradCheckError(f"epsilon must be positive, got {epsilon}")
    points = [np.array(x, dtype=np.float64) for x in inputs]
    reference = fn(*[Tensor(x) for x in points])
    reduce_weights = None
    if reference.data.size != 1:
        reduce_weights = derive_rng(seed, STREAM_EVAL, 0).normal(size=reference.shape)

    def scalar(*args) -> Tensor:
        out = fn(*args)
        return out if reduce_weights is None else T.tensor_sum(out * reduce_weights)

    leaves = [Tensor(x, requires_grad=True) for x in points]
    backward(scalar(*leaves), wrt=leaves)

    failures: List[str] = []
    worst = 0.0
    checked = 0
    picker = derive_rng(seed, STREAM_EVAL, 1)
    for index, (point, leaf) in enumerate(zip(points, leaves)):
        coords = np.arange(point.size)
        if max_coords is not None and point.size > max_coords:
            coords = np.sort(picker.choice(point.size, size=max_coords, replace=False))
        analytic = leaf.grad.reshape(-1)
        for c in coords:
            values = []
            for sign in (1.0, -1.0):
                shifted = point.copy().reshape(-1)
                shifted[c] += sign * epsilon
                args = [Tensor(shifted.reshape(point.shape)) if i == index else Tensor(p)
                        for i, p in enumerate(points)]
                values.append(scalar(*args).item())
            if not all(np.isfinite(values)):
                failures.append(f"input {index} coord {c}: non-finite perturbed value {values}")
                continue
            numeric = (values[0] - values[1]) / (2.0 * epsilon)
            error = abs(analytic[c] - numeric) / max(1.0, abs(analytic[c]))
            worst = max(worst, error)
            checked += 1
            if error >= tolerance:
                failures.append(
                    f"input {index} coord {c}: analytic {analytic[c]:.8g} vs numeric {numeric:.8g} (rel {error:.2e})"
                )

    return GradReport(name, worst, checked, tolerance, failures[:10])


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def suite_primitives(seed: int = 0, points: int = PRIMITIVE_POINTS) -> List[GradReport]:
    """Every registered primitive at `points` random inputs."""
    cases = [
        ('add', lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        ('sub', lambda a, b: a - b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
        ('neg', lambda a: -a, lambda r: [r.normal(size=(5,))]),
        ('mul', lambda a, b: a * b, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        ('div', lambda a, b: a / b, lambda r: [r.normal(size=(4,)), _away_from_zero(r, (4,), 0.5, 2.0)]),
        ('exp', T.exp, lambda r: [r.normal(size=(6,))]),
        ('log', T.log, lambda r: [r.uniform(0.5, 2.0, size=(6,))]),
        ('relu', T.relu, lambda r: [_away_from_zero(r, (10,))]),
        ('elementwise', lambda a: T.elementwise(a, np.sin, np.cos, 'sin'), lambda r: [r.normal(size=(5,))]),
        ('matmul', T.matmul, lambda r: [r.normal(size=(3, 3)), r.normal(size=(3, 3))]),
        ('matmul_batched', T.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
        ('conv2d_s1', lambda x, w: T.conv2d(x, w, stride=1), lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3))]),
        ('conv2d_s2', lambda x, w: T.conv2d(x, w, stride=2), lambda r: [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 3, 3))]),
        ('global_avg_pool', T.global_avg_pool, lambda r: [r.normal(size=(2, 3, 4, 4))]),
        ('sum', lambda a: T.tensor_sum(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
        ('mean', lambda a: T.mean(a, axis=0), lambda r: [r.normal(size=(3, 4))]),
        ('squared_l2', lambda a: T.squared_l2(a, axis=-1), lambda r: [r.normal(size=(3, 4))]),
        ('cosine_similarity', lambda a, b: T.cosine_similarity(a, b), lambda r: [r.normal(size=(8,)), r.normal(size=(8,))]),
        ('reshape', lambda a: a.reshape(4, 3) * np.arange(12.0).reshape(4, 3), lambda r: [r.normal(size=(3, 4))]),
        ('transpose', lambda a: T.transpose(a, (1, 0, 2)), lambda r: [r.normal(size=(2, 3, 4))]),
        ('getitem', lambda a: a[1:, ::2], lambda r: [r.normal(size=(3, 4))]),
        ('getitem_fancy', lambda a: a[np.array([0, 2, 2])], lambda r: [r.normal(size=(3, 4))]),
        ('take', lambda a: T.take(a, [1, 1, 0], axis=1), lambda r: [r.normal(size=(2, 3))]),
        ('concat', lambda a, b: T.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        ('stack', lambda a, b: T.stack([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    ]
    reports = []
    for case_index, (name, fn, make) in enumerate(cases):
        worst, checked, failures = 0.0, 0, []
        for point in range(points):
            rng = derive_rng(seed, STREAM_EVAL, 100 + case_index, point)
            report = finite_diff_check(fn, make(rng), seed=seed, name=name)
            worst = max(worst, report.max_rel_error)
            checked += report.checked
            failures += report.failures
        reports.append(GradReport(name, worst, checked, DEFAULT_TOLERANCE, failures))
    return reports


def suite_body_model(seed: int = 0) -> List[GradReport]:
    """Rotation, skinning, joint regression and projection."""
    model = generate_toy_model(seed, num_vertices=50, num_joints=6, num_betas=10)
    rng = derive_rng(seed, STREAM_EVAL, 200)
    k = model.num_joints
    beta = 0.5 * rng.normal(size=(2, model.num_betas))
    theta = 0.3 * rng.normal(size=(2, 3 * k))
    joints = rng.normal(size=(2, k, 3))
    delta = np.array([[0.1, -0.2, 10.0], [0.0, 0.3, 12.0]])

    return [
        finite_diff_check(rodrigues, [rng.normal(size=(4, 3))], seed=seed, name='rodrigues'),
        finite_diff_check(rodrigues, [1e-6 * rng.normal(size=(3,))], seed=seed, name='rodrigues_small_angle'),
        finite_diff_check(lambda b, t: forward_model(model, b, t), [beta, theta], seed=seed,
                          max_coords=40, name='forward_model'),
        finite_diff_check(lambda m: regress_joints(model, m), [rng.normal(size=(model.num_vertices, 3))],
                          seed=seed, max_coords=40, name='regress_joints'),
        finite_diff_check(lambda x, d: project(x, d, 100.0, np.array([8.0, 8.0])), [joints, delta],
                          seed=seed, name='project'),
        finite_diff_check(
            lambda b, t, d: project(regress_joints(model, forward_model(model, b, t)), d, 100.0, np.zeros(2)),
            [beta, theta, delta], seed=seed, max_coords=40, name='keypoints_chain',
        ),
    ]


def _fake_prediction(params: Tensor, joints3d: Tensor, joints2d: Tensor, features: Tensor,
                     num_betas: int, num_joints: int) -> Prediction:
    d, p = num_betas, 3 * num_joints
    return Prediction(params, params[:, :d], params[:, d:d + p], params[:, d + p:], joints3d, joints2d, features)


def suite_losses(seed: int = 0) -> List[GradReport]:
    """Supervised, consistency and feature terms.

    Barrier-wrapped operands are held fixed: their analytic gradient is zero
    by construction while the loss value still depends on them.
    """
    rng = derive_rng(seed, STREAM_EVAL, 300)
    b, d, k, f = 3, 2, 2, 5
    labels = LabelSet(
        joints2d=rng.normal(size=(b, k, 2)),
        has_3d=np.array([True, False, True]),
        joints3d=rng.normal(size=(b, k, 3)),
        beta=rng.normal(size=(b, d)),
        theta=rng.normal(size=(b, 3 * k)),
    )
    weights = LossWeights()
    queue = rng.normal(size=(6, f))
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)
    param_dim = d + 3 * k + 3
    high, mid = rng.normal(size=(b, param_dim)), rng.normal(size=(b, param_dim))
    anchor = rng.normal(size=(b, f))

    def basic(params, x3d, x2d):
        return basic_loss(_fake_prediction(params, x3d, x2d, None, d, k), labels, weights)

    return [
        finite_diff_check(basic, [rng.normal(size=(b, param_dim)), rng.normal(size=(b, k, 3)),
                                  rng.normal(size=(b, k, 2))], seed=seed, name='basic_loss'),
        finite_diff_check(lambda low: self_sup_loss([high, mid, low], 'directional'),
                          [rng.normal(size=(b, param_dim))], seed=seed, name='self_sup_directional'),
        finite_diff_check(lambda p1, p2: self_sup_loss([p1, p2], 'symmetric'),
                          [rng.normal(size=(b, param_dim)) for _ in range(2)], seed=seed, name='self_sup_symmetric'),
        finite_diff_check(lambda p: contrastive_g(anchor, p, queue, 0.1),
                          [rng.normal(size=(b, f))], seed=seed, name='contrastive_g'),
        finite_diff_check(lambda f2: feature_loss([anchor, f2], None, 'MS'),
                          [rng.normal(size=(b, f))], seed=seed, name='feature_loss_MS'),
        finite_diff_check(lambda f2: feature_loss([anchor, f2], None, 'CD'),
                          [rng.normal(size=(b, f))], seed=seed, name='feature_loss_CD'),
    ]


def _pipeline_net(seed: int, downsample_after: Optional[int]) -> RscNet:
    scheme = ResolutionScheme(8, (8, 4, 2))
    feature_dim = 6 if downsample_after else 4
    net = RscNet(scheme, num_betas=10, num_joints=6, stem_channels=4, feature_dim=feature_dim, num_blocks=2,
                 downsample_after=downsample_after, hidden_dim=8, iterations=2, init_depth=10.0, seed=seed)
    rng = derive_rng(seed, STREAM_EVAL, 400)
    net.params['alpha'] = Tensor(rng.uniform(0.5, 1.5, size=net.params['alpha'].shape), requires_grad=True)
    return net


def suite_pipeline(seed: int = 0) -> List[GradReport]:
    """Backbone, regressor, body model, projection and the composed loss on 8x8 inputs."""
    model = generate_toy_model(seed, num_vertices=50, num_joints=6, num_betas=10)
    rng = derive_rng(seed, STREAM_EVAL, 401)
    batch = 2
    images = rng.uniform(0.0, 1.0, size=(batch, 8, 8))
    low = np.stack([degrade(x, 4) for x in images])
    camera = (20.0, np.array([4.0, 4.0]))
    labels = LabelSet(
        joints2d=rng.normal(4.0, 2.0, size=(batch, 6, 2)),
        has_3d=np.array([True, False]),
        joints3d=rng.normal(size=(batch, 6, 3)),
        beta=rng.normal(size=(batch, 10)),
        theta=0.2 * rng.normal(size=(batch, 18)),
    )

    reports = []
    for downsample_after in (None, 1):
        net = _pipeline_net(seed, downsample_after)
        names = ['stem.w', 'block1.conv1.w', 'block2.conv2.w', 'alpha', 'reg.fc1.b', 'reg.out.w']
        if downsample_after:
            names.append('transition.w')
        # No barrier in this loss, so every branch carries gradient.
        config = LossConfig('symmetric', 'off')

        def loss_of(*tensors, net=net, names=names):
            for name, value in zip(names, tensors):
                net.params[name] = value
            predictions = [
                predict(net, model, images, camera, range_index=1),
                predict(net, model, low, camera, range_index=2),
            ]
            value, _ = total_loss(predictions, labels, LossWeights(), config, None, [1, 2], 10, 6)
            return value

        inputs = [net.params[n].data.copy() for n in names]
        label = 'pipeline' if downsample_after is None else 'pipeline_transition'
        reports.append(finite_diff_check(loss_of, inputs, seed=seed, max_coords=25, name=label))
    return reports


SUITES: Dict[str, Callable[[int], List[GradReport]]] = {
    'primitives': suite_primitives,
    'body_model': suite_body_model,
    'losses': suite_losses,
    'pipeline': suite_pipeline,
}


def execute_suite(name: str, seed: int = 0) -> List[GradReport]:
    """Run one registered suite by name.

    Raises:
        ValueError: If the suite name is unknown
    """
    if name not in SUITES:
        raise ValueError(f"Unknown gradient-check suite: {name}")
    return SUITES[name](seed)


def run_suites(names: Optional[Sequence[str]] = None, seed: int = 0) -> Dict[str, List[GradReport]]:
    results = {}
    for name in names or list(SUITES):
        started = time.monotonic()
        reports = execute_suite(name, seed)
        failed = [r for r in reports if not r.passed]
        logger.info(
            f"Gradient suite {name}: {len(reports) - len(failed)}/{len(reports)} passed "
            f"in {time.monotonic() - started:.1f}s"
        )
        for report in reports:
            if report.passed:
                logger.debug(repr(report))
            else:
                logger.error(f"{report!r}: {'; '.join(report.failures[:3])}")
        results[name] = reports
    return results


def all_passed(results: Dict[str, List[GradReport]]) -> bool:
    return all(r.passed for reports in results.values() for r in reports)
