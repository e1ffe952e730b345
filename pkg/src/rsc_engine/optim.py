"""Adam optimizer over immutable tensors."""
import logging
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor


logger = logging.getLogger('rsc_engine')


class OptimizerError(Exception):
    """Exception raised for optimizer shape or state problems."""
    pass


class AdamState:
    """Moment buffers and hyperparameters for bias-corrected Adam."""

    def __init__(
        self,
        shapes: Sequence[tuple],
        learning_rate: float = 5e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8
    ):
        """Initialize zeroed moments.

        Args:
            shapes: One shape per parameter, in update order
            learning_rate: Step size
            beta1: First-moment decay in (0, 1)
            beta2: Second-moment decay in (0, 1)
            eps: Denominator guard
        """
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise OptimizerError(f"Moment decays must lie in (0, 1): beta1={beta1}, beta2={beta2}")
        if learning_rate < 0:
            raise OptimizerError(f"Learning rate must be nonnegative: {learning_rate}")
        self.m: List[np.ndarray] = [np.zeros(s) for s in shapes]
        self.v: List[np.ndarray] = [np.zeros(s) for s in shapes]
        self.step = 0
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> 'AdamState':
        return cls([p.shape for p in params], **kwargs)

    def to_dict(self) -> dict:
        return {
            'step': self.step,
            'learning_rate': self.learning_rate,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'eps': self.eps,
        }


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState
) -> List[Tensor]:
    """Apply one Adam update.

    Args:
        params: Parameter tensors
        grads: Gradients matching params (None counts as zero)
        state: Optimizer state, updated in place

    Returns:
        New parameter tensors (requires_grad preserved)

    Raises:
        OptimizerError: If counts or shapes disagree
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise OptimizerError(
            f"Parameter/gradient/state count mismatch: {len(params)}, {len(grads)}, {len(state.m)}"
        )

    # Validate everything before touching the state.
    checked = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape or state.m[index].shape != param.shape:
            raise OptimizerError(
                f"Shape mismatch for parameter {index} ({param.name or 'unnamed'}): "
                f"param {param.shape}, grad {grad.shape}, moment {state.m[index].shape}"
            )
        checked.append(grad)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    updated = []
    for index, (param, grad) in enumerate(zip(params, checked)):
        state.m[index] = b1 * state.m[index] + (1.0 - b1) * grad
        state.v[index] = b2 * state.v[index] + (1.0 - b2) * grad * grad
        m_hat = state.m[index] / correction1
        v_hat = state.v[index] / correction2
        value = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        updated.append(Tensor(value, requires_grad=param.requires_grad, name=param.name))

    return updated
