"""Image to parameters to joints: one differentiable forward pass."""
from typing import Optional, Sequence, Tuple

import numpy as np

from .body_model import BodyModel, forward_model, project, regress_joints
from .network import RscNet, SchemeMismatchError
from .tensor import Tensor


class Prediction:
    """Network outputs for one batch at one resolution."""

    def __init__(self, params: Tensor, beta: Tensor, theta: Tensor, delta: Tensor,
                 joints3d: Tensor, joints2d: Tensor, features: Tensor):
        self.params = params
        self.beta = beta
        self.theta = theta
        self.delta = delta
        self.joints3d = joints3d
        self.joints2d = joints2d
        self.features = features

    @property
    def batch_size(self) -> int:
        return self.params.shape[0]


def check_compatible(net: RscNet, model: BodyModel) -> None:
    if (net.num_betas, net.num_joints) != (model.num_betas, model.num_joints):
        raise SchemeMismatchError(
            f"Network expects D_beta={net.num_betas}, K={net.num_joints}; "
            f"body model has D_beta={model.num_betas}, K={model.num_joints}"
        )


def predict(
    net: RscNet,
    model: BodyModel,
    images,
    camera: Tuple[float, np.ndarray],
    range_index: Optional[int] = None,
    pixel_sizes: Optional[Sequence[int]] = None
) -> Prediction:
    """Run backbone, regressor, body model and projection.

    Args:
        net: Network
        model: Body model matching the network's parameter layout
        images: (B, S, S) or (B, C, S, S) canonical-size rasters
        camera: (focal, principal_point)
        range_index: 1-based resolution range of the batch
        pixel_sizes: Exact pixel size per sample (per-resolution fusion)

    Returns:
        Prediction with differentiable tensors
    """
    batch = images.shape[0]
    rows = net.rows_for(batch, range_index=range_index, pixel_sizes=pixel_sizes)
    features, _ = net.forward_backbone(images, rows)
    params = net.regress(features)
    beta, theta, delta = net.split(params)

    mesh = forward_model(model, beta, theta)
    joints3d = regress_joints(model, mesh)
    joints2d = project(joints3d, delta, camera[0], camera[1])
    return Prediction(params, beta, theta, delta, joints3d, joints2d, features)
