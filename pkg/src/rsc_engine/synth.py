"""Synthetic multi-resolution samples: scenes, rasters, pyramids, augmentation."""
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .body_model import (
    BodyModel,
    ParamEstimate,
    keypoints,
    mirror_axis_angle,
    rodrigues,
    rotation_to_axis_angle,
    shape_template,
)
from .network import ResolutionScheme
from .resample import bicubic_resize, degrade, warp_rotate
from .utils import STREAM_PYRAMID, STREAM_RASTER, STREAM_SCENE, derive_rng


logger = logging.getLogger('rsc_engine')

SceneRng = Union[int, np.random.Generator]


class SynthesisError(Exception):
    """Exception raised when a valid sample cannot be produced."""
    pass


class SceneConfig:
    """Sampling ranges for synthetic scenes."""

    def __init__(self, beta_sigma: float = 1.0, beta_clip: float = 2.0, joint_limit: float = 0.6,
                 root_limit: float = 0.4, depth_min: float = 50.0, depth_max: float = 62.0,
                 lateral: float = 0.3, margin: float = 2.0, max_attempts: int = 100):
        if depth_min <= 0 or depth_max < depth_min:
            raise SynthesisError(f"Invalid depth range [{depth_min}, {depth_max}]")
        self.beta_sigma = float(beta_sigma)
        self.beta_clip = float(beta_clip)
        self.joint_limit = float(joint_limit)
        self.root_limit = float(root_limit)
        self.depth_min = float(depth_min)
        self.depth_max = float(depth_max)
        self.lateral = float(lateral)
        self.margin = float(margin)
        self.max_attempts = int(max_attempts)


class AugmentationConfig:
    """Photometric and geometric augmentation settings."""

    def __init__(self, noise_sigma: float = 0.0, brightness: float = 0.0, contrast: float = 0.0,
                 rotation_deg: float = 0.0, flip_prob: float = 0.0,
                 mirror_permutation: Optional[Sequence[int]] = None, max_rotation_attempts: int = 10):
        if noise_sigma < 0 or brightness < 0 or contrast < 0 or rotation_deg < 0:
            raise SynthesisError("Augmentation magnitudes must be nonnegative")
        if not 0.0 <= flip_prob <= 1.0:
            raise SynthesisError(f"flip_prob must lie in [0, 1], got {flip_prob}")
        self.noise_sigma = float(noise_sigma)
        self.brightness = float(brightness)
        self.contrast = float(contrast)
        self.rotation_deg = float(rotation_deg)
        self.flip_prob = float(flip_prob)
        self.mirror_permutation = None if mirror_permutation is None else tuple(mirror_permutation)
        self.max_rotation_attempts = int(max_rotation_attempts)

    @property
    def is_identity(self) -> bool:
        return not (self.noise_sigma or self.brightness or self.contrast or self.rotation_deg or self.flip_prob)


class Scene:
    """Ground-truth parameters with their derived labels."""

    def __init__(self, params: ParamEstimate, joints2d: np.ndarray, joints3d: np.ndarray, has_3d: bool):
        self.params = params
        self.joints2d = joints2d
        self.joints3d = joints3d
        self.has_3d = bool(has_3d)


class Sample:
    """One source image at every resolution range plus its labels."""

    def __init__(self, source_id: int, rasters: np.ndarray, sizes: Sequence[int], scene: Scene):
        self.source_id = int(source_id)
        self.rasters = rasters
        self.sizes = [int(s) for s in sizes]
        self.scene = scene

    @property
    def canonical(self) -> np.ndarray:
        return self.rasters[0]

    def copy(self) -> 'Sample':
        scene = Scene(self.scene.params.copy(), self.scene.joints2d.copy(),
                      self.scene.joints3d.copy(), self.scene.has_3d)
        return Sample(self.source_id, self.rasters.copy(), list(self.sizes), scene)


def _as_rng(rng: SceneRng, stream: int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return derive_rng(int(rng), stream)


def in_frame(joints2d: np.ndarray, canonical_size: int, margin: float = 0.0) -> bool:
    return bool(np.all(joints2d >= margin) and np.all(joints2d <= canonical_size - margin))


def sample_scene(rng: SceneRng, model: BodyModel, camera: Tuple[float, np.ndarray], canonical_size: int,
                 config: Optional[SceneConfig] = None, p3d: float = 0.5) -> Scene:
    """Draw parameters by rejection until every keypoint lies inside the frame.

    Raises:
        SynthesisError: If no in-frame body is found within max_attempts
    """
    config = config or SceneConfig()
    rng = _as_rng(rng, STREAM_SCENE)
    focal, principal_point = camera
    k, d = model.num_joints, model.num_betas

    has_3d = bool(rng.random() < p3d)
    for attempt in range(1, config.max_attempts + 1):
        beta = np.clip(rng.normal(0.0, config.beta_sigma, size=d), -config.beta_clip, config.beta_clip)
        theta = rng.uniform(-config.joint_limit, config.joint_limit, size=3 * k)
        theta[:3] = rng.uniform(-config.root_limit, config.root_limit, size=3)
        delta = np.array([
            rng.uniform(-config.lateral, config.lateral),
            rng.uniform(-config.lateral, config.lateral),
            rng.uniform(config.depth_min, config.depth_max),
        ])
        params = ParamEstimate(beta, theta, delta)
        joints3d, joints2d = keypoints(model, params, focal, principal_point)
        depths = joints3d[:, 2] + delta[2]
        if np.all(depths > 0) and in_frame(joints2d, canonical_size, config.margin):
            return Scene(params, joints2d, joints3d, has_3d)
        logger.debug(f"Scene rejected on attempt {attempt}: keypoints out of frame")

    raise SynthesisError(f"No in-frame scene after {config.max_attempts} attempts")


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    length2 = float(ab @ ab)
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / length2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def background(rng: np.random.Generator, canonical_size: int) -> np.ndarray:
    """Smooth low-frequency noise plus faint grain."""
    coarse = max(2, canonical_size // 8)
    base = bicubic_resize(rng.uniform(0.15, 0.45, size=(coarse, coarse)), canonical_size)
    grain = rng.normal(0.0, 0.02, size=(canonical_size, canonical_size))
    return base + grain


def rasterize(scene: Scene, model: BodyModel, canonical_size: int, camera: Tuple[float, np.ndarray],
              rng: SceneRng = 0) -> np.ndarray:
    """Antialiased stick figure over textured noise, values in [0, 1].

    Bones are drawn between projected parent/child joints and disks at every
    joint; nearer parts are brighter. Zero-length bones are skipped.
    """
    rng = _as_rng(rng, STREAM_RASTER)
    focal = camera[0]
    image = background(rng, canonical_size)

    v, u = np.meshgrid(np.arange(canonical_size) + 0.5, np.arange(canonical_size) + 0.5, indexing='ij')
    points = scene.joints2d
    depths = scene.joints3d[:, 2] + scene.params.delta[2]
    near, far = float(depths.min()), float(depths.max())
    shade = 0.95 - 0.3 * (depths - near) / (far - near + 1e-9)
    half_width = 0.5 * max(0.06 * focal / float(depths.mean()), 0.5)

    for j, parent in enumerate(model.parents):
        if parent < 0:
            continue
        a, b = points[parent], points[j]
        if float(np.sum((b - a) ** 2)) < 1e-18:
            continue
        coverage = np.clip(half_width + 0.5 - _segment_distance(u, v, a, b), 0.0, 1.0)
        intensity = 0.5 * (shade[parent] + shade[j])
        image = image * (1.0 - coverage) + intensity * coverage

    radius = 1.3 * half_width
    for j in range(model.num_joints):
        coverage = np.clip(radius + 0.5 - np.hypot(u - points[j, 0], v - points[j, 1]), 0.0, 1.0)
        image = image * (1.0 - coverage) + shade[j] * coverage

    return np.clip(image, 0.0, 1.0)


def make_pyramid(x1: np.ndarray, scheme: ResolutionScheme, rng: np.random.Generator) -> Tuple[np.ndarray, List[int]]:
    """Degraded copies of x1, one per range, all at canonical size.

    Returns:
        ((P, S, S) rasters, chosen pixel size per range)
    """
    rasters = [np.array(x1, dtype=np.float64)]
    sizes = [scheme.canonical_size]
    for range_index in range(2, scheme.num_ranges + 1):
        size = scheme.sample_size(range_index, rng)
        rasters.append(np.clip(degrade(x1, size), 0.0, 1.0))
        sizes.append(size)
    return np.stack(rasters), sizes


def degrade_to(x1: np.ndarray, pixel_size: int) -> np.ndarray:
    """Single exact-size degradation used by evaluation."""
    return np.clip(degrade(x1, pixel_size), 0.0, 1.0)


def generate_sample(source_id: int, seed: int, model: BodyModel, scheme: ResolutionScheme,
                    camera: Tuple[float, np.ndarray], scene_config: Optional[SceneConfig] = None,
                    p3d: float = 0.5) -> Sample:
    """Fully deterministic sample from (seed, source_id)."""
    scene = sample_scene(derive_rng(seed, STREAM_SCENE, source_id), model, camera,
                         scheme.canonical_size, scene_config, p3d)
    x1 = rasterize(scene, model, scheme.canonical_size, camera, derive_rng(seed, STREAM_RASTER, source_id))
    rasters, sizes = make_pyramid(x1, scheme, derive_rng(seed, STREAM_PYRAMID, 0, source_id))
    return Sample(source_id, rasters, sizes, scene)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_params(params: ParamEstimate, permutation: Sequence[int]) -> ParamEstimate:
    """Parameters of the x-mirrored body (left/right joints swapped)."""
    theta = params.theta.reshape(-1, 3)[list(permutation)]
    return ParamEstimate(
        params.beta.copy(),
        mirror_axis_angle(theta).reshape(-1),
        params.delta * np.array([-1.0, 1.0, 1.0]),
    )


def rotate_params(params: ParamEstimate, model: BodyModel, angle: float) -> ParamEstimate:
    """Parameters of the body rotated in-plane by angle about the optical axis."""
    cos, sin = np.cos(angle), np.sin(angle)
    spin = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    root = rodrigues(params.theta[:3]).numpy()
    theta = params.theta.copy()
    theta[:3] = rotation_to_axis_angle(spin @ root)
    root_joint = model.rest_regressor[0] @ shape_template(model, params.beta.reshape(1, -1)).numpy()[0]
    delta = spin @ (params.delta + root_joint) - root_joint
    return ParamEstimate(params.beta.copy(), theta, delta)


def relabel(scene: Scene, params: ParamEstimate, model: BodyModel, camera: Tuple[float, np.ndarray]) -> Scene:
    joints3d, joints2d = keypoints(model, params, camera[0], camera[1])
    return Scene(params, joints2d, joints3d, scene.has_3d)


def flip_sample(sample: Sample, model: BodyModel, camera: Tuple[float, np.ndarray],
                permutation: Optional[Sequence[int]] = None) -> Sample:
    """Mirror every raster horizontally and regenerate labels from mirrored parameters."""
    permutation = permutation or model.mirror_permutation
    if permutation is None:
        raise SynthesisError("Flip augmentation needs a left/right joint permutation")
    params = flip_params(sample.scene.params, permutation)
    rasters = np.ascontiguousarray(sample.rasters[..., ::-1])
    return Sample(sample.source_id, rasters, sample.sizes, relabel(sample.scene, params, model, camera))


def _augment_geometry(sample: Sample, config: AugmentationConfig, rng: np.random.Generator,
                      model: BodyModel, camera: Tuple[float, np.ndarray]) -> Sample:
    """Draw a flip and a rotation together, redrawing both until the labels stay in frame.

    Raises:
        SynthesisError: If every draw pushes a keypoint out of the frame
    """
    canonical = sample.rasters.shape[-1]
    limit = np.deg2rad(config.rotation_deg)
    attempts = config.max_rotation_attempts if config.rotation_deg > 0 else 1
    for _ in range(attempts):
        flip = config.flip_prob > 0 and rng.random() < config.flip_prob
        angle = float(rng.uniform(-limit, limit)) if config.rotation_deg > 0 else 0.0

        params = sample.scene.params
        if flip:
            permutation = config.mirror_permutation or model.mirror_permutation
            if permutation is None:
                raise SynthesisError("Flip augmentation needs a left/right joint permutation")
            params = flip_params(params, permutation)
        if angle:
            params = rotate_params(params, model, angle)
        scene = relabel(sample.scene, params, model, camera)
        if not in_frame(scene.joints2d, canonical):
            continue

        rasters = sample.rasters[..., ::-1] if flip else sample.rasters
        if angle:
            center = (canonical / 2.0, canonical / 2.0)
            rasters = np.stack([np.clip(warp_rotate(r, angle, center), 0.0, 1.0) for r in rasters])
        if not flip and not angle:
            return sample
        return Sample(sample.source_id, np.ascontiguousarray(rasters), sample.sizes, scene)

    raise SynthesisError(
        f"Sample {sample.source_id}: every one of {attempts} flip/rotation draws left the frame"
    )


def augment(sample: Sample, config: AugmentationConfig, rng: np.random.Generator, model: BodyModel,
            camera: Tuple[float, np.ndarray]) -> Sample:
    """Apply geometric then photometric augmentation.

    Geometry (flip, in-plane rotation) is shared by all rasters and labels;
    photometric jitter is drawn per raster.
    """
    if config.is_identity:
        return sample

    if config.flip_prob > 0 or config.rotation_deg > 0:
        sample = _augment_geometry(sample, config, rng, model, camera)

    if config.contrast or config.brightness or config.noise_sigma:
        rasters = []
        for raster in sample.rasters:
            out = raster
            if config.contrast:
                mean = out.mean()
                out = (out - mean) * rng.uniform(1.0 - config.contrast, 1.0 + config.contrast) + mean
            if config.brightness:
                out = out + rng.uniform(-config.brightness, config.brightness)
            if config.noise_sigma:
                out = out + rng.normal(0.0, config.noise_sigma, size=out.shape)
            rasters.append(np.clip(out, 0.0, 1.0))
        sample = Sample(sample.source_id, np.stack(rasters), sample.sizes, sample.scene)

    return sample


def sharpness(image: np.ndarray) -> float:
    """Mean absolute discrete Laplacian, a proxy for retained detail."""
    lap = (
        -4.0 * image[1:-1, 1:-1]
        + image[:-2, 1:-1] + image[2:, 1:-1] + image[1:-1, :-2] + image[1:-1, 2:]
    )
    return float(np.mean(np.abs(lap)))


def has_3d_fraction(samples: Sequence[Sample]) -> float:
    if not samples:
        return 0.0
    return float(np.mean([s.scene.has_3d for s in samples]))


def summary(samples: Sequence[Sample]) -> Dict[str, float]:
    return {'count': len(samples), 'has_3d_fraction': has_3d_fraction(samples)}
