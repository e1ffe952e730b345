"""Differentiable parametric body model.

Shape blendshapes, axis-angle kinematics along a kinematic tree, linear blend
skinning with rest-pose inverse binding, joint regression and perspective
projection. Pose-dependent corrective blendshapes are not modelled.

Coordinates follow the image convention: x to the right, y down, z away from
the camera. A model file is a JSON document with keys ``template``,
``shape_basis``, ``tree``, ``rest_regressor``, ``skinning``,
``joint_regressor`` and ``meta``.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .utils import STREAM_MODEL, derive_rng


logger = logging.getLogger('rsc_engine')

D_BETA_DEFAULT = 10
SERIES_THRESHOLD = 1e-4
ROW_SUM_TOLERANCE = 1e-9
MODEL_KEYS = ('template', 'shape_basis', 'tree', 'rest_regressor', 'skinning', 'joint_regressor', 'meta')


class BodyModelError(Exception):
    """Exception raised for invalid body models or parameters."""
    pass


class ProjectionError(Exception):
    """Exception raised when a joint sits at or behind the camera plane."""
    pass


class BodyModel:
    """Immutable parametric body model."""

    def __init__(
        self,
        template: np.ndarray,
        shape_basis: np.ndarray,
        parents: Sequence[int],
        rest_regressor: np.ndarray,
        skinning: np.ndarray,
        joint_regressor: np.ndarray,
        meta: Optional[Dict] = None,
        mirror_permutation: Optional[Sequence[int]] = None
    ):
        self.template = _frozen(template)
        self.shape_basis = _frozen(shape_basis)
        self.parents = tuple(int(p) for p in parents)
        self.rest_regressor = _frozen(rest_regressor)
        self.skinning = _frozen(skinning)
        self.joint_regressor = _frozen(joint_regressor)
        self.meta = dict(meta or {})
        self.validate()

        n, _, d = self.shape_basis.shape
        self.basis_matrix = _frozen(self.shape_basis.reshape(n * 3, d).T)
        self.rest_joints = _frozen(self.rest_regressor @ self.template)

        if mirror_permutation is not None:
            self.mirror_permutation = tuple(int(i) for i in mirror_permutation)
        else:
            self.mirror_permutation = derive_mirror_permutation(self.rest_joints)

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def num_betas(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def param_dim(self) -> int:
        return self.num_betas + 3 * self.num_joints + 3

    def validate(self) -> None:
        """Check every structural invariant.

        Raises:
            BodyModelError: On the first violated invariant
        """
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise BodyModelError(f"template must be N x 3, got {self.template.shape}")
        n = self.template.shape[0]
        k = len(self.parents)

        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (n, 3):
            raise BodyModelError(f"shape_basis must be {n} x 3 x D, got {self.shape_basis.shape}")
        if self.shape_basis.shape[2] < 1:
            raise BodyModelError("shape_basis needs at least one component")
        for name, matrix, shape in (
            ('rest_regressor', self.rest_regressor, (k, n)),
            ('joint_regressor', self.joint_regressor, (k, n)),
            ('skinning', self.skinning, (n, k)),
        ):
            if matrix.shape != shape:
                raise BodyModelError(f"{name} must be {shape}, got {matrix.shape}")
            row_sums = matrix.sum(axis=1)
            bad = np.flatnonzero(np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE)
            if bad.size:
                raise BodyModelError(f"{name} rows do not sum to 1: rows {bad.tolist()[:5]}")

        if np.any(self.skinning < 0):
            raise BodyModelError("skinning weights must be nonnegative")

        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0] or self.parents[0] != -1:
            raise BodyModelError(f"Expected exactly one root at index 0, got roots {roots}")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise BodyModelError(f"Joint {j} has parent {p}; parents must precede children")

        for name in ('template', 'shape_basis', 'rest_regressor', 'skinning', 'joint_regressor'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise BodyModelError(f"{name} contains non-finite values")

    # --- persistence ---
    def to_dict(self) -> Dict:
        meta = {
            'N': self.num_vertices,
            'K': self.num_joints,
            'D_beta': self.num_betas,
            'seed': self.meta.get('seed'),
        }
        return {
            'template': self.template.tolist(),
            'shape_basis': self.shape_basis.tolist(),
            'tree': list(self.parents),
            'rest_regressor': self.rest_regressor.tolist(),
            'skinning': self.skinning.tolist(),
            'joint_regressor': self.joint_regressor.tolist(),
            'meta': meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_json())
        logger.info(f"Body model written: {path} (N={self.num_vertices}, K={self.num_joints})")
        return path

    @classmethod
    def from_dict(cls, document: Dict) -> 'BodyModel':
        missing = [key for key in MODEL_KEYS if key not in document]
        if missing:
            raise BodyModelError(f"Model document misses keys: {missing}")
        try:
            model = cls(
                template=np.asarray(document['template'], dtype=np.float64),
                shape_basis=np.asarray(document['shape_basis'], dtype=np.float64),
                parents=document['tree'],
                rest_regressor=np.asarray(document['rest_regressor'], dtype=np.float64),
                skinning=np.asarray(document['skinning'], dtype=np.float64),
                joint_regressor=np.asarray(document['joint_regressor'], dtype=np.float64),
                meta=document['meta'],
            )
        except (TypeError, ValueError) as e:
            raise BodyModelError(f"Malformed model document: {e}") from e

        meta = document['meta']
        declared = (meta.get('N'), meta.get('K'), meta.get('D_beta'))
        actual = (model.num_vertices, model.num_joints, model.num_betas)
        if declared != actual:
            raise BodyModelError(f"meta sizes {declared} disagree with arrays {actual}")
        return model

    @classmethod
    def load(cls, path: Path) -> 'BodyModel':
        """Load and validate a model file.

        Raises:
            FileNotFoundError: If the file does not exist
            BodyModelError: If the document violates any invariant
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Body model file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise BodyModelError(f"Invalid JSON in {path}: {e}") from e
        model = cls.from_dict(document)
        logger.info(f"Body model loaded: {path} (N={model.num_vertices}, K={model.num_joints})")
        return model


class ParamEstimate:
    """Shape, pose and camera parameters, optionally batched along axis 0."""

    def __init__(self, beta: np.ndarray, theta: np.ndarray, delta: np.ndarray):
        self.beta = np.asarray(beta, dtype=np.float64)
        self.theta = np.asarray(theta, dtype=np.float64)
        self.delta = np.asarray(delta, dtype=np.float64)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.theta, self.delta], axis=-1)

    @classmethod
    def from_vector(cls, vector: np.ndarray, num_betas: int, num_joints: int) -> 'ParamEstimate':
        vector = np.asarray(vector, dtype=np.float64)
        d, p = num_betas, 3 * num_joints
        if vector.shape[-1] != d + p + 3:
            raise BodyModelError(f"Parameter vector length {vector.shape[-1]} != {d + p + 3}")
        return cls(vector[..., :d], vector[..., d:d + p], vector[..., d + p:])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))

    def copy(self) -> 'ParamEstimate':
        return ParamEstimate(self.beta.copy(), self.theta.copy(), self.delta.copy())


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _sinc_coefficient(s: np.ndarray) -> np.ndarray:
    small = s < SERIES_THRESHOLD
    r = np.sqrt(np.where(small, 1.0, s))
    series = 1.0 - s / 6.0 + s ** 2 / 120.0 - s ** 3 / 5040.0
    return np.where(small, series, np.sin(r) / r)


def _sinc_coefficient_grad(s: np.ndarray) -> np.ndarray:
    small = s < SERIES_THRESHOLD
    r = np.sqrt(np.where(small, 1.0, s))
    series = -1.0 / 6.0 + s / 60.0 - s ** 2 / 1680.0
    return np.where(small, series, (r * np.cos(r) - np.sin(r)) / (2.0 * r ** 3))


def _cosc_coefficient(s: np.ndarray) -> np.ndarray:
    small = s < SERIES_THRESHOLD
    safe = np.where(small, 1.0, s)
    series = 0.5 - s / 24.0 + s ** 2 / 720.0 - s ** 3 / 40320.0
    return np.where(small, series, (1.0 - np.cos(np.sqrt(safe))) / safe)


def _cosc_coefficient_grad(s: np.ndarray) -> np.ndarray:
    small = s < SERIES_THRESHOLD
    safe = np.where(small, 1.0, s)
    r = np.sqrt(safe)
    series = -1.0 / 24.0 + s / 360.0 - s ** 2 / 13440.0
    return np.where(small, series, (0.5 * r * np.sin(r) - (1.0 - np.cos(r))) / safe ** 2)


def rodrigues(axis_angle) -> Tensor:
    """Axis-angle vectors to rotation matrices.

    R = I + a(s) K + b(s) K^2 with K the cross-product matrix of v and
    s = |v|^2; a and b switch to their Taylor series for small s so the map
    is smooth at the zero vector.

    Args:
        axis_angle: Tensor of shape (3,) or (M, 3)

    Returns:
        Tensor of shape (3, 3) or (M, 3, 3)
    """
    v = T.as_tensor(axis_angle)
    single = v.ndim == 1
    if single:
        v = v.reshape(1, 3)
    if v.ndim != 2 or v.shape[1] != 3:
        raise BodyModelError(f"rodrigues expects (3,) or (M, 3), got {v.shape}")
    m = v.shape[0]

    s = T.squared_l2(v, axis=1)
    a = T.elementwise(s, _sinc_coefficient, _sinc_coefficient_grad, 'rodrigues_sinc').reshape(m, 1, 1)
    b = T.elementwise(s, _cosc_coefficient, _cosc_coefficient_grad, 'rodrigues_cosc').reshape(m, 1, 1)

    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zero = T.zeros((m,))
    skew = T.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(m, 3, 3)
    rotation = np.eye(3) + a * skew + b * T.matmul(skew, skew)
    return rotation.reshape(3, 3) if single else rotation


def rotation_to_axis_angle(rotation: np.ndarray) -> np.ndarray:
    """Inverse of rodrigues for a single rotation matrix (plain numpy)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    cos_angle = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    vee = 0.5 * np.array([
        rotation[2, 1] - rotation[1, 2],
        rotation[0, 2] - rotation[2, 0],
        rotation[1, 0] - rotation[0, 1],
    ])
    if angle < 1e-8:
        return vee
    if np.pi - angle < 1e-6:
        sym = (rotation + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / np.sqrt(max(sym[k, k], 1e-300))
        axis = axis / np.linalg.norm(axis)
        return angle * axis
    return angle * vee / np.sin(angle)


def mirror_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle of the x-mirrored rotation diag(-1,1,1) R diag(-1,1,1)."""
    mirrored = np.array(axis_angle, dtype=np.float64)
    mirrored[..., 1] *= -1.0
    mirrored[..., 2] *= -1.0
    return mirrored


def derive_mirror_permutation(rest_joints: np.ndarray, tolerance: float = 1e-6) -> Optional[Tuple[int, ...]]:
    """Left/right joint permutation from an x-mirror-symmetric rest skeleton.

    Returns:
        Involutive permutation, or None if the skeleton is not symmetric
    """
    mirrored = rest_joints * np.array([-1.0, 1.0, 1.0])
    distances = np.linalg.norm(rest_joints[None, :, :] - mirrored[:, None, :], axis=2)
    permutation = np.argmin(distances, axis=1)
    if np.max(distances[np.arange(len(permutation)), permutation]) > tolerance:
        return None
    if not np.array_equal(permutation[permutation], np.arange(len(permutation))):
        return None
    return tuple(int(i) for i in permutation)


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------

def _check_finite(name: str, value: Tensor) -> None:
    if not np.all(np.isfinite(value.data)):
        raise BodyModelError(f"Non-finite {name} parameters")


def shape_template(model: BodyModel, beta) -> Tensor:
    """Template plus shape blendshapes: (B, D) -> (B, N, 3)."""
    beta = T.as_tensor(beta)
    b = beta.shape[0]
    offsets = T.matmul(beta, Tensor(model.basis_matrix))
    return model.template + offsets.reshape(b, model.num_vertices, 3)


def forward_model(model: BodyModel, beta, theta) -> Tensor:
    """Posed mesh from shape and pose parameters.

    Args:
        model: Body model
        beta: (D,) or (B, D) shape coefficients
        theta: (3K,) or (B, 3K) axis-angle pose, root first

    Returns:
        Mesh of shape (N, 3) or (B, N, 3)

    Raises:
        BodyModelError: On dimension mismatch or non-finite parameters
    """
    beta, theta = T.as_tensor(beta), T.as_tensor(theta)
    single = beta.ndim == 1
    if single:
        beta = beta.reshape(1, -1)
        theta = theta.reshape(1, -1)

    k, n = model.num_joints, model.num_vertices
    if beta.ndim != 2 or beta.shape[1] != model.num_betas:
        raise BodyModelError(f"beta must have {model.num_betas} entries per sample, got {beta.shape}")
    if theta.ndim != 2 or theta.shape[1] != 3 * k or theta.shape[0] != beta.shape[0]:
        raise BodyModelError(f"theta must be (B, {3 * k}) matching beta, got {theta.shape}")
    _check_finite('shape', beta)
    _check_finite('pose', theta)

    b = beta.shape[0]
    shaped = shape_template(model, beta)
    rest = T.matmul(model.rest_regressor, shaped)
    local = rodrigues(theta.reshape(b * k, 3)).reshape(b, k, 3, 3)

    # World rotation and translation per joint, composed root to leaves.
    world_r: List[Tensor] = []
    world_t: List[Tensor] = []
    joints = [rest[:, j, :] for j in range(k)]
    for j, parent in enumerate(model.parents):
        if parent < 0:
            world_r.append(local[:, j])
            world_t.append(joints[j])
            continue
        r_parent = world_r[parent]
        bone = (joints[j] - joints[parent]).reshape(b, 3, 1)
        world_r.append(T.matmul(r_parent, local[:, j]))
        world_t.append(world_t[parent] + T.matmul(r_parent, bone).reshape(b, 3))

    rotations = T.stack(world_r, axis=1)
    translations = T.stack(world_t, axis=1)
    bound = translations - T.matmul(rotations, rest.reshape(b, k, 3, 1)).reshape(b, k, 3)

    blended_r = T.matmul(model.skinning, rotations.reshape(b, k, 9)).reshape(b, n, 3, 3)
    blended_t = T.matmul(model.skinning, bound)
    mesh = T.matmul(blended_r, shaped.reshape(b, n, 3, 1)).reshape(b, n, 3) + blended_t
    return mesh.reshape(n, 3) if single else mesh


def regress_joints(model: BodyModel, mesh) -> Tensor:
    """X = W M for a (N, 3) or (B, N, 3) mesh."""
    mesh = T.as_tensor(mesh)
    if mesh.shape[-2:] != (model.num_vertices, 3):
        raise BodyModelError(f"mesh must end in ({model.num_vertices}, 3), got {mesh.shape}")
    return T.matmul(model.joint_regressor, mesh)


def default_camera(canonical_size: int, focal: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """Focal length and principal point for a canonical square frame."""
    if focal is None:
        focal = 5000.0 * canonical_size / 224.0
    principal_point = np.array([canonical_size / 2.0, canonical_size / 2.0])
    return float(focal), principal_point


def project(joints3d, delta, focal: float, principal_point) -> Tensor:
    """Perspective projection of camera-translated joints.

    Args:
        joints3d: (K, 3) or (B, K, 3)
        delta: (3,) or (B, 3) camera translation
        focal: Focal length in pixels
        principal_point: (2,) image coordinates

    Returns:
        (K, 2) or (B, K, 2) pixel coordinates

    Raises:
        ProjectionError: If any joint has non-positive depth
    """
    joints3d, delta = T.as_tensor(joints3d), T.as_tensor(delta)
    single = joints3d.ndim == 2
    if single:
        joints3d = joints3d.reshape(1, *joints3d.shape)
        delta = delta.reshape(1, 3)
    b = joints3d.shape[0]
    points = joints3d + delta.reshape(b, 1, 3)

    depth = points.data[..., 2]
    bad = np.argwhere(depth <= 0.0)
    if bad.size:
        listed = ', '.join(f"sample {s} joint {j} (z={depth[s, j]:.4g})" for s, j in bad[:8])
        raise ProjectionError(f"Non-positive depth for {len(bad)} joint(s): {listed}")

    image = focal * points[..., 0:2] / points[..., 2:3] + np.asarray(principal_point, dtype=np.float64)
    return image.reshape(*image.shape[1:]) if single else image


def keypoints(model: BodyModel, params: ParamEstimate, focal: float, principal_point) -> Tuple[np.ndarray, np.ndarray]:
    """Constant-folded 3D joints and 2D keypoints for ground-truth parameters."""
    mesh = forward_model(model, params.beta, params.theta)
    joints3d = regress_joints(model, mesh)
    joints2d = project(joints3d, params.delta, focal, principal_point)
    return joints3d.numpy(), joints2d.numpy()


# ---------------------------------------------------------------------------
# Procedural model
# ---------------------------------------------------------------------------

def _build_skeleton(num_joints: int, rng: np.random.Generator) -> Tuple[List[int], np.ndarray, List[int]]:
    """Mirror-symmetric skeleton: center chain plus alternating leg/arm pairs.

    Returns:
        parents, rest joint positions (K, 3), side (-1 left, 0 center, +1 right)
    """
    spine = 0.45 * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
    parents: List[int] = [-1]
    positions: List[np.ndarray] = [np.zeros(3)]
    sides: List[int] = [0]

    if num_joints < 4:
        for j in range(1, num_joints):
            parents.append(j - 1)
            positions.append(np.array([0.0, -spine * j, 0.0]))
            sides.append(0)
        return parents, np.array(positions), sides

    center = 2 + num_joints % 2
    for j in range(1, center):
        parents.append(j - 1)
        positions.append(np.array([0.0, -spine * j, 0.0]))
        sides.append(0)

    pairs = (num_joints - center) // 2
    leg_levels = (pairs + 1) // 2
    arm_levels = pairs // 2
    # Limb segments share a fixed total length so the figure height does not grow with K.
    thigh = 0.84 / max(1, leg_levels - 1) * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
    forearm = 0.56 / max(1, arm_levels - 1) * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
    last = {'leg': (0, 0), 'arm': (1, 1)}
    for pair in range(pairs):
        limb = 'leg' if pair % 2 == 0 else 'arm'
        level = pair // 2
        left_parent, right_parent = last[limb]
        for side, parent in ((-1, left_parent), (1, right_parent)):
            if limb == 'leg':
                offset = np.array([0.12 * side, 0.08, 0.0]) if level == 0 else np.array([0.0, thigh, 0.0])
            else:
                offset = np.array([0.18 * side, 0.05, 0.0]) if level == 0 else np.array([forearm * side, 0.0, 0.0])
            parents.append(parent)
            positions.append(positions[parent] + offset)
            sides.append(side)
        last[limb] = (len(parents) - 2, len(parents) - 1)

    return parents, np.array(positions), sides


def _shape_field(points: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """Displacement field odd in x for the x component and even otherwise."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    fx = x * (coefficients[0] + coefficients[1] * y + coefficients[2] * z + coefficients[3] * x * x)
    fy = coefficients[4] + coefficients[5] * y + coefficients[6] * x * x + coefficients[7] * y * y
    fz = coefficients[8] * z + coefficients[9] * x * x + coefficients[10] * y
    return np.stack([fx, fy, fz], axis=1)


def generate_toy_model(seed: int, num_vertices: int = 200, num_joints: int = 12,
                       num_betas: int = D_BETA_DEFAULT) -> BodyModel:
    """Build a deterministic mirror-symmetric articulated toy body.

    Every joint gets a small ring of vertices bound half to itself and half
    to its parent; the remaining vertices are spread in mirrored pairs along
    bones and past leaf joints.

    Raises:
        BodyModelError: If the sizes are infeasible
    """
    if not (num_vertices >= num_joints >= 2) or num_betas < 1:
        raise BodyModelError(
            f"Infeasible toy model sizes: N={num_vertices}, K={num_joints}, D_beta={num_betas} "
            f"(need N >= K >= 2 and D_beta >= 1)"
        )

    rng = derive_rng(seed, STREAM_MODEL)
    parents, joints, sides = _build_skeleton(num_joints, rng)
    k = num_joints
    children = {j: [c for c, p in enumerate(parents) if p == j] for j in range(k)}

    ring = max(1, min(4, num_vertices // (2 * k)))
    radius = 0.05 * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
    vertices: List[np.ndarray] = []
    weights: List[Dict[int, float]] = []
    owner: List[int] = []

    for j in range(k):
        for m in range(ring):
            if ring == 1:
                offset = np.zeros(3)
            else:
                angle = np.pi / 2.0 + 2.0 * np.pi * m / ring
                if sides[j] < 0:
                    angle = np.pi - angle
                offset = radius * np.array([np.cos(angle), 0.0, np.sin(angle)])
            vertices.append(joints[j] + offset)
            weights.append({j: 1.0} if parents[j] < 0 else {j: 0.5, parents[j]: 0.5})
            owner.append(j)

    remaining = num_vertices - k * ring
    if remaining % 2 == 1:
        vertices.append(joints[0].copy())
        weights.append({0: 1.0})
        owner.append(-1)
        remaining -= 1

    # Units that receive mirrored vertex pairs: center bones, side bone pairs,
    # and extremities past leaf joints.
    units = []
    for j in range(1, k):
        if sides[j] == 0:
            units.append(('bone', (j,)))
        elif sides[j] < 0:
            units.append(('bone', (j, j + 1)))
    for j in range(1, k):
        if not children[j]:
            if sides[j] == 0:
                units.append(('tip', (j,)))
            elif sides[j] < 0:
                units.append(('tip', (j, j + 1)))

    pairs = remaining // 2
    per_unit = [pairs // len(units) + (1 if u < pairs % len(units) else 0) for u in range(len(units))]
    for (kind, members), count in zip(units, per_unit):
        for q in range(count):
            t = (q + 1.0) / (count + 1.0)
            wobble = 0.6 * radius * (1.0 if q % 2 == 0 else -1.0)
            for index, member in enumerate(members if len(members) == 2 else (members[0], members[0])):
                parent = parents[member]
                direction = joints[member] - joints[parent]
                if kind == 'bone':
                    base = joints[parent] + t * direction
                    bound = {parent: 1.0 - 0.5 * t, member: 0.5 * t}
                else:
                    base = joints[member] + 0.5 * t * direction
                    bound = {member: 1.0}
                if len(members) == 1:
                    # Center unit: mirrored across the x = 0 plane.
                    offset = np.array([0.8 * radius * (1.0 if index == 0 else -1.0), 0.0, wobble])
                else:
                    offset = np.array([0.0, 0.0, wobble])
                vertices.append(base + offset)
                weights.append(bound)
                owner.append(-1)

    template = np.array(vertices)
    n = template.shape[0]
    skinning = np.zeros((n, k))
    for v, bound in enumerate(weights):
        for j, w in bound.items():
            skinning[v, j] += w
    skinning /= skinning.sum(axis=1, keepdims=True)

    owner = np.array(owner)
    rest_regressor = np.zeros((k, n))
    for j in range(k):
        rest_regressor[j, owner == j] = 1.0
    rest_regressor /= rest_regressor.sum(axis=1, keepdims=True)

    dominant = (skinning >= 0.5 - 1e-12).T.astype(np.float64)
    dominant /= dominant.sum(axis=1, keepdims=True)
    joint_regressor = 0.85 * rest_regressor + 0.15 * dominant
    joint_regressor /= joint_regressor.sum(axis=1, keepdims=True)

    shape_basis = np.zeros((n, 3, num_betas))
    for d in range(num_betas):
        field = _shape_field(template, rng.normal(size=11))
        field /= max(np.max(np.abs(field)), 1e-12)
        shape_basis[:, :, d] = 0.05 * field

    model = BodyModel(
        template=template,
        shape_basis=shape_basis,
        parents=parents,
        rest_regressor=rest_regressor,
        skinning=skinning,
        joint_regressor=joint_regressor,
        meta={'N': n, 'K': k, 'D_beta': num_betas, 'seed': int(seed)},
    )
    logger.debug(f"Generated toy model seed={seed} N={n} K={k} D_beta={num_betas} ring={ring}")
    return model
