"""Resolution scheme, resolution-aware backbone and iterative regressor."""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .utils import STREAM_INIT, derive_rng


logger = logging.getLogger('rsc_engine')

ALPHA_MODES = ('ranges', 'per_resolution')
DESK_BOUNDS = (64, 37, 18, 11, 7)
FULL_BOUNDS = (224, 128, 64, 40, 24)
# Depth residuals are regressed in tenths of the initial depth.
DEPTH_STEP_FRACTION = 0.1
CALIBRATION_EPS = 1e-6


class NetworkError(Exception):
    """Exception raised for invalid network inputs or configuration."""
    pass


class SchemeMismatchError(NetworkError):
    """Exception raised when two components disagree on the resolution scheme."""
    pass


class ResolutionScheme:
    """Partition of pixel sizes into P resolution ranges.

    ``bounds`` is strictly descending and starts at the canonical size. Range 1
    is the singleton {bounds[0]}; range i >= 2 covers (bounds[i-1], bounds[i-2]]
    except that range 2 excludes the canonical size and the last range also
    includes its lower bound.
    """

    def __init__(self, canonical_size: int, bounds: Sequence[int]):
        bounds = tuple(int(b) for b in bounds)
        if len(bounds) < 2:
            raise NetworkError(f"Need at least two bounds, got {bounds}")
        if bounds[0] != int(canonical_size):
            raise NetworkError(f"First bound {bounds[0]} must equal the canonical size {canonical_size}")
        if any(a <= b for a, b in zip(bounds, bounds[1:])):
            raise NetworkError(f"Bounds must be strictly descending: {bounds}")
        if bounds[-1] < 2:
            raise NetworkError(f"Smallest bound must be at least 2 pixels: {bounds}")

        self.canonical_size = int(canonical_size)
        self.bounds = bounds
        self.ranges: List[Tuple[int, int]] = [(bounds[0], bounds[0])]
        p = len(bounds)
        for i in range(2, p + 1):
            hi = bounds[i - 2] - (1 if i == 2 else 0)
            lo = bounds[i - 1] + (0 if i == p else 1)
            if lo > hi:
                raise NetworkError(f"Range {i} is empty for bounds {bounds}")
            self.ranges.append((lo, hi))

    @property
    def num_ranges(self) -> int:
        return len(self.bounds)

    @property
    def full_set_size(self) -> int:
        return self.bounds[0] - self.bounds[-1] + 1

    def range_bounds(self, range_index: int) -> Tuple[int, int]:
        """Inclusive (lo, hi) pixel sizes of a 1-based range."""
        if not 1 <= range_index <= self.num_ranges:
            raise NetworkError(f"Range index {range_index} outside 1..{self.num_ranges}")
        return self.ranges[range_index - 1]

    def select_range(self, pixel_size: int) -> int:
        """1-based range containing pixel_size."""
        pixel_size = int(pixel_size)
        for index, (lo, hi) in enumerate(self.ranges, start=1):
            if lo <= pixel_size <= hi:
                return index
        raise NetworkError(
            f"Pixel size {pixel_size} outside [{self.bounds[-1]}, {self.canonical_size}]"
        )

    def midpoint(self, range_index: int) -> int:
        lo, hi = self.range_bounds(range_index)
        return (lo + hi) // 2

    def midpoints(self, include_first: bool = False) -> List[int]:
        start = 1 if include_first else 2
        return [self.midpoint(i) for i in range(start, self.num_ranges + 1)]

    def sample_size(self, range_index: int, rng: np.random.Generator) -> int:
        lo, hi = self.range_bounds(range_index)
        if lo == hi:
            return lo
        return int(rng.integers(lo, hi + 1))

    def all_sizes(self) -> List[int]:
        return list(range(self.canonical_size, self.bounds[-1] - 1, -1))

    def alpha_rows(self, mode: str) -> int:
        """Number of fusion rows under an alpha mode."""
        if mode == 'ranges':
            return self.num_ranges
        if mode == 'per_resolution':
            return self.full_set_size
        raise NetworkError(f"Unknown alpha mode: {mode}")

    def alpha_row(self, pixel_size: int, mode: str) -> int:
        """0-based fusion row used for an input of the given pixel size."""
        range_index = self.select_range(pixel_size)
        if mode == 'ranges':
            return range_index - 1
        if mode == 'per_resolution':
            return self.canonical_size - int(pixel_size)
        raise NetworkError(f"Unknown alpha mode: {mode}")

    def to_dict(self) -> Dict:
        return {'canonical_size': self.canonical_size, 'bounds': list(self.bounds)}

    def __eq__(self, other) -> bool:
        return isinstance(other, ResolutionScheme) and self.bounds == other.bounds

    def __repr__(self) -> str:
        return f"ResolutionScheme(canonical={self.canonical_size}, bounds={self.bounds})"

    def check_matches(self, other: 'ResolutionScheme', context: str) -> None:
        if self != other:
            raise SchemeMismatchError(
                f"Resolution scheme mismatch ({context}): {self.bounds} vs {other.bounds}"
            )


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)


class RscNet:
    """Resolution-aware residual backbone with an iterative parameter regressor.

    Trainable tensors live in ``params`` and frozen per-channel affine buffers in
    ``buffers``. Both are keyed by dotted names in a fixed order that also
    defines the checkpoint layout.
    """

    def __init__(
        self,
        scheme: ResolutionScheme,
        num_betas: int,
        num_joints: int,
        in_channels: int = 1,
        stem_channels: int = 16,
        feature_dim: int = 64,
        num_blocks: int = 4,
        downsample_after: Optional[int] = 2,
        hidden_dim: int = 256,
        iterations: int = 3,
        alpha_mode: str = 'ranges',
        resolution_aware: bool = True,
        init_depth: float = 56.0,
        seed: int = 0
    ):
        if num_blocks < 1:
            raise NetworkError(f"Need at least one residual block, got {num_blocks}")
        if iterations < 1:
            raise NetworkError(f"Regressor iterations must be >= 1, got {iterations}")
        if alpha_mode not in ALPHA_MODES:
            raise NetworkError(f"Unknown alpha mode: {alpha_mode}")
        if downsample_after is not None and not 1 <= downsample_after < num_blocks:
            raise NetworkError(
                f"downsample_after must lie in 1..{num_blocks - 1} or be null, got {downsample_after}"
            )
        if downsample_after is None and stem_channels != feature_dim:
            raise NetworkError(
                f"Without a transition stem_channels ({stem_channels}) must equal feature_dim ({feature_dim})"
            )

        self.scheme = scheme
        self.num_betas = int(num_betas)
        self.num_joints = int(num_joints)
        self.param_dim = self.num_betas + 3 * self.num_joints + 3
        self.config = {
            'in_channels': int(in_channels),
            'stem_channels': int(stem_channels),
            'feature_dim': int(feature_dim),
            'num_blocks': int(num_blocks),
            'downsample_after': downsample_after,
            'hidden_dim': int(hidden_dim),
            'iterations': int(iterations),
            'alpha_mode': alpha_mode,
            'resolution_aware': bool(resolution_aware),
            'init_depth': float(init_depth),
            'num_betas': self.num_betas,
            'num_joints': self.num_joints,
            'seed': int(seed),
        }

        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._initialize(derive_rng(seed, STREAM_INIT))

    # --- construction ---
    def _channels(self, block: int) -> int:
        after = self.config['downsample_after']
        if after is not None and block > after:
            return self.config['feature_dim']
        return self.config['stem_channels']

    def _add_conv(self, name: str, rng, out_ch: int, in_ch: int, gain: float = 1.0) -> None:
        weight = _he_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9, gain)
        self.params[f"{name}.w"] = Tensor(weight, requires_grad=True, name=f"{name}.w")
        self.buffers[f"{name}.scale"] = np.ones(out_ch)
        self.buffers[f"{name}.shift"] = np.zeros(out_ch)

    def _add_linear(self, name: str, rng, in_dim: int, out_dim: int, gain: float = 1.0) -> None:
        weight = _he_normal(rng, (in_dim, out_dim), in_dim, gain)
        self.params[f"{name}.w"] = Tensor(weight, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.b")

    def _initialize(self, rng: np.random.Generator) -> None:
        cfg = self.config
        self._add_conv('stem', rng, cfg['stem_channels'], cfg['in_channels'])
        for k in range(1, cfg['num_blocks'] + 1):
            channels = self._channels(k)
            self._add_conv(f"block{k}.conv1", rng, channels, channels)
            self._add_conv(f"block{k}.conv2", rng, channels, channels, gain=0.1)
            if cfg['downsample_after'] == k:
                self._add_conv('transition', rng, cfg['feature_dim'], channels)

        rows = self.scheme.alpha_rows(cfg['alpha_mode'])
        self.params['alpha'] = Tensor(np.ones((rows, cfg['num_blocks'])), requires_grad=True, name='alpha')

        in_dim = cfg['feature_dim'] + self.param_dim
        self._add_linear('reg.fc1', rng, in_dim, cfg['hidden_dim'])
        self._add_linear('reg.fc2', rng, cfg['hidden_dim'], cfg['hidden_dim'])
        self._add_linear('reg.out', rng, cfg['hidden_dim'], self.param_dim, gain=0.01)

        init_mean = np.zeros(self.param_dim)
        init_mean[-1] = cfg['init_depth']
        self.buffers['reg.init_mean'] = init_mean
        out_scale = np.ones(self.param_dim)
        out_scale[-1] = max(1.0, DEPTH_STEP_FRACTION * cfg['init_depth'])
        self.buffers['reg.out_scale'] = out_scale
        self.buffers['feat.scale'] = np.ones(cfg['feature_dim'])
        self.buffers['feat.shift'] = np.zeros(cfg['feature_dim'])
        self.buffers['calibrated'] = np.zeros(1)

    # --- parameter access ---
    def trainable_names(self) -> List[str]:
        """Names updated by the optimizer; alpha is frozen in the baseline network."""
        names = list(self.params)
        if not self.config['resolution_aware']:
            names.remove('alpha')
        return names

    def trainable(self) -> List[Tensor]:
        return [self.params[name] for name in self.trainable_names()]

    def assign(self, names: Sequence[str], tensors: Sequence[Tensor]) -> None:
        for name, value in zip(names, tensors):
            if value.shape != self.params[name].shape:
                raise NetworkError(f"Shape mismatch assigning {name}: {value.shape} vs {self.params[name].shape}")
            self.params[name] = Tensor(value.data, requires_grad=True, name=name)

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Every parameter and buffer in checkpoint order."""
        items = [(name, tensor.data) for name, tensor in self.params.items()]
        items += [(f"buffer.{name}", array) for name, array in self.buffers.items()]
        return items

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    # --- rows ---
    def rows_for(self, batch: int, range_index: Optional[int] = None,
                 pixel_sizes: Optional[Sequence[int]] = None) -> Optional[np.ndarray]:
        """Per-sample fusion rows for a batch, or None for the baseline path.

        Exact ``pixel_sizes`` (one per sample) take precedence; otherwise the
        range index is used, at its midpoint in per-resolution mode.
        """
        if not self.config['resolution_aware']:
            return None
        mode = self.config['alpha_mode']
        if pixel_sizes is None:
            if range_index is None:
                raise NetworkError("A range index or pixel sizes are required for the resolution-aware network")
            if mode == 'ranges':
                self.scheme.range_bounds(range_index)
                return np.full(batch, range_index - 1, dtype=np.intp)
            pixel_sizes = [self.scheme.midpoint(range_index)] * batch
        if len(pixel_sizes) != batch:
            raise NetworkError(f"Expected {batch} pixel sizes, got {len(pixel_sizes)}")
        return np.array([self.scheme.alpha_row(s, mode) for s in pixel_sizes], dtype=np.intp)

    # --- forward ---
    def _conv_affine(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        y = T.conv2d(x, self.params[f"{name}.w"], stride=stride, padding=1)
        scale = self.buffers[f"{name}.scale"].reshape(1, -1, 1, 1)
        shift = self.buffers[f"{name}.shift"].reshape(1, -1, 1, 1)
        return y * scale + shift

    def residual(self, k: int, z: Tensor) -> Tensor:
        """Nonlinear residual function of block k (1-based)."""
        h = T.relu(self._conv_affine(f"block{k}.conv1", z))
        return self._conv_affine(f"block{k}.conv2", h)

    def forward_backbone(self, images, rows: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Feature vectors and pre-pool maps.

        Args:
            images: (B, C, S, S) or (B, S, S) canonical-size inputs
            rows: 0-based fusion row per sample; None runs the baseline
                network with plain identity-plus-residual blocks

        Returns:
            (features (B, feature_dim), final map z)

        Raises:
            NetworkError: On a wrong spatial size or an out-of-range row
        """
        x = self._input(images)
        pooled, z = self._backbone(x, self._alpha_rows(rows, x.shape[0]))
        features = pooled * self.buffers['feat.scale'] + self.buffers['feat.shift']
        return features, z

    def _input(self, images) -> Tensor:
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        size = self.scheme.canonical_size
        if x.ndim != 4 or x.shape[2:] != (size, size) or x.shape[1] != self.config['in_channels']:
            raise NetworkError(
                f"Expected input (B, {self.config['in_channels']}, {size}, {size}), got {x.shape}"
            )
        return x

    def _alpha_rows(self, rows: Optional[np.ndarray], batch: int) -> Optional[Tensor]:
        if rows is None:
            return None
        rows = np.asarray(rows, dtype=np.intp)
        n_rows = self.params['alpha'].shape[0]
        if rows.shape != (batch,) or np.any(rows < 0) or np.any(rows >= n_rows):
            raise NetworkError(f"Fusion rows {rows.tolist()} invalid for {n_rows} rows and batch {batch}")
        return T.take(self.params['alpha'], rows, axis=0)

    def _standardize(self, name: str, x: Tensor, stride: int) -> None:
        """Set the affine of one convolution so its output on ``x`` has zero mean and unit variance per channel."""
        raw = T.conv2d(x, self.params[f"{name}.w"], stride=stride, padding=1).data
        mean = raw.mean(axis=(0, 2, 3))
        scale = 1.0 / np.maximum(raw.std(axis=(0, 2, 3)), CALIBRATION_EPS)
        self.buffers[f"{name}.scale"] = scale
        self.buffers[f"{name}.shift"] = -mean * scale

    def _backbone(self, x: Tensor, alpha: Optional[Tensor], calibrating: bool = False) -> Tuple[Tensor, Tensor]:
        batch = x.shape[0]
        if calibrating:
            self._standardize('stem', x, 2)
        z = T.relu(self._conv_affine('stem', x, stride=2))
        for k in range(1, self.config['num_blocks'] + 1):
            if calibrating:
                self._standardize(f"block{k}.conv1", z, 1)
            phi = self.residual(k, z)
            if alpha is not None:
                phi = alpha[:, k - 1].reshape(batch, 1, 1, 1) * phi
            z = z + phi
            if self.config['downsample_after'] == k:
                if calibrating:
                    self._standardize('transition', z, 2)
                z = T.relu(self._conv_affine('transition', z, stride=2))
        return T.global_avg_pool(z), z

    @property
    def is_calibrated(self) -> bool:
        return bool(self.buffers['calibrated'][0])

    def calibrate(self, images, rows: Optional[np.ndarray] = None) -> None:
        """Data-dependent initialization of the frozen affine buffers.

        The stem, every first block convolution and the transition are
        standardized per channel over ``images``; second block convolutions
        keep their small initial residual scale. Pooled features are then
        standardized per channel across the samples, channels that do not
        vary are only centred.

        Raises:
            NetworkError: On a wrong input shape or fewer than two images
        """
        x = self._input(images)
        if x.shape[0] < 2:
            raise NetworkError(f"Calibration needs at least two images, got {x.shape[0]}")
        pooled, _ = self._backbone(x, self._alpha_rows(rows, x.shape[0]), calibrating=True)
        mean = pooled.data.mean(axis=0)
        std = pooled.data.std(axis=0)
        scale = np.where(std > CALIBRATION_EPS, 1.0 / np.maximum(std, CALIBRATION_EPS), 1.0)
        self.buffers['feat.scale'] = scale
        self.buffers['feat.shift'] = -mean * scale
        self.buffers['calibrated'] = np.ones(1)
        logger.debug(f"Calibrated on {x.shape[0]} images, pooled feature std range "
                     f"[{std.min():.3g}, {std.max():.3g}]")

    def regress(self, features) -> Tensor:
        """Iterative refinement from the initial parameter mean.

        Raises:
            NetworkError: If the features are not finite or have the wrong size
        """
        features = T.as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.config['feature_dim']:
            raise NetworkError(f"Expected features (B, {self.config['feature_dim']}), got {features.shape}")
        if not np.all(np.isfinite(features.data)):
            raise NetworkError("Non-finite feature vector passed to the regressor")

        batch = features.shape[0]
        estimate = T.as_tensor(np.broadcast_to(self.buffers['reg.init_mean'], (batch, self.param_dim)))
        for _ in range(self.config['iterations']):
            estimate = estimate + self.regress_step(features, estimate) * self.buffers['reg.out_scale']
        return estimate

    def regress_step(self, features: Tensor, estimate: Tensor) -> Tensor:
        """Residual predicted by one pass of the regressor MLP, in units of ``reg.out_scale``.

        The estimate enters as its offset from the initial mean in the same
        units, so every input column is of order one.
        """
        p = self.params
        offset = (estimate - self.buffers['reg.init_mean']) / self.buffers['reg.out_scale']
        h = T.concat([features, offset], axis=1)
        h = T.relu(T.matmul(h, p['reg.fc1.w']) + p['reg.fc1.b'])
        h = T.relu(T.matmul(h, p['reg.fc2.w']) + p['reg.fc2.b'])
        return T.matmul(h, p['reg.out.w']) + p['reg.out.b']

    def split(self, estimate: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """(beta, theta, delta) views of a (B, param_dim) estimate."""
        d, k = self.num_betas, self.num_joints
        return estimate[:, :d], estimate[:, d:d + 3 * k], estimate[:, d + 3 * k:]

    def describe(self) -> str:
        cfg = self.config
        kind = f"RA/{cfg['alpha_mode']}" if cfg['resolution_aware'] else 'baseline'
        return (
            f"RscNet({kind}, blocks={cfg['num_blocks']}, features={cfg['feature_dim']}, "
            f"params={self.num_parameters()}, scheme={self.scheme.bounds})"
        )


def build_network(scheme: ResolutionScheme, num_betas: int, num_joints: int,
                  network_config: Optional[Dict] = None, seed: int = 0) -> RscNet:
    """Construct a network from a plain config mapping."""
    network_config = dict(network_config or {})
    net = RscNet(scheme, num_betas, num_joints, seed=seed, **network_config)
    logger.info(f"Built {net.describe()}")
    return net
