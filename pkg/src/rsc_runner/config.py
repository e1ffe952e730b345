"""Run configuration: YAML file, flag overrides and strict validation."""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Tuple, Type

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rsc_engine.network import DESK_BOUNDS
from rsc_engine.utils import load_yaml


logger = logging.getLogger('rsc_runner')

SEED_ENV = 'RSC_SEED'


class ConfigError(Exception):
    """Exception raised for invalid configuration; names the offending key."""
    pass


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class ModelSection(Section):
    path: Optional[str] = Field(None, description="External body model file; a toy model is generated when unset")
    num_vertices: int = Field(200, ge=2, description="Toy model vertex count N")
    num_joints: int = Field(12, ge=2, description="Toy model joint count K")
    num_betas: int = Field(10, ge=1, description="Shape coefficient count D_beta")
    seed: Optional[int] = Field(None, ge=0, description="Toy model seed (defaults to the run seed)")


class SchemeSection(Section):
    canonical_size: int = Field(64, ge=4, description="Side length every input is resized to")
    bounds: List[int] = Field(list(DESK_BOUNDS), description="Descending range bounds, first equals canonical_size")

    @model_validator(mode='after')
    def check_bounds(self) -> 'SchemeSection':
        if len(self.bounds) < 2 or self.bounds[0] != self.canonical_size:
            raise ValueError(f"bounds must start at canonical_size {self.canonical_size}: {self.bounds}")
        if any(a <= b for a, b in zip(self.bounds, self.bounds[1:])) or self.bounds[-1] < 2:
            raise ValueError(f"bounds must be strictly descending and at least 2: {self.bounds}")
        return self


class NetworkSection(Section):
    in_channels: int = Field(1, ge=1)
    stem_channels: int = Field(16, ge=1)
    feature_dim: int = Field(64, ge=1)
    num_blocks: int = Field(4, ge=1)
    downsample_after: Optional[int] = Field(2, ge=1, description="Block followed by the stride-2 transition; null for none")
    hidden_dim: int = Field(256, ge=1)
    iterations: int = Field(3, ge=1, description="Regressor refinement steps T")
    alpha_mode: Literal['ranges', 'per_resolution'] = 'ranges'
    resolution_aware: bool = True
    init_depth: float = Field(56.0, gt=0, description="Initial camera depth of the regressor mean")


class CameraSection(Section):
    focal: Optional[float] = Field(None, gt=0, description="Focal length in pixels (default 5000 * S / 224)")


class SceneSection(Section):
    beta_sigma: float = Field(1.0, ge=0)
    beta_clip: float = Field(2.0, ge=0)
    joint_limit: float = Field(0.6, ge=0, description="Non-root joint angle limit (radians per component)")
    root_limit: float = Field(0.4, ge=0)
    depth_min: float = Field(50.0, gt=0)
    depth_max: float = Field(62.0, gt=0)
    lateral: float = Field(0.3, ge=0)
    margin: float = Field(2.0, ge=0, description="Minimum keypoint distance from the frame border in pixels")
    max_attempts: int = Field(100, ge=1)


class DataSection(Section):
    path: str = Field('data', description="Dataset directory")
    n: int = Field(512, ge=0, description="Training samples")
    n_eval: int = Field(256, ge=0, description="Evaluation samples")
    p3d: float = Field(0.5, ge=0.0, le=1.0, description="Probability that a sample carries 3D labels")
    jobs: int = Field(1, ge=1)
    dump_ppm: int = Field(0, ge=0, description="Write PPM pyramids of the first COUNT samples")
    scene: SceneSection = SceneSection()


class WeightsSection(Section):
    lambda_1: float = Field(5.0, ge=0)
    lambda_2: float = Field(5.0, ge=0)
    lambda_s: float = Field(0.1, ge=0)
    lambda_f: float = Field(0.1, ge=0)


class PartWeightsSection(Section):
    beta: float = Field(1.0, ge=0)
    theta: float = Field(1.0, ge=0)
    camera: float = Field(1.0, ge=0)


class StageSection(Section):
    ranges: List[int]
    iterations: int = Field(gt=0)


class TrainSection(Section):
    iterations: int = Field(2000, ge=0)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(5e-5, ge=0)
    progressive: bool = True
    stages: Optional[List[StageSection]] = None
    ss_mode: Literal['off', 'directional', 'symmetric', 'highest_only'] = 'directional'
    feature_variant: Literal['off', 'MS', 'CD', 'CL'] = 'CL'
    weights: WeightsSection = WeightsSection()
    queue_capacity: int = Field(256, ge=1)
    queue_source: Literal['all', 'highest'] = 'all'
    tau: float = Field(0.1, gt=0)
    ss_part_weights: PartWeightsSection = PartWeightsSection()
    include_camera: bool = True
    log_every: int = Field(50, ge=1)
    lr_schedule: Literal['constant', 'cosine'] = 'constant'
    calibrate: bool = True


class AugmentationSection(Section):
    noise_sigma: float = Field(0.0, ge=0)
    brightness: float = Field(0.0, ge=0)
    contrast: float = Field(0.0, ge=0)
    rotation_deg: float = Field(0.0, ge=0)
    flip_prob: float = Field(0.0, ge=0.0, le=1.0)
    mirror_permutation: Optional[List[int]] = None
    max_rotation_attempts: int = Field(10, ge=1)


class EvalSection(Section):
    checkpoint: Optional[str] = Field(None, description="Checkpoint file (default <output_dir>/checkpoint.rsc)")
    cell: str = Field('model', description="Label written to the cell column of metrics.csv")
    include_first: bool = False
    sizes: List[int] = Field(default_factory=list, description="Extra pixel sizes to evaluate")
    batch_size: int = Field(16, ge=1)


class AblationSection(Section):
    cells: List[str] = Field(default_factory=list, description="Cells to run; empty runs every cell")


class RunConfig(Section):
    """Every accepted setting of a run."""

    seed: Optional[int] = Field(None, ge=0)
    output_dir: str = 'runs/default'
    log_level: Literal['DEBUG', 'INFO', 'WARNING', 'ERROR'] = 'INFO'
    model: ModelSection = ModelSection()
    scheme: SchemeSection = SchemeSection()
    network: NetworkSection = NetworkSection()
    camera: CameraSection = CameraSection()
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    augmentation: AugmentationSection = AugmentationSection()
    eval: EvalSection = EvalSection()
    ablation: AblationSection = AblationSection()

    @property
    def resolved_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("seed: not resolved")
        return self.seed


def _is_section(annotation: Any) -> bool:
    return isinstance(annotation, type) and issubclass(annotation, BaseModel)


def iter_keys(model: Type[BaseModel] = RunConfig, prefix: str = '') -> Iterator[Tuple[str, Any]]:
    """Dotted leaf keys of a config model with their field info."""
    for name, field in model.model_fields.items():
        key = f"{prefix}{name}"
        if _is_section(field.annotation):
            yield from iter_keys(field.annotation, f"{key}.")
        else:
            yield key, field


def parse_value(text: str) -> Any:
    """Flag values are YAML scalars or flow collections."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse value {text!r}: {e}") from e


def apply_overrides(document: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set dotted keys on a nested mapping (returns a new mapping)."""
    merged = _deep_copy(document)
    for dotted, value in overrides.items():
        parts = dotted.split('.')
        node = merged
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            elif not isinstance(child, dict):
                raise ConfigError(f"{dotted}: '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return merged


def _deep_copy(document: Dict[str, Any]) -> Dict[str, Any]:
    return {k: _deep_copy(v) if isinstance(v, dict) else v for k, v in document.items()}


def _error_key(error: Dict[str, Any]) -> str:
    return '.'.join(str(part) for part in error['loc']) or '<root>'


def validate(document: Dict[str, Any]) -> RunConfig:
    """Strictly validate a merged mapping.

    Raises:
        ConfigError: Naming the first offending dotted key
    """
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"{_error_key(first)}: {first['msg']}") from e


def resolve_seed(config: RunConfig) -> RunConfig:
    """Fill the seed from RSC_SEED (after loading .env) or 0 when neither flag nor file set it."""
    if config.seed is not None:
        return config
    load_dotenv()
    raw = os.environ.get(SEED_ENV)
    seed = 0
    if raw is not None and raw.strip() != '':
        try:
            seed = int(raw)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV}: expected a non-negative integer, got {raw!r}") from e
        if seed < 0:
            raise ConfigError(f"{SEED_ENV}: expected a non-negative integer, got {raw!r}")
        logger.info(f"Seed taken from {SEED_ENV}: {seed}")
    return config.model_copy(update={'seed': seed})


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load an optional YAML file, apply dotted overrides and validate.

    Raises:
        FileNotFoundError: If the config file does not exist
        ConfigError: On invalid YAML structure or values
    """
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            document = load_yaml(Path(path))
        except ValueError as e:
            raise ConfigError(f"<file>: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"<file>: invalid YAML in {path}: {e}") from e
    config = validate(apply_overrides(document, overrides or {}))
    return resolve_seed(config)


def model_seed(config: RunConfig) -> int:
    return config.model.seed if config.model.seed is not None else config.resolved_seed
