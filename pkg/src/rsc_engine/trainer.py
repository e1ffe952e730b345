"""Progressive multi-resolution training."""
import csv
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .body_model import BodyModel, ProjectionError
from .checkpoint import save_checkpoint
from .losses import (
    FEATURE_VARIANTS,
    SS_MODES,
    FeatureQueue,
    LabelSet,
    LossConfig,
    LossWeights,
    queue_update,
    total_loss,
)
from .network import NetworkError, RscNet
from .optim import AdamState, adam_step
from .pipeline import check_compatible, predict
from .state import RunState
from .synth import AugmentationConfig, Sample, augment, make_pyramid
from .tensor import backward, stop_gradient
from .utils import STREAM_AUGMENT, STREAM_PYRAMID, STREAM_SHUFFLE, config_hash, derive_rng


logger = logging.getLogger('rsc_engine')

CURVE_HEADER = ('iteration', 'stage', 'L_b', 'L_s', 'L_f', 'total')
QUEUE_SOURCES = ('all', 'highest')
LR_SCHEDULES = ('constant', 'cosine')
CALIBRATION_SAMPLES = 64
PREFETCH_DEPTH = 2


class TrainingError(Exception):
    """Exception raised for invalid schedules or numeric failures during training."""
    pass


class Stage:
    """Active ranges and iteration budget of one training stage."""

    def __init__(self, ranges: Sequence[int], iterations: int):
        self.ranges = sorted(int(r) for r in ranges)
        self.iterations = int(iterations)

    def to_dict(self) -> Dict[str, Any]:
        return {'ranges': list(self.ranges), 'iterations': self.iterations}


class TrainConfig:
    """Schedule, optimizer and loss settings of one training run."""

    def __init__(
        self,
        iterations: int = 2000,
        batch_size: int = 8,
        learning_rate: float = 5e-5,
        progressive: bool = True,
        stages: Optional[Sequence[Dict[str, Any]]] = None,
        ss_mode: str = 'directional',
        feature_variant: str = 'CL',
        weights: Optional[Dict[str, float]] = None,
        queue_capacity: int = 256,
        queue_source: str = 'all',
        tau: float = 0.1,
        ss_part_weights: Optional[Dict[str, float]] = None,
        include_camera: bool = True,
        log_every: int = 50,
        lr_schedule: str = 'constant',
        calibrate: bool = True
    ):
        if ss_mode not in SS_MODES:
            raise TrainingError(f"Unknown self-supervision mode: {ss_mode}")
        if feature_variant not in FEATURE_VARIANTS:
            raise TrainingError(f"Unknown feature variant: {feature_variant}")
        if queue_source not in QUEUE_SOURCES:
            raise TrainingError(f"Unknown queue source: {queue_source}")
        if lr_schedule not in LR_SCHEDULES:
            raise TrainingError(f"Unknown learning rate schedule: {lr_schedule}")
        if batch_size < 1 or iterations < 0:
            raise TrainingError(f"Invalid batch_size={batch_size} or iterations={iterations}")
        self.iterations = int(iterations)
        self.batch_size = int(batch_size)
        self.learning_rate = float(learning_rate)
        self.progressive = bool(progressive)
        self.stages = [dict(s) for s in stages] if stages else None
        self.ss_mode = ss_mode
        self.feature_variant = feature_variant
        self.weights = dict(weights or {})
        self.queue_capacity = int(queue_capacity)
        self.queue_source = queue_source
        self.tau = float(tau)
        self.ss_part_weights = dict(ss_part_weights or {})
        self.include_camera = bool(include_camera)
        self.log_every = max(1, int(log_every))
        self.lr_schedule = lr_schedule
        self.calibrate = bool(calibrate)

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))

    def learning_rate_at(self, iteration: int, total: int) -> float:
        """Step size of the 1-based ``iteration`` out of ``total``; cosine decays from the base rate towards zero."""
        if self.lr_schedule == 'constant' or total <= 0:
            return self.learning_rate
        return float(self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * (iteration - 1) / total)))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def loss_config(self, feature_variant: Optional[str] = None) -> LossConfig:
        return LossConfig(
            ss_mode=self.ss_mode,
            feature_variant=self.feature_variant if feature_variant is None else feature_variant,
            tau=self.tau,
            part_weights=self.ss_part_weights,
            include_camera=self.include_camera,
        )

    def build_stages(self, num_ranges: int) -> List[Stage]:
        """Resolve the stage schedule.

        Explicit stages win; otherwise progressive training splits the
        iteration budget equally over P cumulative stages (the remainder goes
        to the last one) and non-progressive training runs one stage over
        every range.

        Raises:
            TrainingError: On an empty stage, an out-of-range index or a
                non-cumulative progressive schedule
        """
        if self.stages is not None:
            stages = [Stage(s.get('ranges', []), s.get('iterations', 0)) for s in self.stages]
        elif self.iterations == 0:
            return []
        elif self.progressive:
            share = self.iterations // num_ranges
            stages = [Stage(range(1, k + 1), share) for k in range(1, num_ranges + 1)]
            stages[-1].iterations += self.iterations - share * num_ranges
            stages = [s for s in stages if s.iterations > 0]
        else:
            stages = [Stage(range(1, num_ranges + 1), self.iterations)]

        previous: set = set()
        for index, stage in enumerate(stages, start=1):
            if not stage.ranges:
                raise TrainingError(f"Stage {index} has no active ranges")
            if stage.iterations <= 0:
                raise TrainingError(f"Stage {index} needs a positive iteration count, got {stage.iterations}")
            bad = [r for r in stage.ranges if not 1 <= r <= num_ranges]
            if bad:
                raise TrainingError(f"Stage {index} references ranges {bad} outside 1..{num_ranges}")
            if self.progressive and not previous <= set(stage.ranges):
                raise TrainingError(f"Progressive stage {index} drops ranges {sorted(previous - set(stage.ranges))}")
            previous = set(stage.ranges)
        return stages


class Batch:
    """Pyramids and labels of one mini-batch."""

    def __init__(self, samples: List[Sample]):
        self.samples = samples
        scenes = [s.scene for s in samples]
        has_3d = np.array([sc.has_3d for sc in scenes], dtype=bool)
        self.labels = LabelSet(
            joints2d=np.stack([sc.joints2d for sc in scenes]),
            has_3d=has_3d,
            joints3d=np.stack([sc.joints3d for sc in scenes]),
            beta=np.stack([sc.params.beta for sc in scenes]),
            theta=np.stack([sc.params.theta for sc in scenes]),
        )

    def images(self, range_index: int) -> np.ndarray:
        return np.stack([s.rasters[range_index - 1] for s in self.samples])

    def sizes(self, range_index: int) -> List[int]:
        return [s.sizes[range_index - 1] for s in self.samples]


class TrainResult:
    def __init__(self, net: RscNet, curve: List[Tuple], checkpoint: Optional[Path], iterations: int):
        self.net = net
        self.curve = curve
        self.checkpoint = checkpoint
        self.iterations = iterations


class Trainer:
    """Runs the stage schedule over a fixed training split."""

    def __init__(
        self,
        config: TrainConfig,
        samples: Sequence[Sample],
        model: BodyModel,
        net: RscNet,
        camera: Tuple[float, np.ndarray],
        seed: int = 0,
        augmentation: Optional[AugmentationConfig] = None,
        output_dir: Optional[Path] = None
    ):
        check_compatible(net, model)
        if len(samples) < config.batch_size:
            raise TrainingError(f"Need at least batch_size={config.batch_size} training samples, got {len(samples)}")
        if config.feature_variant == 'CL' and config.queue_capacity % config.batch_size != 0:
            raise TrainingError(
                f"Queue capacity {config.queue_capacity} must be a multiple of batch size {config.batch_size}"
            )

        self.config = config
        self.samples = list(samples)
        self.model = model
        self.net = net
        self.camera = camera
        self.seed = int(seed)
        self.augmentation = augmentation or AugmentationConfig()
        self.output_dir = None if output_dir is None else Path(output_dir)
        self.scheme = net.scheme
        self.stages = config.build_stages(self.scheme.num_ranges)
        self.batches_per_epoch = len(self.samples) // config.batch_size

        self.weights = config.loss_weights()
        self.queue = FeatureQueue(config.queue_capacity) if config.feature_variant == 'CL' else None
        self.adam = AdamState.for_params(net.trainable(), learning_rate=config.learning_rate)
        self.curve: List[Tuple] = []
        self.state = RunState(self.output_dir / 'state.json') if self.output_dir else None

    # --- data ---
    def _prepare(self, sample: Sample, epoch: int) -> Sample:
        rasters, sizes = make_pyramid(sample.canonical, self.scheme,
                                      derive_rng(self.seed, STREAM_PYRAMID, epoch, sample.source_id))
        fresh = Sample(sample.source_id, rasters, sizes, sample.scene)
        return augment(fresh, self.augmentation, derive_rng(self.seed, STREAM_AUGMENT, epoch, sample.source_id),
                       self.model, self.camera)

    def build_batch(self, iteration: int) -> Batch:
        """Deterministic batch for a global iteration index."""
        epoch, position = divmod(iteration, self.batches_per_epoch)
        order = derive_rng(self.seed, STREAM_SHUFFLE, epoch).permutation(len(self.samples))
        b = self.config.batch_size
        chosen = order[position * b:(position + 1) * b]
        return Batch([self._prepare(self.samples[i], epoch) for i in chosen])

    # --- one step ---
    def step(self, batch: Batch, ranges: Sequence[int]) -> Dict[str, float]:
        cfg = self.config
        predictions = [
            predict(self.net, self.model, batch.images(r), self.camera, range_index=r, pixel_sizes=batch.sizes(r))
            for r in ranges
        ]

        feature_variant = cfg.feature_variant
        if feature_variant == 'CL' and not self.queue.is_full:
            feature_variant = 'off'
        loss, terms = total_loss(
            predictions, batch.labels, self.weights, cfg.loss_config(feature_variant), self.queue,
            range_indices=ranges, num_betas=self.net.num_betas, num_joints=self.net.num_joints,
        )
        if not np.isfinite(terms['total']):
            raise TrainingError(f"Non-finite loss {terms} with active ranges {list(ranges)}")

        params = self.net.trainable()
        backward(loss, wrt=params)
        updated = adam_step(params, [p.grad for p in params], self.adam)
        self.net.assign(self.net.trainable_names(), updated)

        if self.queue is not None:
            sources = predictions if cfg.queue_source == 'all' else predictions[:1]
            for pred in sources:
                queue_update(self.queue, stop_gradient(pred.features))
        return terms

    def calibrate(self) -> None:
        """Data-dependent init of the network's frozen affines from canonical training rasters."""
        chosen = self.samples[:CALIBRATION_SAMPLES]
        images = np.stack([s.canonical for s in chosen])
        self.net.calibrate(images, self.net.rows_for(len(chosen), range_index=1))
        logger.info(f"Calibrated network normalization on {len(chosen)} canonical training images")

    # --- main loop ---
    def run(self) -> TrainResult:
        cfg = self.config
        total = sum(s.iterations for s in self.stages)
        logger.info(
            f"Training {self.net.describe()} for {total} iterations in {len(self.stages)} stage(s), "
            f"batch={cfg.batch_size}, ss={cfg.ss_mode}, feature={cfg.feature_variant}"
        )
        if total > 0 and cfg.calibrate and len(self.samples) > 1 and not self.net.is_calibrated:
            self.calibrate()

        iteration = 0
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending: deque = deque()
            next_index = 0
            for stage_index, stage in enumerate(self.stages, start=1):
                logger.info(f"Stage {stage_index}/{len(self.stages)}: ranges {stage.ranges}, {stage.iterations} iterations")
                if self.state:
                    self.state.mark_stage_started(stage_index, stage.ranges)
                for _ in range(stage.iterations):
                    while next_index < total and len(pending) < PREFETCH_DEPTH:
                        pending.append(pool.submit(self.build_batch, next_index))
                        next_index += 1
                    batch = pending.popleft().result()
                    iteration += 1
                    self.adam.learning_rate = cfg.learning_rate_at(iteration, total)
                    try:
                        terms = self.step(batch, stage.ranges)
                    except (TrainingError, ProjectionError, NetworkError) as e:
                        raise TrainingError(f"Iteration {iteration} (stage {stage_index}): {e}") from e

                    self.curve.append((iteration, stage_index, terms['L_b'], terms['L_s'], terms['L_f'], terms['total']))
                    if iteration % cfg.log_every == 0 or iteration == total:
                        logger.info(
                            f"iter {iteration}/{total} stage {stage_index} "
                            f"L_b={terms['L_b']:.5g} L_s={terms['L_s']:.5g} L_f={terms['L_f']:.5g} "
                            f"total={terms['total']:.5g}"
                        )
                if self.state:
                    self.state.mark_stage_complete(stage_index, iteration)

        checkpoint = None
        if self.output_dir is not None:
            self.write_curve(self.output_dir / 'loss_curve.csv')
            checkpoint = save_checkpoint(self.output_dir / 'checkpoint.rsc', self.net, extra={
                'iterations': iteration,
                'seed': self.seed,
                'stages': [s.to_dict() for s in self.stages],
                'train_hash': config_hash(cfg.to_dict()),
            })
            if self.state:
                self.state.mark_run_complete(success=True)
        logger.info(f"Training finished after {iteration} iterations")
        return TrainResult(self.net, self.curve, checkpoint, iteration)

    def write_curve(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(CURVE_HEADER)
            for it, stage, l_b, l_s, l_f, total in self.curve:
                writer.writerow([it, stage, repr(l_b), repr(l_s), repr(l_f), repr(total)])
        logger.info(f"Loss curve written: {path}")
        return path


def train(config: TrainConfig, samples: Sequence[Sample], model: BodyModel, net: RscNet,
          camera: Tuple[float, np.ndarray], seed: int = 0, augmentation: Optional[AugmentationConfig] = None,
          output_dir: Optional[Path] = None) -> TrainResult:
    return Trainer(config, samples, model, net, camera, seed, augmentation, output_dir).run()
