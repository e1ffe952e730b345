"""Subcommand implementations shared by the CLI and the tests."""
import logging
from pathlib import Path
from typing import Optional, Sequence

from rsc_engine.ablation import run_ablation
from rsc_engine.body_model import BodyModel, default_camera, generate_toy_model
from rsc_engine.checkpoint import load_checkpoint
from rsc_engine.dataset import Dataset, generate_dataset
from rsc_engine.gradcheck import all_passed, run_suites
from rsc_engine.metrics import evaluate_network, format_table, write_metrics_csv
from rsc_engine.network import ResolutionScheme, build_network
from rsc_engine.synth import AugmentationConfig, SceneConfig
from rsc_engine.trainer import TrainConfig, Trainer
from rsc_engine.utils import setup_logging

from .config import RunConfig, model_seed


logger = logging.getLogger('rsc_runner')

CHECKPOINT_NAME = 'checkpoint.rsc'


def start_logging(config: RunConfig, command: str) -> Path:
    log_file = Path(config.output_dir) / 'logs' / f'{command}.log'
    setup_logging(log_file, getattr(logging, config.log_level))
    logger.info(f"rsc {command} (seed={config.resolved_seed}, output_dir={config.output_dir})")
    return log_file


def config_scheme(config: RunConfig) -> ResolutionScheme:
    return ResolutionScheme(config.scheme.canonical_size, config.scheme.bounds)


def augmentation_config(config: RunConfig) -> Optional[AugmentationConfig]:
    augmentation = AugmentationConfig(**config.augmentation.model_dump())
    return None if augmentation.is_identity else augmentation


def load_dataset(config: RunConfig) -> Dataset:
    """Load the configured dataset and check it was generated for the configured scheme."""
    dataset = Dataset.load(Path(config.data.path))
    dataset.scheme.check_matches(config_scheme(config), 'dataset vs config')
    return dataset


def build_body_model(config: RunConfig) -> BodyModel:
    if config.model.path:
        logger.info(f"Loading body model: {config.model.path}")
        return BodyModel.load(Path(config.model.path))
    return generate_toy_model(model_seed(config), config.model.num_vertices,
                              config.model.num_joints, config.model.num_betas)


def cmd_gen_data(config: RunConfig) -> int:
    """Synthesize the dataset into data.path."""
    start_logging(config, 'gen-data')
    scheme = config_scheme(config)
    model = build_body_model(config)
    camera = default_camera(scheme.canonical_size, config.camera.focal)
    manifest = generate_dataset(
        Path(config.data.path), model, scheme, camera,
        n_train=config.data.n,
        n_eval=config.data.n_eval,
        seed=config.resolved_seed,
        p3d=config.data.p3d,
        scene_config=SceneConfig(**config.data.scene.model_dump()),
        jobs=config.data.jobs,
        dump_ppm=config.data.dump_ppm
    )
    counts = manifest['counts']
    fraction = counts['has_3d'] / counts['total']
    print(f"✓ Dataset written to {config.data.path}")
    print(f"  samples: {counts['total']} (train={counts['train']}, eval={counts['eval']})")
    print(f"  with 3D labels: {counts['has_3d']} ({fraction:.1%})")
    print(f"  scheme: {list(scheme.bounds)}, ranges: {scheme.ranges}")
    return 0


def cmd_train(config: RunConfig) -> int:
    """Train on the train split; writes checkpoint.rsc and loss_curve.csv into output_dir."""
    start_logging(config, 'train')
    dataset = load_dataset(config)
    seed = config.resolved_seed
    net = build_network(dataset.scheme, dataset.model.num_betas, dataset.model.num_joints,
                        config.network.model_dump(), seed)
    trainer = Trainer(
        TrainConfig(**config.train.model_dump()),
        dataset.split('train'),
        dataset.model,
        net,
        dataset.camera,
        seed=seed,
        augmentation=augmentation_config(config),
        output_dir=Path(config.output_dir)
    )
    result = trainer.run()
    print(f"✓ Training finished after {result.iterations} iterations")
    if result.curve:
        last = result.curve[-1]
        print(f"  final loss: total={last[5]:.6f} (L_b={last[2]:.6f}, L_s={last[3]:.6f}, L_f={last[4]:.6f})")
    print(f"  checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    """Evaluate a checkpoint on the eval split; writes metrics.csv into output_dir."""
    start_logging(config, 'eval')
    checkpoint = Path(config.eval.checkpoint) if config.eval.checkpoint else Path(config.output_dir) / CHECKPOINT_NAME
    if not checkpoint.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    net, _ = load_checkpoint(checkpoint)
    dataset = Dataset.load(Path(config.data.path))
    report = evaluate_network(net, dataset.split('eval'), dataset.scheme, dataset.model, dataset.camera,
                              config.eval.include_first, config.eval.sizes, config.eval.batch_size)
    results = [(config.eval.cell, report)]
    path = write_metrics_csv(Path(config.output_dir) / 'metrics.csv', results)
    print(format_table(results))
    print(f"✓ Metrics written to {path}")
    return 0


def cmd_ablate(config: RunConfig) -> int:
    """Run the ablation matrix; writes per-cell runs and a combined metrics.csv."""
    start_logging(config, 'ablate')
    dataset = load_dataset(config)
    results = run_ablation(
        config.ablation.cells,
        dataset,
        config.network.model_dump(),
        config.train.model_dump(),
        config.resolved_seed,
        Path(config.output_dir),
        augmentation=augmentation_config(config),
        include_first=config.eval.include_first,
        eval_sizes=config.eval.sizes
    )
    print(format_table(results))
    print(f"✓ {len(results)} cell(s) written to {Path(config.output_dir) / 'metrics.csv'}")
    return 0


def cmd_gradcheck(config: RunConfig, suites: Optional[Sequence[str]] = None) -> int:
    """Compare analytic and finite-difference gradients; 2 when any check fails."""
    start_logging(config, 'gradcheck')
    results = run_suites(suites, config.resolved_seed)
    for name, reports in results.items():
        failed = [r for r in reports if not r.passed]
        worst = max((r.max_rel_error for r in reports), default=0.0)
        mark = '✓' if not failed else '✗'
        print(f"{mark} {name}: {len(reports) - len(failed)}/{len(reports)} passed (max rel error {worst:.2e})")
        for report in failed:
            print(f"    {report!r}")
    if all_passed(results):
        return 0
    return 2
