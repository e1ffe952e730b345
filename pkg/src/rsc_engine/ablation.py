"""Ablation matrix: one trained model and evaluation report per configuration cell."""
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .dataset import Dataset
from .metrics import EvalReport, evaluate_network, format_table, write_metrics_csv
from .network import build_network
from .state import RunState
from .synth import AugmentationConfig
from .trainer import TrainConfig, train
from .utils import config_hash


logger = logging.getLogger('rsc_engine')

FULL = {'resolution_aware': True, 'ss_mode': 'directional', 'feature_variant': 'CL', 'progressive': True}

# Overrides applied on top of the base network and training settings.
CELLS: Dict[str, Dict[str, Any]] = {
    'Ba': {'resolution_aware': False, 'ss_mode': 'off', 'feature_variant': 'off'},
    'Ba+SS': {'resolution_aware': False, 'ss_mode': 'directional', 'feature_variant': 'off'},
    'RA': {'resolution_aware': True, 'ss_mode': 'off', 'feature_variant': 'off'},
    'RA+SS': {'resolution_aware': True, 'ss_mode': 'directional', 'feature_variant': 'off'},
    'RA+SS+MS': {'resolution_aware': True, 'ss_mode': 'directional', 'feature_variant': 'MS'},
    'RA+SS+CD': {'resolution_aware': True, 'ss_mode': 'directional', 'feature_variant': 'CD'},
    'RA+SS+CL': dict(FULL),
    'w/o PT': dict(FULL, progressive=False),
    'SS-o': dict(FULL, ss_mode='symmetric'),
    'SS-h': dict(FULL, ss_mode='highest_only'),
}
NETWORK_KEYS = ('resolution_aware',)


class AblationError(Exception):
    """Exception raised for unknown cells or an unusable ablation setup."""
    pass


def parse_cells(spec: Optional[Sequence[str]]) -> List[str]:
    """Validate cell names, keeping order and dropping duplicates; None selects every cell."""
    if not spec:
        return list(CELLS)
    names: List[str] = []
    for name in spec:
        name = name.strip()
        if name not in CELLS:
            raise AblationError(f"Unknown ablation cell '{name}'; known cells: {', '.join(CELLS)}")
        if name not in names:
            names.append(name)
    return names


def cell_settings(cell: str, network_config: Dict[str, Any],
                  train_config: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """(network config, train config) for a cell."""
    if cell not in CELLS:
        raise AblationError(f"Unknown ablation cell '{cell}'")
    network = dict(network_config)
    training = dict(train_config)
    for key, value in CELLS[cell].items():
        if key in NETWORK_KEYS:
            network[key] = value
        else:
            training[key] = value
    return network, training


def cell_directory(root: Path, cell: str) -> Path:
    return Path(root) / 'cells' / re.sub(r'[^A-Za-z0-9]+', '_', cell).strip('_')


def run_ablation(
    cells: Sequence[str],
    dataset: Dataset,
    network_config: Dict[str, Any],
    train_config: Dict[str, Any],
    seed: int,
    output_dir: Path,
    augmentation: Optional[AugmentationConfig] = None,
    include_first: bool = False,
    eval_sizes: Sequence[int] = ()
) -> List[Tuple[str, EvalReport]]:
    """Train and evaluate every requested cell on the same data, seeds and schedule.

    Completed cells are recorded in a checksummed state file keyed by a hash
    of their full configuration and are not retrained on a re-run.

    Returns:
        (cell, report) pairs in request order
    """
    cells = parse_cells(cells)
    output_dir = Path(output_dir)
    state = RunState(output_dir / 'ablation_state.json')
    state.load()

    train_samples = dataset.split('train')
    eval_samples = dataset.split('eval')
    if not eval_samples:
        raise AblationError("The dataset has no eval split")

    results: List[Tuple[str, EvalReport]] = []
    for index, cell in enumerate(cells, start=1):
        network, training = cell_settings(cell, network_config, train_config)
        cell_hash = config_hash({
            'network': network,
            'train': training,
            'seed': seed,
            'model_md5': dataset.manifest['model']['md5'],
            'splits': dataset.manifest['splits'],
            'augmentation': vars(augmentation) if augmentation else None,
            'eval': {'include_first': include_first, 'sizes': list(eval_sizes)},
        })

        if state.is_cell_complete(cell, cell_hash):
            logger.warning(f"Cell {cell} already complete for this configuration, reusing its report")
            results.append((cell, EvalReport.from_dicts(state.cell_rows(cell))))
            continue

        logger.info(f"Ablation cell {index}/{len(cells)}: {cell}")
        net = build_network(dataset.scheme, dataset.model.num_betas, dataset.model.num_joints, network, seed)
        result = train(TrainConfig(**training), train_samples, dataset.model, net, dataset.camera, seed,
                       augmentation, cell_directory(output_dir, cell))
        report = evaluate_network(result.net, eval_samples, dataset.scheme, dataset.model, dataset.camera,
                                  include_first, eval_sizes)
        state.mark_cell_complete(cell, cell_hash, report.to_dicts())
        results.append((cell, report))

    write_metrics_csv(output_dir / 'metrics.csv', results)
    state.mark_run_complete(success=True)
    logger.info("Ablation summary:\n" + format_table(results))
    return results
