"""Procrustes alignment, joint-error metrics and per-resolution evaluation."""
import csv
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .body_model import BodyModel, keypoints
from .network import ResolutionScheme, RscNet
from .pipeline import predict
from .synth import Sample, degrade_to


logger = logging.getLogger('rsc_engine')

METRICS_HEADER = ('cell', 'range_midpoint', 'mpjpe', 'mpjpe_pa', 'n')
UNITS = 'mu'

# (images, range_index, pixel_sizes, source_ids) -> (joints3d (B,K,3), joints2d (B,K,2))
Predictor = Callable[[np.ndarray, int, List[int], List[int]], Tuple[np.ndarray, np.ndarray]]


class AlignmentError(Exception):
    """Exception raised for degenerate Procrustes inputs."""
    pass


class EvaluationError(Exception):
    """Exception raised for invalid evaluation inputs."""
    pass


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Similarity transform minimizing sum |s R pred_k + t - gt_k|^2.

    Returns:
        (rotation, scale, translation, aligned prediction)

    Raises:
        AlignmentError: On fewer than three joints or zero-variance inputs
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise AlignmentError(f"Expected matching (K, 3) arrays, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise AlignmentError(f"Procrustes alignment needs at least 3 joints, got {pred.shape[0]}")

    mu_pred, mu_gt = pred.mean(axis=0), gt.mean(axis=0)
    x_pred, x_gt = pred - mu_pred, gt - mu_gt
    var_pred = float(np.sum(x_pred ** 2))
    if float(np.sum(x_gt ** 2)) == 0.0:
        raise AlignmentError("Ground-truth joints are all coincident")
    if var_pred == 0.0:
        raise AlignmentError("Predicted joints are all coincident")

    covariance = x_pred.T @ x_gt
    u, _, vh = np.linalg.svd(covariance)
    v = vh.T
    correction = np.eye(3)
    correction[2, 2] = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ correction @ u.T

    scale = float(np.trace(rotation @ covariance) / var_pred)
    translation = mu_gt - scale * rotation @ mu_pred
    aligned = scale * pred @ rotation.T + translation
    return rotation, scale, translation, aligned


def mpjpe(pred: np.ndarray, gt: np.ndarray, aligned: bool = False) -> float:
    """Mean Euclidean joint error, optionally after Procrustes alignment."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"Prediction shape {pred.shape} != ground truth {gt.shape}")
    if aligned:
        pred = procrustes_align(pred, gt)[3]
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


class EvalRow:
    """Errors at one evaluated pixel size."""

    def __init__(self, pixel_size: int, range_index: int, kind: str, mpjpe: float,
                 mpjpe_pa: float, n: int, reproj_px: float):
        self.pixel_size = int(pixel_size)
        self.range_index = int(range_index)
        self.kind = kind
        self.mpjpe = float(mpjpe)
        self.mpjpe_pa = float(mpjpe_pa)
        self.n = int(n)
        self.reproj_px = float(reproj_px)

    def to_dict(self) -> Dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, document: Dict) -> 'EvalRow':
        return cls(**document)


class EvalReport:
    """Rows ordered canonical (optional), midpoints, then sweep sizes."""

    def __init__(self, rows: Sequence[EvalRow]):
        if not rows:
            raise EvaluationError("An evaluation report needs at least one row")
        self.rows = list(rows)

    def midpoint_rows(self) -> List[EvalRow]:
        return [row for row in self.rows if row.kind == 'midpoint']

    def means(self) -> Dict[str, float]:
        return {
            'mpjpe': float(np.mean([r.mpjpe for r in self.rows])),
            'mpjpe_pa': float(np.mean([r.mpjpe_pa for r in self.rows])),
            'reproj_px': float(np.mean([r.reproj_px for r in self.rows])),
        }

    def csv_rows(self, cell: str) -> List[List[str]]:
        return [
            [cell, str(r.pixel_size), f"{r.mpjpe:.6f}", f"{r.mpjpe_pa:.6f}", str(r.n)]
            for r in self.rows
        ]

    def to_dicts(self) -> List[Dict]:
        return [row.to_dict() for row in self.rows]

    @classmethod
    def from_dicts(cls, documents: Sequence[Dict]) -> 'EvalReport':
        return cls([EvalRow.from_dict(d) for d in documents])


def write_metrics_csv(path: Path, reports: Sequence[Tuple[str, EvalReport]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(METRICS_HEADER)
        for cell, report in reports:
            writer.writerows(report.csv_rows(cell))
    logger.info(f"Metrics written: {path}")
    return path


def format_table(reports: Sequence[Tuple[str, EvalReport]]) -> str:
    """Human-readable comparison table with one line per (cell, size)."""
    lines = [
        f"{'cell':<12} {'size':>5} {'range':>5} {'MPJPE':>10} {'MPJPE-PA':>10} {'2D px':>8} {'n':>5}",
        '-' * 61,
    ]
    for cell, report in reports:
        for r in report.rows:
            lines.append(
                f"{cell:<12} {r.pixel_size:>5} {r.range_index:>5} {r.mpjpe:>10.4f} "
                f"{r.mpjpe_pa:>10.4f} {r.reproj_px:>8.3f} {r.n:>5}"
            )
    lines.append(f"(errors in model units, {UNITS})")
    return '\n'.join(lines)


def network_predictor(net: RscNet, model: BodyModel, camera: Tuple[float, np.ndarray]) -> Predictor:
    """Predictor running the trained pipeline with the matching fusion row."""

    def run(images, range_index, pixel_sizes, source_ids):
        pred = predict(net, model, images, camera, range_index=range_index, pixel_sizes=pixel_sizes)
        return pred.joints3d.numpy(), pred.joints2d.numpy()

    return run


def evaluation_sizes(scheme: ResolutionScheme, include_first: bool = False,
                     sizes: Sequence[int] = ()) -> List[Tuple[int, str]]:
    """(pixel size, kind) pairs to evaluate, in report order."""
    plan = []
    if include_first:
        plan.append((scheme.canonical_size, 'canonical'))
    plan += [(m, 'midpoint') for m in scheme.midpoints()]
    plan += [(int(s), 'sweep') for s in sizes]
    for size, _ in plan:
        scheme.select_range(size)
    return plan


def evaluate(
    predictor: Predictor,
    samples: Sequence[Sample],
    scheme: ResolutionScheme,
    model: BodyModel,
    camera: Tuple[float, np.ndarray],
    include_first: bool = False,
    sizes: Sequence[int] = (),
    batch_size: int = 16
) -> EvalReport:
    """Degrade every eval image to each evaluated size and score the predictions.

    Raises:
        EvaluationError: On an empty evaluation set
    """
    if not samples:
        raise EvaluationError("Evaluation set is empty")
    plan = evaluation_sizes(scheme, include_first, sizes)

    truth = [keypoints(model, s.scene.params, camera[0], camera[1]) for s in samples]
    rows = []
    for size, kind in plan:
        range_index = scheme.select_range(size)
        errors, errors_pa, reproj = [], [], []
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            images = np.stack([degrade_to(s.canonical, size) for s in batch])
            joints3d, joints2d = predictor(images, range_index, [size] * len(batch), [s.source_id for s in batch])
            for offset, sample in enumerate(batch):
                gt3d, gt2d = truth[start + offset]
                errors.append(mpjpe(joints3d[offset], gt3d))
                errors_pa.append(mpjpe(joints3d[offset], gt3d, aligned=True))
                reproj.append(float(np.mean(np.linalg.norm(joints2d[offset] - gt2d, axis=-1))))
        row = EvalRow(size, range_index, kind, np.mean(errors), np.mean(errors_pa), len(errors), np.mean(reproj))
        logger.info(
            f"Eval {kind} size={size} (range {range_index}): MPJPE={row.mpjpe:.4f} "
            f"MPJPE-PA={row.mpjpe_pa:.4f} 2D={row.reproj_px:.3f}px n={row.n}"
        )
        rows.append(row)
    return EvalReport(rows)


def evaluate_network(net: RscNet, samples: Sequence[Sample], scheme: ResolutionScheme, model: BodyModel,
                     camera: Tuple[float, np.ndarray], include_first: bool = False,
                     sizes: Sequence[int] = (), batch_size: int = 16) -> EvalReport:
    """Evaluate a network after checking it was built for this scheme."""
    net.scheme.check_matches(scheme, 'checkpoint vs dataset')
    return evaluate(network_predictor(net, model, camera), samples, scheme, model, camera,
                    include_first, sizes, batch_size)


def mean_reprojection(net: RscNet, model: BodyModel, camera: Tuple[float, np.ndarray],
                      samples: Sequence[Sample], range_index: int = 1,
                      batch_size: Optional[int] = None) -> float:
    """Mean 2D keypoint error in pixels on the stored rasters of one range."""
    batch_size = batch_size or len(samples)
    errors = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = np.stack([s.rasters[range_index - 1] for s in batch])
        sizes = [s.sizes[range_index - 1] for s in batch]
        pred = predict(net, model, images, camera, range_index=range_index, pixel_sizes=sizes)
        gt = np.stack([s.scene.joints2d for s in batch])
        errors.append(np.linalg.norm(pred.joints2d.numpy() - gt, axis=-1).mean(axis=1))
    return float(np.mean(np.concatenate(errors)))
