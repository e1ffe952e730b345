"""On-disk synthetic datasets.

A dataset directory holds ``manifest.yml``, the ``body_model.json`` used to
generate it and one binary record per sample under ``samples/``.

Record layout (little-endian): magic ``RSCSMP1``; header ``<qIIIIB``
(source_id, P, canonical_size, K, D_beta, has_3d); P ``<I`` chosen pixel
sizes; P * S * S ``<f4`` rasters, row-major; then ``<f8`` labels: J (K*2),
X (K*3, only when has_3d), beta (D), theta (3K), delta (3).
"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .body_model import BodyModel, ParamEstimate
from .network import ResolutionScheme
from .synth import Sample, Scene, SceneConfig, generate_sample
from .utils import calculate_checksum, dump_yaml, load_yaml, verify_checksum


logger = logging.getLogger('rsc_engine')

MAGIC = b'RSCSMP1'
HEADER = struct.Struct('<qIIIIB')
FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.yml'
MODEL_NAME = 'body_model.json'
SPLITS = ('train', 'eval')
REQUIRED_FIELDS = ('format', 'counts', 'splits', 'scheme', 'camera', 'seed', 'model')


class DatasetError(Exception):
    """Exception raised for malformed or inconsistent dataset directories."""
    pass


def record_path(root: Path, source_id: int) -> Path:
    return Path(root) / 'samples' / f"{source_id:06d}.rsc"


def encode_sample(sample: Sample) -> bytes:
    scene = sample.scene
    p, s = sample.rasters.shape[0], sample.rasters.shape[-1]
    k, d = scene.joints2d.shape[0], scene.params.beta.shape[0]
    labels = [scene.joints2d.reshape(-1)]
    if scene.has_3d:
        labels.append(scene.joints3d.reshape(-1))
    labels += [scene.params.beta, scene.params.theta, scene.params.delta]

    parts = [
        MAGIC,
        HEADER.pack(sample.source_id, p, s, k, d, int(scene.has_3d)),
        struct.pack(f"<{p}I", *sample.sizes),
        np.ascontiguousarray(sample.rasters, dtype='<f4').tobytes(),
        np.concatenate(labels).astype('<f8').tobytes(),
    ]
    return b''.join(parts)


def decode_sample(blob: bytes, origin: str = '<bytes>') -> Sample:
    """Parse one record.

    Raises:
        DatasetError: On bad magic, truncation or trailing bytes
    """
    if not blob.startswith(MAGIC):
        raise DatasetError(f"Bad magic in {origin}: expected {MAGIC!r}")
    offset = len(MAGIC)
    if len(blob) < offset + HEADER.size:
        raise DatasetError(f"Truncated header in {origin}")
    source_id, p, s, k, d, has_3d = HEADER.unpack_from(blob, offset)
    offset += HEADER.size

    label_count = 2 * k + (3 * k if has_3d else 0) + d + 3 * k + 3
    expected = offset + 4 * p + 4 * p * s * s + 8 * label_count
    if len(blob) != expected:
        raise DatasetError(f"Record {origin} has {len(blob)} bytes, expected {expected}")

    sizes = list(struct.unpack_from(f"<{p}I", blob, offset))
    offset += 4 * p
    rasters = np.frombuffer(blob, dtype='<f4', count=p * s * s, offset=offset).reshape(p, s, s).copy()
    offset += 4 * p * s * s
    labels = np.frombuffer(blob, dtype='<f8', count=label_count, offset=offset).copy()

    cursor = 0

    def take(count: int) -> np.ndarray:
        nonlocal cursor
        chunk = labels[cursor:cursor + count]
        cursor += count
        return chunk

    joints2d = take(2 * k).reshape(k, 2)
    joints3d = take(3 * k).reshape(k, 3) if has_3d else np.full((k, 3), np.nan)
    params = ParamEstimate(take(d), take(3 * k), take(3))
    return Sample(source_id, rasters, sizes, Scene(params, joints2d, joints3d, bool(has_3d)))


def write_ppm(path: Path, image: np.ndarray) -> Path:
    """Plain (ASCII) PPM of a [0, 1] grayscale raster."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    levels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(int)
    h, w = levels.shape
    lines = [f"P3\n{w} {h}\n255"]
    for row in levels:
        lines.append(' '.join(f"{v} {v} {v}" for v in row))
    path.write_text('\n'.join(lines) + '\n', encoding='ascii')
    return path


class Dataset:
    """Loaded dataset: manifest, body model, scheme and samples by split."""

    def __init__(self, root: Path, manifest: Dict[str, Any], model: BodyModel, samples: Dict[int, Sample]):
        self.root = Path(root)
        self.manifest = manifest
        self.model = model
        self.samples = samples
        self.scheme = ResolutionScheme(manifest['scheme']['canonical_size'], manifest['scheme']['bounds'])
        self.camera = (float(manifest['camera']['focal']), np.asarray(manifest['camera']['principal_point'], dtype=np.float64))

    @property
    def seed(self) -> int:
        return int(self.manifest['seed'])

    def split(self, name: str) -> List[Sample]:
        if name not in SPLITS:
            raise DatasetError(f"Unknown split: {name}")
        return [self.samples[i] for i in self.manifest['splits'][name]]

    def has_3d_fraction(self) -> float:
        if not self.samples:
            return 0.0
        return float(np.mean([s.scene.has_3d for s in self.samples.values()]))

    @classmethod
    def load(cls, root: Path) -> 'Dataset':
        """Load and verify a dataset directory.

        Raises:
            FileNotFoundError: If the directory or manifest is missing
            DatasetError: On checksum mismatch, overlapping splits or bad records
        """
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
        try:
            manifest = load_yaml(manifest_path, REQUIRED_FIELDS)
        except ValueError as e:
            raise DatasetError(str(e)) from e

        model_info = manifest['model']
        model_path = root / model_info['file']
        if not model_path.exists():
            raise DatasetError(f"Body model file missing: {model_path}")
        if not verify_checksum(model_path, model_info['md5']):
            raise DatasetError(f"Body model checksum mismatch for {model_path}")
        model = BodyModel.load(model_path)

        train_ids = set(manifest['splits']['train'])
        eval_ids = set(manifest['splits']['eval'])
        overlap = train_ids & eval_ids
        if overlap:
            raise DatasetError(f"Train and eval splits overlap on {len(overlap)} source ids")

        samples: Dict[int, Sample] = {}
        for source_id in sorted(train_ids | eval_ids):
            path = record_path(root, source_id)
            if not path.exists():
                raise DatasetError(f"Missing sample record: {path}")
            sample = decode_sample(path.read_bytes(), str(path))
            if sample.source_id != source_id:
                raise DatasetError(f"Record {path} holds source id {sample.source_id}")
            samples[source_id] = sample

        dataset = cls(root, manifest, model, samples)
        logger.info(
            f"Dataset loaded: {root} (train={len(train_ids)}, eval={len(eval_ids)}, "
            f"scheme={dataset.scheme.bounds})"
        )
        return dataset


def generate_dataset(
    root: Path,
    model: BodyModel,
    scheme: ResolutionScheme,
    camera: Tuple[float, np.ndarray],
    n_train: int,
    n_eval: int,
    seed: int,
    p3d: float = 0.5,
    scene_config: Optional[SceneConfig] = None,
    jobs: int = 1,
    dump_ppm: int = 0
) -> Dict[str, Any]:
    """Generate, write and describe a dataset.

    Train samples use source ids 0..n_train-1 and eval samples the next
    n_eval ids, so the splits are disjoint by construction.

    Returns:
        The written manifest
    """
    if n_train < 0 or n_eval < 0 or n_train + n_eval == 0:
        raise DatasetError(f"Need a positive sample count, got n={n_train}, n_eval={n_eval}")
    if not 0.0 <= p3d <= 1.0:
        raise DatasetError(f"p3d must lie in [0, 1], got {p3d}")
    scene_config = scene_config or SceneConfig()

    root = Path(root)
    (root / 'samples').mkdir(parents=True, exist_ok=True)
    model_path = model.save(root / MODEL_NAME)

    ids = list(range(n_train + n_eval))

    def build(source_id: int) -> Sample:
        sample = generate_sample(source_id, seed, model, scheme, camera, scene_config, p3d)
        record_path(root, source_id).write_bytes(encode_sample(sample))
        return sample

    logger.info(f"Generating {len(ids)} samples with {jobs} job(s) into {root}")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(build, ids))
    else:
        samples = [build(i) for i in ids]

    has_3d = sum(1 for s in samples if s.scene.has_3d)
    manifest = {
        'format': FORMAT_VERSION,
        'counts': {'total': len(ids), 'train': n_train, 'eval': n_eval, 'has_3d': has_3d},
        'splits': {'train': ids[:n_train], 'eval': ids[n_train:]},
        'scheme': scheme.to_dict(),
        'camera': {'focal': float(camera[0]), 'principal_point': [float(c) for c in camera[1]]},
        'seed': int(seed),
        'p3d': float(p3d),
        'scene': dict(vars(scene_config)),
        'model': {
            'file': MODEL_NAME,
            'md5': calculate_checksum(model_path),
            'N': model.num_vertices,
            'K': model.num_joints,
            'D_beta': model.num_betas,
        },
    }
    dump_yaml(root / MANIFEST_NAME, manifest)

    for sample in samples[:max(0, dump_ppm)]:
        for index, raster in enumerate(sample.rasters, start=1):
            write_ppm(root / 'ppm' / f"{sample.source_id:06d}_r{index}_{sample.sizes[index - 1]}px.ppm", raster)

    logger.info(f"Dataset written: {root} ({len(ids)} samples, has_3d={has_3d})")
    return manifest
