"""Binary checkpoint files.

Layout (little-endian): magic ``RSCKPT1``, an unsigned 64-bit manifest length,
the UTF-8 JSON manifest (sorted keys), then every tensor listed in the
manifest as raw float64 values in manifest order.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .network import ResolutionScheme, RscNet
from .tensor import Tensor


logger = logging.getLogger('rsc_engine')

MAGIC = b'RSCKPT1'
FORMAT_VERSION = 1
_CONSTRUCTOR_KEYS = (
    'in_channels', 'stem_channels', 'feature_dim', 'num_blocks', 'downsample_after',
    'hidden_dim', 'iterations', 'alpha_mode', 'resolution_aware', 'init_depth',
)


class CheckpointError(Exception):
    """Exception raised for malformed or inconsistent checkpoint files."""
    pass


def save_checkpoint(path: Path, net: RscNet, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write the network, its scheme and optional metadata.

    Args:
        path: Destination file
        net: Network to serialize
        extra: JSON-serializable metadata (training config, iteration, ...)

    Returns:
        The written path
    """
    path = Path(path)
    arrays = [('scheme.bounds', np.asarray(net.scheme.bounds, dtype=np.float64))]
    arrays += net.named_arrays()

    manifest = {
        'format': FORMAT_VERSION,
        'config': net.config,
        'scheme': net.scheme.to_dict(),
        'extra': extra or {},
        'tensors': [{'name': name, 'shape': list(array.shape)} for name, array in arrays],
    }
    header = json.dumps(manifest, sort_keys=True).encode('utf-8')

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + '.tmp')
    with open(tmp_path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for _, array in arrays:
            f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
    tmp_path.replace(path)

    logger.info(f"Checkpoint written: {path} ({len(arrays)} tensors)")
    return path


def read_checkpoint(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parse a checkpoint into its manifest and named arrays.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: On bad magic, a corrupt manifest or a truncated payload
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with open(path, 'rb') as f:
        blob = f.read()

    if not blob.startswith(MAGIC):
        raise CheckpointError(f"Bad magic in {path}: expected {MAGIC!r}")
    offset = len(MAGIC)
    if len(blob) < offset + 8:
        raise CheckpointError(f"Truncated checkpoint header in {path}")
    (length,) = struct.unpack_from('<Q', blob, offset)
    offset += 8
    try:
        manifest = json.loads(blob[offset:offset + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint manifest in {path}: {e}") from e
    offset += length

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.get('tensors', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(f"Truncated payload for {entry['name']} in {path}")
        arrays[entry['name']] = np.frombuffer(blob, dtype='<f8', count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes in {path}")

    return manifest, arrays


def load_checkpoint(path: Path) -> Tuple[RscNet, Dict[str, Any]]:
    """Rebuild a network from a checkpoint.

    Returns:
        (network, manifest)

    Raises:
        CheckpointError: If the tensors do not match the declared architecture
    """
    manifest, arrays = read_checkpoint(path)
    try:
        scheme_doc = manifest['scheme']
        config = manifest['config']
    except KeyError as e:
        raise CheckpointError(f"Checkpoint manifest misses {e}") from e

    scheme = ResolutionScheme(scheme_doc['canonical_size'], scheme_doc['bounds'])
    stored_bounds = arrays.get('scheme.bounds')
    if stored_bounds is None or tuple(int(b) for b in stored_bounds) != scheme.bounds:
        raise CheckpointError(f"Scheme bounds tensor disagrees with manifest in {path}")

    net = RscNet(
        scheme,
        config['num_betas'],
        config['num_joints'],
        seed=config.get('seed', 0),
        **{key: config[key] for key in _CONSTRUCTOR_KEYS}
    )

    expected = {name: array.shape for name, array in net.named_arrays()}
    stored = {name: array.shape for name, array in arrays.items() if name != 'scheme.bounds'}
    if expected != stored:
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        mismatched = sorted(n for n in set(expected) & set(stored) if expected[n] != stored[n])
        raise CheckpointError(
            f"Checkpoint tensors do not match the architecture: missing={missing}, "
            f"unexpected={unexpected}, shape_mismatch={mismatched}"
        )

    for name in net.params:
        net.assign([name], [Tensor(arrays[name])])
    for name in net.buffers:
        net.buffers[name] = arrays[f"buffer.{name}"]

    logger.info(f"Checkpoint loaded: {path} ({net.describe()})")
    return net, manifest
