"""Utility functions for the rsc engine."""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import yaml


# Random stream ids. Every generator in the package is derived from
# (seed, stream, *keys) so that no two consumers share a stream.
STREAM_MODEL = 0
STREAM_SCENE = 1
STREAM_RASTER = 2
STREAM_PYRAMID = 3
STREAM_AUGMENT = 4
STREAM_INIT = 5
STREAM_SHUFFLE = 6
STREAM_EVAL = 7

LOGGER_NAMES = ('rsc_engine', 'rsc_runner')


def calculate_checksum(file_path: Path) -> str:
    """Calculate MD5 checksum of a file.

    Args:
        file_path: Path to the file

    Returns:
        MD5 checksum as hex string
    """
    md5_hash = hashlib.md5()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(4096), b""):
            md5_hash.update(chunk)
    return md5_hash.hexdigest()


def verify_checksum(file_path: Path, expected_checksum: str) -> bool:
    """Verify file checksum.

    Args:
        file_path: Path to the file
        expected_checksum: Expected MD5 checksum

    Returns:
        True if checksum matches, False otherwise
    """
    actual = calculate_checksum(file_path)
    return actual == expected_checksum


def config_hash(config: Dict[str, Any]) -> str:
    """MD5 of a JSON-serializable mapping, independent of key order."""
    payload = json.dumps(config, sort_keys=True, default=str)
    return hashlib.md5(payload.encode()).hexdigest()


def load_yaml(path: Path, required_fields: Iterable[str] = ()) -> Dict[str, Any]:
    """Load a YAML mapping and check required top-level fields.

    Args:
        path: Path to the YAML document
        required_fields: Keys that must be present

    Returns:
        Parsed mapping (empty dict for an empty document)

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the document is not a mapping or misses a field
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"YAML document not found: {path}")

    with open(path, 'r') as f:
        document = yaml.safe_load(f)

    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ValueError(f"Expected a mapping in {path}, got {type(document).__name__}")

    for field in required_fields:
        if field not in document:
            raise ValueError(f"Missing required field in {path.name}: {field}")

    return document


def dump_yaml(path: Path, document: Dict[str, Any]) -> None:
    """Write a mapping as a key-sorted YAML document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        yaml.safe_dump(document, f, sort_keys=True, default_flow_style=None)


def setup_logging(log_file: Optional[Path] = None, level: int = logging.INFO) -> logging.Logger:
    """Setup logging configuration for the engine and runner loggers.

    Args:
        log_file: Optional path to log file
        level: Logging level

    Returns:
        Configured engine logger
    """
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    file_handler = None
    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)

    for name in LOGGER_NAMES:
        logger = logging.getLogger(name)
        logger.setLevel(level)

        # Clear existing handlers
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        if file_handler is not None:
            logger.addHandler(file_handler)

    return logging.getLogger('rsc_engine')


def derive_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    """Create the generator for one documented random stream.

    Args:
        seed: Global run seed
        stream: One of the STREAM_* ids
        *keys: Further non-negative integers (epoch, source id, ...)

    Returns:
        Independent numpy Generator
    """
    entropy = [int(seed), int(stream)] + [int(k) for k in keys]
    if any(value < 0 for value in entropy):
        raise ValueError(f"Seed material must be non-negative: {entropy}")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, stream: int, *keys: int) -> int:
    """Draw a 32-bit integer seed from a derived stream."""
    return int(derive_rng(seed, stream, *keys).integers(0, 2 ** 31 - 1))
