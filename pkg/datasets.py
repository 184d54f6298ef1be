"""
Source pools for the data partitioner

Provides the synthetic Gaussian-class clouds used for desk-scale runs and a
reader for MNIST-format IDX files.
"""

import gzip
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from config import Config
from dirichlet_data import DirichletDataError
from utils import validate_file_path


class DatasetError(DirichletDataError):
    """Exception raised when a source pool cannot be built or read."""
    pass


# IDX element type codes -> numpy dtypes (big-endian)
_IDX_DTYPES = {
    0x08: np.dtype('>u1'),
    0x09: np.dtype('>i1'),
    0x0B: np.dtype('>i2'),
    0x0C: np.dtype('>i4'),
    0x0D: np.dtype('>f4'),
    0x0E: np.dtype('>f8'),
}


def make_gaussian_clouds(num_classes: int = Config.DEFAULT_NUM_CLASSES,
                         feature_dim: int = Config.DEFAULT_FEATURE_DIM,
                         samples_per_class: int = Config.DEFAULT_POOL_SIZE_PER_CLASS,
                         separation: float = Config.DEFAULT_CLASS_SEPARATION,
                         noise: float = Config.DEFAULT_FEATURE_NOISE,
                         rng_seed: int = Config.DEFAULT_SEED) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generate a labelled pool of isotropic Gaussian clouds, one per class.

    Class means are drawn on a sphere of radius ``separation * sqrt(feature_dim)``
    so the class overlap does not depend on the dimension.

    Args:
        num_classes: Number of classes C
        feature_dim: Feature dimension d
        samples_per_class: Pool size of every class
        separation: Scale of the class means
        noise: Standard deviation of the within-class noise
        rng_seed: Seed of the generator

    Returns:
        (features, labels) with features of shape (C * samples_per_class, d)

    Raises:
        DatasetError: If a size argument is not positive
    """
    if num_classes < 2 or feature_dim < 1 or samples_per_class < 1:
        raise DatasetError("Gaussian clouds need >= 2 classes, d >= 1 and >= 1 sample per class")
    if noise < 0 or separation < 0:
        raise DatasetError("separation and noise must be non-negative")

    rng = np.random.default_rng(rng_seed)
    directions = rng.standard_normal((num_classes, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * np.sqrt(feature_dim) * directions

    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + noise * rng.standard_normal((labels.size, feature_dim))
    logging.debug(f"Generated {labels.size} samples in {num_classes} Gaussian clouds (d={feature_dim})")
    return features, labels


def _read_idx(path: Path) -> np.ndarray:
    if not validate_file_path(path):
        raise DatasetError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == '.gz' else open
    try:
        with opener(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise DatasetError(f"Failed to read IDX file {path}: {str(e)}")

    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path} is not an IDX file")
    dtype = _IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise DatasetError(f"{path}: unsupported IDX element type 0x{raw[2]:02X}")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: truncated header, expected {ndim} dimensions")
    itemsize = dtype.itemsize
    if (len(raw) - header_end) % itemsize:
        raise DatasetError(f"{path}: payload of {len(raw) - header_end} bytes is not a whole number of "
                           f"{itemsize}-byte elements")
    shape = tuple(int(v) for v in np.frombuffer(raw[4:header_end], dtype='>u4'))
    payload = np.frombuffer(raw[header_end:], dtype=dtype)
    if payload.size != int(np.prod(shape)):
        raise DatasetError(f"{path}: payload has {payload.size} elements, header says {shape}")
    return payload.reshape(shape)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Load an MNIST-format image/label pair.

    Images are flattened and scaled to [0, 1]; ``.gz`` files are read transparently.

    Returns:
        (features, labels)
    """
    images = _read_idx(Path(images_path))
    labels = _read_idx(Path(labels_path)).astype(np.int64).ravel()
    if images.shape[0] != labels.size:
        raise DatasetError(f"{images.shape[0]} images but {labels.size} labels")

    features = images.reshape(images.shape[0], -1).astype(float)
    if features.size and features.max() > 1.0:
        features /= 255.0
    logging.info(f"Loaded {labels.size} IDX samples with {features.shape[1]} features")
    return features, labels
