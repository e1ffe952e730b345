"""Bicubic image resampling with the Keys cubic-convolution kernel (a = -0.5)."""
from functools import lru_cache

import numpy as np


KEYS_A = -0.5


def cubic_weight(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic-convolution kernel, vectorized."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


@lru_cache(maxsize=256)
def resample_matrix(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) separable resampling matrix.

    Output sample o sits at input coordinate (o + 0.5) * in/out - 0.5. When
    shrinking, the kernel is stretched by the scale factor and its taps are
    renormalized (antialiasing). Taps past the border clamp to the edge sample.
    """
    if in_size < 1 or out_size < 2:
        raise ValueError(f"Cannot resample {in_size} -> {out_size} (output must be at least 2)")
    scale = in_size / out_size
    stretch = max(scale, 1.0)
    support = 2.0 * stretch

    matrix = np.zeros((out_size, in_size))
    for o in range(out_size):
        center = (o + 0.5) * scale - 0.5
        taps = np.arange(int(np.floor(center - support)) + 1, int(np.floor(center + support)) + 1)
        weights = cubic_weight((center - taps) / stretch)
        weights = weights / weights.sum()
        np.add.at(matrix[o], np.clip(taps, 0, in_size - 1), weights)
    matrix.flags.writeable = False
    return matrix


def bicubic_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Resize the last two (square or not) axes of image to out_size x out_size."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        raise ValueError(f"Need at least a 2-D image, got shape {image.shape}")
    rows = resample_matrix(image.shape[-2], out_size)
    cols = resample_matrix(image.shape[-1], out_size)
    return rows @ image @ cols.T


def degrade(image: np.ndarray, pixel_size: int) -> np.ndarray:
    """Bicubic down to pixel_size then back up to the original size."""
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[-1]
    if pixel_size == size:
        return image.copy()
    return bicubic_resize(bicubic_resize(image, pixel_size), size)


def bicubic_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample a 2-D image at continuous pixel-index coordinates, edge-clamped."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    out = np.zeros(np.shape(x))
    for dy in range(-1, 3):
        wy = cubic_weight(y - (y0 + dy))
        iy = np.clip(y0 + dy, 0, h - 1)
        for dx in range(-1, 3):
            wx = cubic_weight(x - (x0 + dx))
            ix = np.clip(x0 + dx, 0, w - 1)
            out += wy * wx * image[iy, ix]
    return out


def warp_rotate(image: np.ndarray, angle: float, center=None) -> np.ndarray:
    """Rotate an image by ``angle`` radians about ``center`` (pixel coordinates).

    A point q of the output comes from R(-angle)(q - c) + c of the input, with
    x to the right and y down, matching an in-plane camera rotation of labels.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if center is None:
        center = (w / 2.0, h / 2.0)
    cx, cy = center
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing='ij')
    cos, sin = np.cos(angle), np.sin(angle)
    du, dv = u - cx, v - cy
    src_u = cos * du + sin * dv + cx
    src_v = -sin * du + cos * dv + cy
    return bicubic_sample(image, src_u - 0.5, src_v - 0.5)
