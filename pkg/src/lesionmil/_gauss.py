"""Separable Gaussian smoothing and difference stencils shared by the
texture and phantom code.

Kernels are sampled Gaussians truncated at 4 sigma and normalized to unit
sum; boundaries use whole-sample mirroring (scipy mode ``mirror``, which
matches ``numpy.pad(mode="reflect")``).  Derivatives are taken as central
differences of the smoothed data, so a derivative response is exactly the
finite difference of the smoothed volume.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

TRUNCATE = 4.0


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled, unit-sum Gaussian kernel of radius ceil(4*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = max(1, math.ceil(TRUNCATE * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def conv1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """True convolution along one axis with mirror boundary handling."""
    return correlate1d(arr, kernel[::-1], axis=axis, mode="mirror", output=np.float64)


def smooth3(arr: np.ndarray, sigma_vox) -> np.ndarray:
    """Separable 3D Gaussian smoothing; ``sigma_vox`` is per-axis, in voxels.

    Axes with sigma below 1e-12 are passed through unchanged.
    """
    out = np.asarray(arr, dtype=np.float64)
    for axis, sigma in enumerate(np.broadcast_to(sigma_vox, (3,))):
        if sigma > 1e-12:
            out = conv1d(out, gaussian_kernel(float(sigma)), axis)
    return out


def diff1(arr: np.ndarray, axis: int, spacing: float = 1.0) -> np.ndarray:
    """Central first difference along ``axis``, scaled to physical units."""
    kernel = np.array([0.5, 0.0, -0.5]) / spacing  # convolution form
    return conv1d(arr, kernel, axis)


def diff2(arr: np.ndarray, axis: int, spacing: float = 1.0) -> np.ndarray:
    """Central second difference along ``axis``, scaled to physical units."""
    kernel = np.array([1.0, -2.0, 1.0]) / spacing**2
    return conv1d(arr, kernel, axis)
