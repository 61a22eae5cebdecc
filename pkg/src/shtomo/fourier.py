"""Matrix Fourier transform on separable grids.

Evaluates ``sum_x s(x) exp(-i k.x)`` at arbitrary frequencies, either on a
tensor grid of output frequencies or at an explicit list of points. Cost is
O(N n) per axis, which beats a zero-padded FFT when few outputs are needed
and never interpolates.
"""
from __future__ import annotations

import numpy as np


def mft(samples: np.ndarray, axes, maxes=None, points=None) -> np.ndarray:
    """Transform ``samples`` of shape (..., *grid) over the trailing grid axes.

    With ``maxes`` (one frequency array per dimension) the result has shape
    (..., n_1 * n_2) in row-major order; with ``points`` (shape (n, ndim)) it
    has shape (..., n).
    """
    ndim = len(axes)
    if (maxes is None) == (points is None):
        raise ValueError("give exactly one of maxes or points")
    if maxes is not None:
        eu = np.exp(-1j * np.outer(maxes[0], axes[0]))
        if ndim == 1:
            return samples @ eu.T
        ev = np.exp(-1j * np.outer(maxes[1], axes[1]))
        out = np.einsum("ja,...ab,kb->...jk", eu, samples, ev, optimize=True)
        return out.reshape(out.shape[:-2] + (-1,))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    eu = np.exp(-1j * np.outer(points[:, 0], axes[0]))
    if ndim == 1:
        return samples @ eu.T
    ev = np.exp(-1j * np.outer(points[:, 1], axes[1]))
    t = np.einsum("...ab,jb->...aj", samples, ev)
    return np.einsum("ja,...aj->...j", eu, t)
