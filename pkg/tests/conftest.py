"""Shared test helpers."""

import numpy as np


def interp_axis(arr, axis, factor):
    """np.interp along one axis at half-pixel sample positions.

    Reference for the trilinear upsampler: output sample i reads input
    coordinate (i + 0.5)/factor - 0.5 with edge clamping, which is exactly
    what np.interp does outside the sample range.
    """
    n = arr.shape[axis]
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    return np.apply_along_axis(
        lambda v: np.interp(src, np.arange(n), v), axis, arr)


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar-valued f at float64 x.

    Deliberately independent of the library's backward passes so it can
    serve as the reference they are checked against.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g
