"""Shared oracles for the test suite: finite differences and loop math."""

import numpy as np


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of scalar f at x (independent oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_gradient_at(f, x, coords, h=1e-5):
    """Central differences on a subset of flat coordinates."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out[j] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def rel_errors(approx, exact, abs_floor=1e-7):
    """Per-coordinate relative error with an absolute floor near zero."""
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    denom = np.maximum(np.abs(exact), abs_floor / 1e-3)
    err = np.abs(approx - exact) / denom
    # below the absolute floor both estimates count as matching
    err[np.abs(approx - exact) <= abs_floor] = 0.0
    return err
