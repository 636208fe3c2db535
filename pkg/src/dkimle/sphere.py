"""Deterministic direction sets on the unit sphere."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["fibonacci_sphere", "gauss_legendre_sphere", "ring_directions"]

_GOLDEN = np.pi * (1.0 + np.sqrt(5.0))


@lru_cache(maxsize=8)
def _fib_cached(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = _GOLDEN * i
    out = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    out.setflags(write=False)
    return out

def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors on the Fibonacci spiral lattice."""
    return _fib_cached(int(n))


@lru_cache(maxsize=8)
def _gl_cached(n_polar, n_azimuth):
    # product rule: Gauss-Legendre in cos(polar) x uniform azimuth; exact
    # weights make sphere averages of smooth integrands spectrally accurate
    x, w = np.polynomial.legendre.leggauss(n_polar)
    phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    ct = np.repeat(x, n_azimuth)
    wt = np.repeat(w, n_azimuth)
    st = np.sqrt(np.maximum(0.0, 1.0 - ct * ct))
    ph = np.tile(phi, n_polar)
    dirs = np.column_stack([st * np.cos(ph), st * np.sin(ph), ct])
    wt = wt / wt.sum()
    dirs.setflags(write=False)
    wt.setflags(write=False)
    return dirs, wt

def gauss_legendre_sphere(n_polar: int, n_azimuth: int):
    """Weighted spherical quadrature nodes; weights sum to one."""
    return _gl_cached(int(n_polar), int(n_azimuth))


def ring_directions(axis: np.ndarray, n: int) -> np.ndarray:
    """n unit vectors equally spaced on the great circle orthogonal to ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    # any vector not parallel to axis seeds the orthonormal pair
    seed = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e2 = np.cross(axis, seed)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(axis, e2)
    t = 2.0 * np.pi * np.arange(n) / n
    return np.outer(np.cos(t), e2) + np.outer(np.sin(t), e3)
