"""Rician magnitude model and its circular-phase augmentation.

The magnitude of a complex Gaussian-corrupted signal is Rician.  Writing
the latent phase explicitly, the joint density of (magnitude, phase)
factors into the Rician marginal and a Von Mises conditional; the
conditional mean of cos(phase) is the ratio I1/I0 of modified Bessel
functions, which is the only transcendental kernel the EM iteration
needs.  Everything here works in log space with exponentially scaled
Bessel functions so that nothing overflows at high SNR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import i0e

from .protocol import DesignMatrices, apply_p_batch
from .tensors import ModelParams, theta_d_from_l

__all__ = [
    "bessel_ratio",
    "rician_logpdf",
    "vonmises_expected_cos",
    "vonmises_logpdf",
    "sample_magnitude",
    "joint_loglik",
    "AugmentedState",
    "SERIES_ASYMPTOTIC_SPLIT",
]

# power series below, asymptotic expansion above; the two branches agree
# to ~2e-14 at the split
SERIES_ASYMPTOTIC_SPLIT = 15.0


def _ratio_series(x):
    """I1(x)/I0(x) by the ascending power series, x < ~20.

    Terms of I0 are (x^2/4)^k / (k!)^2 and of I1/(x/2) are
    (x^2/4)^k / (k! (k+1)!); both converge fast for moderate x and
    neither overflows below the branch split.
    """
    x = np.asarray(x, dtype=float)
    q = 0.25 * x * x
    t0 = np.ones_like(x)
    t1 = np.ones_like(x)
    s0 = t0.copy()
    s1 = t1.copy()
    for k in range(1, 60):
        t0 = t0 * q / (k * k)
        t1 = t1 * q / (k * (k + 1))
        s0 += t0
        s1 += t1
        if np.all(t0 <= 1e-18 * s0):
            break
    return 0.5 * x * s1 / s0


def _ratio_asymptotic(x):
    """I1(x)/I0(x) by the large-argument expansion with optimal truncation.

    Both I0 and I1 share the prefactor e^x / sqrt(2 pi x), which cancels
    in the ratio; the remaining 1/x series are summed until their terms
    stop decreasing (the usual optimal truncation of a divergent
    asymptotic series), giving ~1e-13 accuracy at the branch split and
    machine precision for large x.
    """
    x = np.asarray(x, dtype=float)
    inv8x = 1.0 / (8.0 * x)

    def tail(mu):
        term = np.ones_like(x)
        total = np.ones_like(x)
        active = np.ones_like(x, dtype=bool)
        prev = np.abs(term)
        for k in range(1, 40):
            term = term * (-(mu - (2 * k - 1) ** 2) * inv8x / k)
            mag = np.abs(term)
            active = active & (mag < prev)
            total = np.where(active, total + term, total)
            prev = mag
            if not np.any(active):
                break
        return total

    return tail(4.0) / tail(0.0)


def bessel_ratio(x):
    """A(x) = I1(x)/I0(x), stable for any non-negative x.

    Monotone increasing with A(0) = 0 and A(x) -> 1; accepts scalars or
    arrays.  Negative arguments raise ValueError.
    """
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("bessel_ratio requires x >= 0")
    lo = x < SERIES_ASYMPTOTIC_SPLIT
    out = np.empty_like(x)
    if np.any(lo):
        out[lo] = _ratio_series(x[lo])
    if np.any(~lo):
        out[~lo] = _ratio_asymptotic(x[~lo])
    return float(out) if scalar else out


def rician_logpdf(y, s, sigma2):
    """Log density of the Rician magnitude law.

    log p(y) = log y - log sigma^2 - (y^2 + S^2)/(2 sigma^2)
               + y S / sigma^2 + log( e^{-yS/sigma^2} I0(yS/sigma^2) )

    evaluated with the exponentially scaled Bessel function so large
    arguments never overflow.  Exact zeros of y are scored with the
    degenerate Gaussian density (1 / 2 pi sigma^2) exp(-S^2 / 2 sigma^2)
    that replaces the magnitude law when the scanner discretizes a
    sample to zero.
    """
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(y < 0):
        raise ValueError("magnitudes must be non-negative")
    if not sigma2 > 0:
        raise ValueError(f"sigma^2 must be positive, got {sigma2}")
    kappa = y * s / sigma2
    with np.errstate(divide="ignore"):
        body = (
            np.log(y)
            - np.log(sigma2)
            - (y * y + s * s) / (2.0 * sigma2)
            + kappa
            + np.log(i0e(kappa))
        )
    zero = y == 0
    if np.any(zero):
        gauss = -np.log(2.0 * np.pi * sigma2) - (s * s) / (2.0 * sigma2)
        body = np.where(zero, gauss, body)
    return body if body.ndim else float(body)


def vonmises_expected_cos(y, s, sigma2):
    """Conditional expectation of cos(phase) given the magnitude.

    The phase given y is Von Mises with concentration y S / sigma^2, so
    the expectation is the Bessel ratio at that concentration.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma^2 must be positive, got {sigma2}")
    return bessel_ratio(np.asarray(y, dtype=float) * np.asarray(s, dtype=float) / sigma2)


def vonmises_logpdf(phi, kappa):
    """Log density of the zero-mean Von Mises law on [0, 2 pi)."""
    if np.any(np.asarray(kappa) < 0):
        raise ValueError("concentration must be non-negative")
    phi = np.asarray(phi, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    return kappa * np.cos(phi) - np.log(2.0 * np.pi) - np.log(i0e(kappa)) - kappa


def sample_magnitude(s, sigma, rng):
    """Draw Rician magnitudes y = sqrt((S + e_r)^2 + e_i^2).

    ``s`` may be a scalar or an array; one magnitude is returned per
    entry.  ``sigma`` is the common standard deviation of the real and
    imaginary Gaussian noise components.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    s = np.asarray(s, dtype=float)
    er = rng.normal(0.0, sigma, size=s.shape)
    ei = rng.normal(0.0, sigma, size=s.shape)
    return np.hypot(s + er, ei)


@dataclass
class AugmentedState:
    """Per-acquisition conditional expectations of cos(phase).

    Entries lie in [0, 1); exact-zero magnitudes degenerate to 0.
    """

    cos_phi: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cos_phi, dtype=float)
        if np.any(c < 0) or np.any(c >= 1):
            raise ValueError("cos(phase) expectations must lie in [0, 1)")
        self.cos_phi = c


def joint_loglik(params: ModelParams, y, design: DesignMatrices, state: AugmentedState):
    """Augmented joint log-likelihood with cos(phase) at its expectation.

    m log(1/sigma^2) - 1/(2 sigma^2) sum_j { Y_j^2 + S_j^2
                                             - 2 <cos phi_j> Y_j S_j }

    with S_j the noise-free model signal; additive constants are
    omitted.  This is the EM surrogate maximized by the M-steps.
    """
    if not params.sigma2 > 0:
        raise ValueError(f"sigma^2 must be positive, got {params.sigma2}")
    y = np.asarray(y, dtype=float)
    theta_d = theta_d_from_l(params.L)
    s = params.s0 * np.exp(
        design.z_d @ theta_d + apply_p_batch(params.theta_q, design.v, design.b)
    )
    m = y.size
    quad = np.sum(y * y + s * s - 2.0 * state.cos_phi * y * s)
    return float(-m * np.log(params.sigma2) - quad / (2.0 * params.sigma2))
