"""Acquisition schemes and the design matrices they induce.

An acquisition is a pair (b, g): a diffusion weighting amplitude b and a
unit gradient direction g.  A protocol is an ordered list of m such pairs,
possibly spanning several b-shells; b = 0 rows are allowed and contribute
zero rows to the tensor design matrices while still informing the signal
amplitude and noise level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AcquisitionProtocol",
    "DesignMatrices",
    "build_design",
    "apply_p",
    "apply_p_batch",
    "quartic_rows",
    "monomial_vectors",
    "load_protocol",
    "dump_protocol",
]

# |norm(g) - 1| below this is silently accepted at construction time
_NORM_TOL_STRICT = 1e-9
# loaders renormalize gradients whose norm is off by at most this much
_NORM_TOL_LOAD = 1e-6


@dataclass(frozen=True)
class AcquisitionProtocol:
    """An immutable list of (b, g) acquisitions.

    Parameters
    ----------
    bvals : numpy.ndarray
        Shape (m,), diffusion weightings, all >= 0.  Units are the
        caller's choice (s/mm^2 by file convention); the design matrices
        inherit them verbatim.
    bvecs : numpy.ndarray
        Shape (m, 3), unit gradient directions (norm within 1e-9 of 1).
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.bvals, dtype=float))
        g = np.atleast_2d(np.asarray(self.bvecs, dtype=float))
        if b.ndim != 1 or g.shape != (b.size, 3):
            raise ValueError(
                f"need matching bvals (m,) and bvecs (m, 3); got {b.shape} and {g.shape}"
            )
        if b.size == 0:
            raise ValueError("protocol must contain at least one acquisition")
        if not np.all(np.isfinite(b)) or not np.all(np.isfinite(g)):
            raise ValueError("protocol contains non-finite values")
        neg = np.nonzero(b < 0)[0]
        if neg.size:
            raise ValueError(f"negative b value at acquisition {neg[0]}: {b[neg[0]]}")
        norms = np.linalg.norm(g, axis=1)
        bad = np.nonzero(np.abs(norms - 1.0) > _NORM_TOL_STRICT)[0]
        if bad.size:
            raise ValueError(
                f"gradient {bad[0]} has norm {norms[bad[0]]:.12g}, expected 1 "
                f"within {_NORM_TOL_STRICT:g}"
            )
        b.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "bvals", b)
        object.__setattr__(self, "bvecs", g)

    @property
    def m(self) -> int:
        return self.bvals.size

    def rescaled(self, factor: float) -> "AcquisitionProtocol":
        """Return a copy with all b values multiplied by ``factor``.

        Used for unit conversion, e.g. factor 1e-3 maps s/mm^2 to ms/um^2.
        """
        return AcquisitionProtocol(self.bvals * factor, self.bvecs.copy())


@dataclass(frozen=True)
class DesignMatrices:
    """Design matrices derived from a protocol.

    ``z_d`` is the m x 6 diffusion design, row j equal to
    -b_j (g1^2, g2^2, g3^2, 2 g1 g2, 2 g1 g3, 2 g2 g3).

    ``z_w`` is the m x 15 kurtosis design whose row j carries the quartic
    monomials of g_j with their symmetry multiplicities, scaled by b_j^2/6.

    ``v`` holds the quadratic monomial vectors
    (g1^2, g2^2, g3^2, g1 g2, g1 g3, g2 g3) used by the sum-of-squares
    kurtosis parametrization.
    """

    z_d: np.ndarray
    z_w: np.ndarray
    v: np.ndarray
    b: np.ndarray
    zero_rows: np.ndarray = field(repr=False, default=None)

    @property
    def m(self) -> int:
        return self.b.size


def monomial_vectors(g: np.ndarray) -> np.ndarray:
    """Quadratic monomial vectors v for unit directions ``g`` of shape (m, 3)."""
    g = np.atleast_2d(g)
    g1, g2, g3 = g[:, 0], g[:, 1], g[:, 2]
    return np.column_stack([g1 * g1, g2 * g2, g3 * g3, g1 * g2, g1 * g3, g2 * g3])


def quartic_rows(g: np.ndarray) -> np.ndarray:
    """Multiplicity-weighted quartic monomials of directions ``g``, shape (m, 15).

    Row dotted with the 15 distinct kurtosis tensor elements (in design
    order) gives the full rank-4 contraction sum over all index
    permutations, i.e. the directional kurtosis form W_app(g).
    """
    g = np.atleast_2d(g)
    g1, g2, g3 = g[:, 0], g[:, 1], g[:, 2]
    return np.column_stack([
        g1 ** 4, g2 ** 4, g3 ** 4,
        6 * g1 ** 2 * g2 ** 2, 6 * g1 ** 2 * g3 ** 2, 6 * g2 ** 2 * g3 ** 2,
        12 * g1 ** 2 * g2 * g3, 12 * g1 * g2 ** 2 * g3, 12 * g1 * g2 * g3 ** 2,
        4 * g1 ** 3 * g2, 4 * g1 ** 3 * g3, 4 * g2 ** 3 * g1,
        4 * g2 ** 3 * g3, 4 * g3 ** 3 * g1, 4 * g3 ** 3 * g2,
    ])


def build_design(protocol: AcquisitionProtocol) -> DesignMatrices:
    """Construct all design matrices for a protocol.

    Parameters
    ----------
    protocol : AcquisitionProtocol

    Returns
    -------
    DesignMatrices
        With ``z_d`` (m, 6), ``z_w`` (m, 15), ``v`` (m, 6) and ``b`` (m,).
        b = 0 acquisitions produce exactly zero rows in ``z_d`` and ``z_w``.
    """
    b = protocol.bvals
    g = protocol.bvecs
    norms = np.linalg.norm(g, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > _NORM_TOL_STRICT)[0]
    if bad.size:
        raise ValueError(f"gradient {bad[0]} is not unit norm: {norms[bad[0]]!r}")
    if np.any(b < 0):
        raise ValueError("negative b value in protocol")
    v = monomial_vectors(g)
    scale = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    z_d = -b[:, None] * (v * scale)
    z_w = (b[:, None] ** 2 / 6.0) * quartic_rows(g)
    return DesignMatrices(z_d=z_d, z_w=z_w, v=v, b=b.copy())


def apply_p(theta_q: np.ndarray, v: np.ndarray, b: float) -> float:
    """Quadratic form theta_Q^T P theta_Q for one acquisition.

    P is the (b^2/6)-scaled block diagonal of three copies of v v^T; the
    product is evaluated without materializing the 18 x 18 matrix:

        (b^2 / 6) * sum_i <v, theta_Q[6i:6i+6]>^2

    Always non-negative.
    """
    theta_q = np.asarray(theta_q, dtype=float)
    if theta_q.shape != (18,):
        raise ValueError(f"theta_q must have shape (18,), got {theta_q.shape}")
    u = theta_q.reshape(3, 6) @ np.asarray(v, dtype=float)
    return float(b * b / 6.0 * np.dot(u, u))


def apply_p_batch(theta_q: np.ndarray, v: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized :func:`apply_p` over all m acquisitions; returns shape (m,)."""
    u = np.atleast_2d(v) @ np.asarray(theta_q, dtype=float).reshape(3, 6).T  # (m, 3)
    return np.asarray(b, dtype=float) ** 2 / 6.0 * np.einsum("mi,mi->m", u, u)


def _parse_text_protocol(text: str):
    bvals, bvecs = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(
                f"line {lineno}: expected 'b gx gy gz', got {len(parts)} fields"
            )
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        bvals.append(vals[0])
        bvecs.append(vals[1:])
    return bvals, bvecs


def load_protocol(text: str) -> AcquisitionProtocol:
    """Parse a protocol from its text or JSON representation.

    Two equivalent formats are accepted:

    * whitespace-separated rows ``b gx gy gz``, with ``#`` comments;
    * a JSON object ``{"bvals": [...], "bvecs": [[gx, gy, gz], ...]}``.

    Gradients whose norm is within 1e-6 of unity are renormalized;
    anything farther off is rejected.  A zero gradient is tolerated on
    b = 0 rows only (it is replaced by e_x, which no design row uses).
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid JSON protocol: {exc}") from None
        try:
            bvals, bvecs = obj["bvals"], obj["bvecs"]
        except (KeyError, TypeError):
            raise ValueError("JSON protocol needs 'bvals' and 'bvecs'") from None
    else:
        bvals, bvecs = _parse_text_protocol(text)

    b = np.asarray(bvals, dtype=float)
    g = np.asarray(bvecs, dtype=float)
    if b.size == 0:
        raise ValueError("protocol is empty")
    if g.ndim != 2 or g.shape != (b.size, 3):
        raise ValueError(f"bvecs shape {g.shape} does not match {b.size} bvals")
    if not np.all(np.isfinite(b)) or not np.all(np.isfinite(g)):
        raise ValueError("protocol contains NaN or infinite values")
    if np.any(b < 0):
        raise ValueError("negative b value")

    norms = np.linalg.norm(g, axis=1)
    zero_g = norms == 0.0
    if np.any(zero_g & (b > 0)):
        idx = int(np.nonzero(zero_g & (b > 0))[0][0])
        raise ValueError(f"zero gradient on weighted acquisition {idx}")
    g = g.copy()
    g[zero_g] = (1.0, 0.0, 0.0)
    norms = np.linalg.norm(g, axis=1)
    off = np.abs(norms - 1.0)
    bad = np.nonzero(off > _NORM_TOL_LOAD)[0]
    if bad.size:
        raise ValueError(
            f"gradient {bad[0]} has norm {norms[bad[0]]:.8g}, more than "
            f"{_NORM_TOL_LOAD:g} away from 1"
        )
    g /= norms[:, None]
    return AcquisitionProtocol(b, g)


def dump_protocol(protocol: AcquisitionProtocol) -> str:
    """Render a protocol in the text file format accepted by :func:`load_protocol`."""
    lines = ["# b gx gy gz"]
    for b, g in zip(protocol.bvals, protocol.bvecs):
        lines.append(f"{b:.6f} {g[0]:.9f} {g[1]:.9f} {g[2]:.9f}")
    return "\n".join(lines) + "\n"
