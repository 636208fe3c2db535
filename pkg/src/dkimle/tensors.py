"""Tensor parametrizations, their Jacobians, and the forward signal model.

The diffusion tensor D is parametrized through the entries of its lower
triangular factor U (D = U U^T), which keeps D positive semidefinite by
construction.  The kurtosis tensor is parametrized through a sum of three
squared quadratic forms: W_app(g) = v^T G v with G = Q Q^T positive
semidefinite, which keeps the directional kurtosis non-negative.  Both
parametrizations, their derivative structures, and the mappings between
the Gram matrix and the 15 distinct kurtosis tensor elements live here.

Orderings are fixed once and shared with the design matrices:

* theta_D = (D11, D22, D33, D12, D13, D23)
* theta_W = (W1111, W2222, W3333, W1122, W1133, W2233,
             W1123, W1223, W1233, W1112, W1113, W1222,
             W2223, W1333, W2333)
* theta_Q = MD * (q1; q2; q3), three stacked 6-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .protocol import DesignMatrices, apply_p_batch, quartic_rows

__all__ = [
    "NotPositiveDefinite",
    "ModelParams",
    "theta_d_from_l",
    "l_matrix",
    "d_matrix",
    "jacobian_l",
    "cholesky_of_d",
    "second_derivative_contraction",
    "gram_from_q",
    "q_from_gram",
    "kurtosis_from_gram",
    "gram_from_kurtosis",
    "factor_kurtosis",
    "kurtosis_to_tensor4",
    "tensor4_to_kurtosis",
    "predict_signal",
    "apparent_coefficients",
    "mean_diffusivity",
    "EXP_CAP",
]

# exp() arguments above this are clamped in predict_signal; anything that
# large is already deep in constraint-violating territory
EXP_CAP = 50.0

# index quadruples of the 15 distinct kurtosis elements, design order
_W_INDEX = [
    (0, 0, 0, 0), (1, 1, 1, 1), (2, 2, 2, 2),
    (0, 0, 1, 1), (0, 0, 2, 2), (1, 1, 2, 2),
    (0, 0, 1, 2), (0, 1, 1, 2), (0, 1, 2, 2),
    (0, 0, 0, 1), (0, 0, 0, 2), (0, 1, 1, 1),
    (1, 1, 1, 2), (0, 2, 2, 2), (1, 2, 2, 2),
]


class NotPositiveDefinite(ValueError):
    """Raised when a tensor expected to be positive definite is not.

    Carries the offending minimum eigenvalue in ``min_eigenvalue``.
    """

    def __init__(self, message, min_eigenvalue):
        super().__init__(message)
        self.min_eigenvalue = float(min_eigenvalue)


def theta_d_from_l(L):
    """Map Cholesky parameters L to theta_D = (D11, D22, D33, D12, D13, D23).

    D = U U^T with U lower triangular holding (L1, L4, L2, L5, L6, L3)
    columnwise, hence

        theta_D = (L1^2, L2^2 + L4^2, L3^2 + L5^2 + L6^2,
                   L1 L4, L1 L5, L4 L5 + L2 L6).
    """
    L1, L2, L3, L4, L5, L6 = np.asarray(L, dtype=float)
    return np.array([
        L1 * L1,
        L2 * L2 + L4 * L4,
        L3 * L3 + L5 * L5 + L6 * L6,
        L1 * L4,
        L1 * L5,
        L4 * L5 + L2 * L6,
    ])


def l_matrix(L):
    """Assemble the lower triangular factor U from the 6-vector L."""
    L1, L2, L3, L4, L5, L6 = np.asarray(L, dtype=float)
    return np.array([[L1, 0.0, 0.0], [L4, L2, 0.0], [L5, L6, L3]])


def d_matrix(theta_d):
    """Assemble the symmetric 3 x 3 diffusion tensor from theta_D."""
    d = np.asarray(theta_d, dtype=float)
    return np.array([
        [d[0], d[3], d[4]],
        [d[3], d[1], d[5]],
        [d[4], d[5], d[2]],
    ])


def mean_diffusivity(theta_d) -> float:
    """MD = tr(D) / 3."""
    d = np.asarray(theta_d, dtype=float)
    return float((d[0] + d[1] + d[2]) / 3.0)


def jacobian_l(L):
    """Jacobian d theta_D / d L, a sparse 6 x 6 matrix.

    Row i holds the partials of theta_D[i]; matches central finite
    differences of :func:`theta_d_from_l` everywhere.
    """
    L1, L2, L3, L4, L5, L6 = np.asarray(L, dtype=float)
    J = np.zeros((6, 6))
    J[0, 0] = 2 * L1
    J[1, 1] = 2 * L2
    J[1, 3] = 2 * L4
    J[2, 2] = 2 * L3
    J[2, 4] = 2 * L5
    J[2, 5] = 2 * L6
    J[3, 0] = L4
    J[3, 3] = L1
    J[4, 0] = L5
    J[4, 4] = L1
    J[5, 1] = L6
    J[5, 3] = L5
    J[5, 4] = L4
    J[5, 5] = L2
    return J


def cholesky_of_d(theta_d):
    """Cholesky parameters L reproducing a positive definite theta_D.

    Raises
    ------
    NotPositiveDefinite
        If the assembled D is not positive definite; the exception carries
        the minimum eigenvalue so callers may clamp and retry.
    """
    D = d_matrix(theta_d)
    try:
        U = np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(D)[0])
        raise NotPositiveDefinite(
            f"D is not positive definite (min eigenvalue {min_eig:.6g})", min_eig
        ) from None
    return np.array([U[0, 0], U[1, 1], U[2, 2], U[1, 0], U[2, 0], U[2, 1]])


def second_derivative_contraction(z_row):
    """Hessian of <z_row, theta_D(L)> with respect to L.

    The result is the symmetric 6 x 6 matrix with diagonal
    (2 z1, 2 z2, 2 z3, 2 z2, 2 z3, 2 z3) and off-diagonal entries
    (1,4) = z4, (1,5) = z5, (2,6) = z6 and (4,5) = z6 (1-based), verified
    against the finite-difference Hessian.  Constant prefactors such as
    the 3/b^2 of the upper-bound constraint are applied by the caller.
    Linear in z_row.
    """
    z1, z2, z3, z4, z5, z6 = np.asarray(z_row, dtype=float)
    return np.array([
        [2 * z1, 0.0, 0.0, z4, z5, 0.0],
        [0.0, 2 * z2, 0.0, 0.0, 0.0, z6],
        [0.0, 0.0, 2 * z3, 0.0, 0.0, 0.0],
        [z4, 0.0, 0.0, 2 * z2, z6, 0.0],
        [z5, 0.0, 0.0, z6, 2 * z3, 0.0],
        [0.0, z6, 0.0, 0.0, 0.0, 2 * z3],
    ])


def gram_from_q(theta_q, md):
    """Gram matrix G = Q Q^T / MD^2 from the stacked kurtosis parameters.

    Q is the 6 x 3 matrix whose columns are the three consecutive
    6-blocks of theta_Q.  G is symmetric positive semidefinite of rank
    at most 3 and dimensionless.
    """
    if md <= 0:
        raise ValueError(f"mean diffusivity must be positive, got {md}")
    Q = np.asarray(theta_q, dtype=float).reshape(3, 6).T
    return (Q @ Q.T) / (md * md)


def q_from_gram(G, md):
    """Factor a PSD Gram matrix into theta_Q = MD * vec(Q), G ~= Q Q^T.

    Negative eigenvalues are clipped to zero and only the three largest
    eigenpairs are kept, so the result is exact whenever G is PSD with
    rank <= 3 and a best rank-3 approximation otherwise.
    """
    if md <= 0:
        raise ValueError(f"mean diffusivity must be positive, got {md}")
    G = np.asarray(G, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    vals = np.clip(vals[::-1], 0.0, None)[:3]
    vecs = vecs[:, ::-1][:, :3]
    Q = vecs * np.sqrt(vals)
    return md * Q.T.reshape(18)


def kurtosis_from_gram(G):
    """The 15 distinct kurtosis tensor elements reproducing v^T G v.

    The mapping is obtained by matching quartic monomial coefficients of
    v^T G v against the multiplicity-weighted contraction; it satisfies

        quartic_rows(g) @ theta_W == v(g)^T G v(g)   for every unit g.
    """
    G = np.asarray(G, dtype=float)
    w = np.empty(15)
    w[0] = G[0, 0]
    w[1] = G[1, 1]
    w[2] = G[2, 2]
    w[3] = (G[3, 3] + 2 * G[0, 1]) / 6.0
    w[4] = (G[4, 4] + 2 * G[0, 2]) / 6.0
    w[5] = (G[5, 5] + 2 * G[1, 2]) / 6.0
    w[6] = (G[0, 5] + G[3, 4]) / 6.0
    w[7] = (G[1, 4] + G[3, 5]) / 6.0
    w[8] = (G[2, 3] + G[4, 5]) / 6.0
    w[9] = G[0, 3] / 2.0
    w[10] = G[0, 4] / 2.0
    w[11] = G[1, 3] / 2.0
    w[12] = G[1, 5] / 2.0
    w[13] = G[2, 4] / 2.0
    w[14] = G[2, 5] / 2.0
    return w


def gram_from_kurtosis(theta_w):
    """A symmetric Gram matrix whose quartic form matches theta_W.

    The quartic identity leaves six degrees of freedom.  The three free
    off-block entries (G16, G25, G34) are set to zero and each
    pair-square coefficient is split evenly between its two carriers
    (G12 = G44 = 2 W1122 and cyclic).  The result is not necessarily
    PSD; initialization clamps it afterwards.
    """
    w = np.asarray(theta_w, dtype=float)
    G = np.zeros((6, 6))
    G[0, 0], G[1, 1], G[2, 2] = w[0], w[1], w[2]
    G[0, 1] = G[1, 0] = 2 * w[3]
    G[3, 3] = 2 * w[3]
    G[0, 2] = G[2, 0] = 2 * w[4]
    G[4, 4] = 2 * w[4]
    G[1, 2] = G[2, 1] = 2 * w[5]
    G[5, 5] = 2 * w[5]
    G[3, 4] = G[4, 3] = 6 * w[6]
    G[3, 5] = G[5, 3] = 6 * w[7]
    G[4, 5] = G[5, 4] = 6 * w[8]
    G[0, 3] = G[3, 0] = 2 * w[9]
    G[0, 4] = G[4, 0] = 2 * w[10]
    G[1, 3] = G[3, 1] = 2 * w[11]
    G[1, 5] = G[5, 1] = 2 * w[12]
    G[2, 4] = G[4, 2] = 2 * w[13]
    G[2, 5] = G[5, 2] = 2 * w[14]
    return G


def _gram_to_kurtosis_map():
    A = np.zeros((15, 36))
    E = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            E[:] = 0.0
            E[i, j] = 1.0
            A[:, i * 6 + j] = kurtosis_from_gram(E)
    return A


_GRAM_MAP = _gram_to_kurtosis_map()
_GRAM_MAP3 = _GRAM_MAP.reshape(15, 6, 6)


def factor_kurtosis(theta_w, q0, max_iter: int = 60):
    """Rank-3 factor Q minimizing the quartic mismatch to theta_W.

    Levenberg-Marquardt on the residual quartic(Q Q^T) - theta_W from the
    starting factor ``q0`` (6 x 3).  When theta_W admits a PSD rank-3
    representation this converges to it (zero residual); otherwise it
    lands at a locally closest representable quartic.  Returns (Q, cost).
    """
    w = np.asarray(theta_w, dtype=float)
    Q = np.asarray(q0, dtype=float).reshape(6, 3).copy()
    lam = 1e-6
    r = _GRAM_MAP @ (Q @ Q.T).reshape(36) - w
    cost = float(r @ r)
    for _ in range(max_iter):
        if cost < 1e-28:
            break
        m1 = np.einsum("waj,jb->wab", _GRAM_MAP3, Q)
        m2 = np.einsum("wia,ib->wab", _GRAM_MAP3, Q)
        J = (m1 + m2).reshape(15, 18)
        H = J.T @ J + lam * np.eye(18)
        try:
            step = np.linalg.solve(H, J.T @ r)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        Q_new = Q - step.reshape(6, 3)
        r_new = _GRAM_MAP @ (Q_new @ Q_new.T).reshape(36) - w
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            Q, r, cost = Q_new, r_new, cost_new
            lam = max(lam * 0.3, 1e-12)
        else:
            lam *= 10.0
    return Q, cost


def kurtosis_to_tensor4(theta_w):
    """Expand theta_W into the full symmetric 3x3x3x3 tensor."""
    W = np.zeros((3, 3, 3, 3))
    for val, idx in zip(np.asarray(theta_w, dtype=float), _W_INDEX):
        for p in set(permutations(idx)):
            W[p] = val
    return W


def tensor4_to_kurtosis(W):
    """Collect the 15 distinct elements of a symmetric rank-4 tensor."""
    W = np.asarray(W, dtype=float)
    return np.array([W[idx] for idx in _W_INDEX])


@dataclass
class ModelParams:
    """Full voxel parameter set (L, theta_Q, S0, sigma^2).

    L and theta_Q live in whatever b-units the accompanying design was
    built with; S0 and sigma^2 are in signal units.
    """

    L: np.ndarray
    theta_q: np.ndarray
    s0: float
    sigma2: float

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float).reshape(6)
        self.theta_q = np.asarray(self.theta_q, dtype=float).reshape(18)
        if not self.s0 > 0:
            raise ValueError(f"S0 must be positive, got {self.s0}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma^2 must be positive, got {self.sigma2}")

    @property
    def theta_d(self):
        return theta_d_from_l(self.L)

    @property
    def md(self) -> float:
        return mean_diffusivity(self.theta_d)

    def gram(self):
        return gram_from_q(self.theta_q, self.md)

    @property
    def theta_w(self):
        return kurtosis_from_gram(self.gram())

    def copy(self) -> "ModelParams":
        return ModelParams(self.L.copy(), self.theta_q.copy(), self.s0, self.sigma2)


def predict_signal(params: ModelParams, design: DesignMatrices, cap: float = EXP_CAP):
    """Noise-free signal S_j = S0 exp(Z_Dj theta_D + theta_Q^T P_j theta_Q).

    Exponent arguments above ``cap`` are clamped and a RuntimeWarning is
    emitted; this only happens for parameters violating the
    monotone-decay constraint, where the model itself is unphysical.
    """
    theta_d = theta_d_from_l(params.L)
    expo = design.z_d @ theta_d + apply_p_batch(params.theta_q, design.v, design.b)
    n_clamped = int(np.sum(expo > cap))
    if n_clamped:
        import warnings

        warnings.warn(
            f"{n_clamped} signal exponent(s) exceeded the cap {cap:g}; clamped",
            RuntimeWarning,
            stacklevel=2,
        )
        expo = np.minimum(expo, cap)
    return params.s0 * np.exp(expo)


def apparent_coefficients(theta_d, theta_w, g):
    """Directional apparent diffusivity and kurtosis (D_app, K_app).

    D_app = g^T D g and K_app = (MD / D_app)^2 * W_app(g) with
    MD = tr(D)/3 and W_app the full rank-4 contraction along g.

    Raises
    ------
    ValueError
        If D_app <= 0 (K_app is undefined there).
    """
    g = np.asarray(g, dtype=float)
    D = d_matrix(theta_d)
    d_app = float(g @ D @ g)
    if d_app <= 0:
        raise ValueError(f"D_app must be positive for K_app, got {d_app}")
    md = mean_diffusivity(theta_d)
    w_app = float(quartic_rows(g[None, :])[0] @ np.asarray(theta_w, dtype=float))
    return d_app, (md / d_app) ** 2 * w_app
