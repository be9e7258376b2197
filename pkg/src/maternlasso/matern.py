"""Parsimonious multivariate Matern covariance model (common smoothness).

The model couples p co-located Gaussian fields through a cross-scale matrix
Psi = L L^T (L lower triangular), cross-ranges

    alpha_ij^2 = (alpha_ii^2 + alpha_jj^2) / 2 + delta_b * (1 - rb_ij),

and cross-scales

    sigma_ij = Psi_ij * alpha_ii^nu * alpha_jj^nu / alpha_ij^(2 nu),

which together give the blockwise covariance

    C_ij(h) = sigma_ij * matern_correlation(h, alpha_ij, nu) + tau_i^2 * 1{h=0, i=j}.

All derivatives needed by the penalized block coordinate descent are provided
analytically here.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, kv

__all__ = [
    "BlockOrdering",
    "MaternParams",
    "bessel_k",
    "matern_correlation",
    "cross_range",
    "cross_sigma",
    "cross_covariance",
    "cross_range_matrix",
    "cross_scale_matrix",
    "assemble_full_covariance",
    "assemble_pair_covariance",
    "d_sigma_d_L",
    "d_sigma_d_DeltaB",
    "d_sigma_d_RB",
    "interleaving_permutation",
]

_PSD_TOL = 1e-8


class BlockOrdering(enum.Enum):
    """Ordering of the stacked np-vector of observations.

    BY_VARIABLE: index = i * n + k (all locations of variable 1, then 2, ...).
    BY_LOCATION: index = k * p + i (all variables at location 1, then 2, ...).
    """

    BY_VARIABLE = "by-variable"
    BY_LOCATION = "by-location"


def interleaving_permutation(n, p):
    """Permutation array P such that x_by_location = x_by_variable[P]."""
    idx = np.arange(n * p).reshape(p, n)  # [i, k] -> by-variable index
    return idx.T.reshape(-1)  # position k*p+i holds i*n+k


@dataclass
class MaternParams:
    """Complete parameter vector of the parsimonious multivariate Matern model.

    Attributes
    ----------
    sigma2 : (p,) marginal variances, > 0.
    alpha : (p,) marginal inverse ranges, > 0.
    tau2 : (p,) nugget variances, >= 0.
    nu : smoothness, shared by all components, > 0.
    L : (p, p) lower-triangular cross-scale factor with positive diagonal and
        (L L^T)_ii = sigma2_i.
    delta_b : scalar >= 0, maximum squared cross-range deviation.
    rb : (p, p) symmetric matrix, unit diagonal, entries in [0, 1], PSD
        within tolerance.
    """

    sigma2: np.ndarray
    alpha: np.ndarray
    tau2: np.ndarray
    nu: float
    L: np.ndarray
    delta_b: float = 0.0
    rb: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.tau2 = np.atleast_1d(np.asarray(self.tau2, dtype=float))
        self.L = np.asarray(self.L, dtype=float)
        if self.rb is None:
            self.rb = np.eye(self.p)
        self.rb = np.asarray(self.rb, dtype=float)

    @property
    def p(self):
        return self.sigma2.shape[0]

    @property
    def psi(self):
        """Cross-scale matrix Psi = L L^T (PSD by construction)."""
        return self.L @ self.L.T

    @classmethod
    def from_psi(cls, psi, alpha, tau2, nu, delta_b=0.0, rb=None):
        """Build params from a cross-scale matrix Psi via its Cholesky factor."""
        psi = np.asarray(psi, dtype=float)
        L = np.linalg.cholesky(psi)
        return cls(sigma2=np.diag(psi).copy(), alpha=alpha, tau2=tau2, nu=nu,
                   L=L, delta_b=delta_b, rb=rb)

    def validate(self, tol=1e-10):
        """Raise ValueError naming the first violated constraint."""
        p = self.p
        if self.alpha.shape != (p,) or self.tau2.shape != (p,):
            raise ValueError("sigma2, alpha, tau2 must have equal length")
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 entries must be positive")
        if np.any(self.alpha <= 0):
            raise ValueError("alpha entries must be positive")
        if np.any(self.tau2 < 0):
            raise ValueError("tau2 entries must be nonnegative")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if self.L.shape != (p, p):
            raise ValueError("L must be p x p")
        if np.any(np.triu(self.L, 1) != 0):
            raise ValueError("L must be lower triangular")
        if np.any(np.diag(self.L) <= 0):
            raise ValueError("L diagonal entries must be positive")
        diag = np.einsum("ij,ij->i", self.L, self.L)
        if np.any(np.abs(diag - self.sigma2) > tol * np.maximum(self.sigma2, 1.0)):
            raise ValueError("(L L^T)_ii must equal sigma2_i")
        if self.delta_b < 0:
            raise ValueError("delta_b must be nonnegative")
        if self.rb.shape != (p, p):
            raise ValueError("rb must be p x p")
        if not np.allclose(self.rb, self.rb.T, atol=1e-12):
            raise ValueError("rb must be symmetric")
        if not np.allclose(np.diag(self.rb), 1.0, atol=1e-10):
            raise ValueError("rb must have unit diagonal")
        off = self.rb[~np.eye(p, dtype=bool)]
        if off.size and (off.min() < -1e-12 or off.max() > 1 + 1e-12):
            raise ValueError("rb off-diagonal entries must lie in [0, 1]")
        w = np.linalg.eigvalsh(self.rb)
        if w.min() < -_PSD_TOL:
            raise ValueError("rb must be positive semidefinite within tolerance")
        return self

    def copy(self):
        return MaternParams(self.sigma2.copy(), self.alpha.copy(),
                            self.tau2.copy(), self.nu, self.L.copy(),
                            self.delta_b, self.rb.copy())

    # -- serialization (exact round trip) ------------------------------------

    def to_dict(self):
        p = self.p
        tril = self.L[np.tril_indices(p)]
        return {
            "p": p,
            "nu": self.nu,
            "sigma2": self.sigma2.tolist(),
            "alpha": self.alpha.tolist(),
            "tau2": self.tau2.tolist(),
            "L_lower": tril.tolist(),
            "delta_b": self.delta_b,
            "rb": self.rb.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        p = int(doc["p"])
        L = np.zeros((p, p))
        L[np.tril_indices(p)] = np.asarray(doc["L_lower"], dtype=float)
        return cls(
            sigma2=np.asarray(doc["sigma2"], dtype=float),
            alpha=np.asarray(doc["alpha"], dtype=float),
            tau2=np.asarray(doc["tau2"], dtype=float),
            nu=float(doc["nu"]),
            L=L,
            delta_b=float(doc["delta_b"]),
            rb=np.asarray(doc["rb"], dtype=float).reshape(p, p),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------

def bessel_k(nu, x):
    """Modified Bessel function of the second kind K_nu(x), x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("bessel_k requires x > 0")
    return kv(nu, x)


def matern_correlation(h, alpha, nu):
    """Matern correlation (2^(1-nu)/Gamma(nu)) (sqrt(2 nu) a h)^nu K_nu(sqrt(2 nu) a h).

    Exactly 1 at h = 0; underflows cleanly to 0 for large alpha*h.  Half-integer
    nu in {0.5, 1.5, 2.5} use the closed forms.
    """
    h = np.asarray(h, dtype=float)
    x = math.sqrt(2.0 * nu) * alpha * h
    if nu == 0.5:
        return np.exp(-x)
    if nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if nu == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        # log-space to dodge overflow of x^nu against underflow of K_nu
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            logval = ((1.0 - nu) * math.log(2.0) - gammaln(nu)
                      + nu * np.log(xp) + np.log(kv(nu, xp)))
        val = np.exp(logval)
        val[~np.isfinite(val)] = 0.0
        out[pos] = val
    return out if out.ndim else float(out)


def matern_dalpha_scaled(h, alpha, nu):
    """d/d(alpha) of alpha^(-2 nu) * matern_correlation(h, alpha, nu).

    This scaled form is the alpha_ij-dependent factor of each covariance block,
    sigma_ij = Psi_ij alpha_ii^nu alpha_jj^nu * [alpha_ij^(-2 nu) M(h; alpha_ij)].
    """
    h = np.asarray(h, dtype=float)
    a = float(alpha)
    if nu == 0.5:
        # alpha^-1 exp(-alpha h)
        return np.exp(-a * h) * (-(1.0 / a**2) - h / a)
    c = a ** (-2.0 * nu)
    base = matern_correlation(h, a, nu)
    out = np.full_like(h, -2.0 * nu * c / a)  # exact h = 0 branch
    pos = h > 0
    if np.any(pos):
        s = math.sqrt(2.0 * nu)
        x = s * a * h[pos]
        pref = 2.0 ** (1.0 - nu) / math.gamma(nu)
        # d/dx [x^nu K_nu(x)] = -x^nu K_{nu-1}(x)
        with np.errstate(over="ignore", invalid="ignore"):
            dM_dx = -pref * x**nu * kv(nu - 1.0, x)
        dM_dx = np.where(np.isfinite(dM_dx), dM_dx, 0.0)
        out[pos] = (-2.0 * nu * c / a * base[pos]
                    + c * dM_dx * s * h[pos])
    return out


# ---------------------------------------------------------------------------
# cross-parameter maps
# ---------------------------------------------------------------------------

def cross_range(params, i, j):
    """Cross inverse-range alpha_ij of the validity parameterization."""
    if i == j:
        return float(params.alpha[i])
    a2 = 0.5 * (params.alpha[i] ** 2 + params.alpha[j] ** 2)
    return float(np.sqrt(a2 + params.delta_b * (1.0 - params.rb[i, j])))


def cross_range_matrix(params):
    """Matrix of alpha_ij values (diagonal equals the marginal alphas)."""
    a2 = params.alpha**2
    mat = 0.5 * (a2[:, None] + a2[None, :]) + params.delta_b * (1.0 - params.rb)
    np.fill_diagonal(mat, a2)
    return np.sqrt(mat)


def cross_sigma(params, i, j):
    """Cross-scale sigma_ij implied by Psi and the plug-in validity factors."""
    psi_ij = params.psi[i, j]
    if i == j:
        return float(psi_ij)
    aij = cross_range(params, i, j)
    nu = params.nu
    return float(psi_ij * params.alpha[i] ** nu * params.alpha[j] ** nu
                 / aij ** (2.0 * nu))


def cross_scale_matrix(params, alpha_mat=None):
    """Matrix S with S_ij = sigma_ij (diagonal equals sigma2)."""
    if alpha_mat is None:
        alpha_mat = cross_range_matrix(params)
    nu = params.nu
    an = params.alpha**nu
    return params.psi * (an[:, None] * an[None, :]) / alpha_mat ** (2.0 * nu)


def cross_covariance(h, params, i, j):
    """Covariance between variable i at s and variable j at s + h, |h| given."""
    s_ij = cross_sigma(params, i, j)
    val = s_ij * matern_correlation(np.asarray(h, dtype=float), cross_range(params, i, j), params.nu)
    if i == j:
        val = val + params.tau2[i] * (np.asarray(h) == 0)
    return float(val) if np.ndim(h) == 0 else val


# ---------------------------------------------------------------------------
# matrix assembly
# ---------------------------------------------------------------------------

def _pairwise_dist(locations):
    locations = np.asarray(locations, dtype=float)
    diff = locations[:, None, :] - locations[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def correlation_blocks(params, dist, alpha_mat=None):
    """(p, p, n, n) array of Matern correlation blocks at the given distances."""
    p = params.p
    n = dist.shape[0]
    if alpha_mat is None:
        alpha_mat = cross_range_matrix(params)
    out = np.empty((p, p, n, n))
    for i in range(p):
        for j in range(i, p):
            blk = matern_correlation(dist, alpha_mat[i, j], params.nu)
            out[i, j] = blk
            if i != j:
                out[j, i] = blk
    return out

def assemble_full_covariance(params, locations, ordering=BlockOrdering.BY_VARIABLE,
                             dist=None, corr=None):
    """Assemble the full np x np covariance matrix of the stacked observations.

    `dist` (n x n distances) and `corr` (output of :func:`correlation_blocks`)
    may be passed to reuse cached geometry.
    """
    params.validate()
    if dist is None:
        dist = _pairwise_dist(locations)
    n = dist.shape[0]
    p = params.p
    alpha_mat = cross_range_matrix(params)
    if corr is None:
        corr = correlation_blocks(params, dist, alpha_mat)
    S = cross_scale_matrix(params, alpha_mat)
    sigma = (S[:, :, None, None] * corr).transpose(0, 2, 1, 3).reshape(n * p, n * p)
    # nugget on the diagonal of each (i, i) block
    diag = np.repeat(params.tau2, n)
    sigma[np.diag_indices_from(sigma)] += diag
    if ordering is BlockOrdering.BY_LOCATION or ordering == BlockOrdering.BY_LOCATION.value:
        P = interleaving_permutation(n, p)
        sigma = sigma[np.ix_(P, P)]
    return sigma


def assemble_pair_covariance(params, s_k, s_l):
    """2p x 2p covariance of (Z(s_k), Z(s_l)), the pair-likelihood building block."""
    s_k = np.asarray(s_k, dtype=float)
    s_l = np.asarray(s_l, dtype=float)
    h = float(np.linalg.norm(s_k - s_l))
    if h == 0.0:
        raise ValueError("pair covariance requires distinct locations")
    alpha_mat = cross_range_matrix(params)
    S = cross_scale_matrix(params, alpha_mat)
    C0 = S + np.diag(params.tau2)
    Ch = S * _corr_at(h, alpha_mat, params.nu)
    return np.block([[C0, Ch], [Ch.T, C0]])


def _corr_at(h, alpha_mat, nu):
    """Matern correlation for scalar or (...,)-shaped h against (p, p) alphas."""
    h = np.asarray(h, dtype=float)
    x = math.sqrt(2.0 * nu) * alpha_mat * h
    if nu == 0.5:
        return np.exp(-x)
    if nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if nu == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            logval = ((1.0 - nu) * math.log(2.0) - gammaln(nu)
                      + nu * np.log(xp) + np.log(kv(nu, xp)))
        val = np.exp(logval)
        val[~np.isfinite(val)] = 0.0
        out[pos] = val
    return out


# ---------------------------------------------------------------------------
# derivatives of Sigma
# ---------------------------------------------------------------------------

def _dpsi_dl(params, i, j):
    """d(Psi)/d(l_ij): E L^T + L E^T, diagonal chained through L_ii = exp(l_ii)."""
    p = params.p
    E = np.zeros((p, p))
    E[i, j] = params.L[i, i] if i == j else 1.0
    M = E @ params.L.T
    return M + M.T


def _expand_blocks(block_mat, corr, n, p):
    """(p, p) scale per block times (p, p, n, n) blocks -> np x np (by variable)."""
    return (block_mat[:, :, None, None] * corr).transpose(0, 2, 1, 3).reshape(n * p, n * p)


def _maybe_permute(mat, ordering, n, p):
    if ordering is BlockOrdering.BY_LOCATION or ordering == BlockOrdering.BY_LOCATION.value:
        P = interleaving_permutation(n, p)
        return mat[np.ix_(P, P)]
    return mat


def d_sigma_d_L(params, locations, i, j, ordering=BlockOrdering.BY_VARIABLE,
                dist=None, corr=None):
    """d(Sigma)/d(l_ij) in l-coordinates (diagonal through exp), j <= i."""
    if j > i:
        raise ValueError("l indices must lie in the lower triangle (j <= i)")
    if dist is None:
        dist = _pairwise_dist(locations)
    n = dist.shape[0]
    p = params.p
    alpha_mat = cross_range_matrix(params)
    if corr is None:
        corr = correlation_blocks(params, dist, alpha_mat)
    nu = params.nu
    an = params.alpha**nu
    factor = (an[:, None] * an[None, :]) / alpha_mat ** (2.0 * nu)
    dS = _dpsi_dl(params, i, j) * factor
    return _maybe_permute(_expand_blocks(dS, corr, n, p), ordering, n, p)


def _dalpha_blocks(params, dist, alpha_mat):
    """(p, p, n, n) blocks of Psi_ij a_i^nu a_j^nu d/d(alpha_ij)[...], zero diagonal."""
    p = params.p
    n = dist.shape[0]
    nu = params.nu
    an = params.alpha**nu
    psi = params.psi
    out = np.zeros((p, p, n, n))
    for i in range(p):
        for j in range(i + 1, p):
            blk = psi[i, j] * an[i] * an[j] * matern_dalpha_scaled(
                dist, alpha_mat[i, j], nu)
            out[i, j] = blk
            out[j, i] = blk
    return out


def d_sigma_d_DeltaB(params, locations, ordering=BlockOrdering.BY_VARIABLE,
                     dist=None):
    """d(Sigma)/d(delta_b) via the chain rule through every alpha_ij, i != j."""
    if dist is None:
        dist = _pairwise_dist(locations)
    n = dist.shape[0]
    p = params.p
    alpha_mat = cross_range_matrix(params)
    dalpha = _dalpha_blocks(params, dist, alpha_mat)
    chain = (1.0 - params.rb) / (2.0 * alpha_mat)
    np.fill_diagonal(chain, 0.0)
    return _maybe_permute(_expand_blocks(chain, dalpha, n, p), ordering, n, p)


def d_sigma_d_RB(params, locations, i, j, ordering=BlockOrdering.BY_VARIABLE,
                 dist=None):
    """d(Sigma)/d(rb_ij), i < j; zero when delta_b = 0."""
    if not i < j:
        raise ValueError("rb indices must satisfy i < j")
    if dist is None:
        dist = _pairwise_dist(locations)
    n = dist.shape[0]
    p = params.p
    alpha_mat = cross_range_matrix(params)
    out = np.zeros((p * n, p * n))
    if params.delta_b == 0.0:
        return out
    nu = params.nu
    an = params.alpha**nu
    blk = (params.psi[i, j] * an[i] * an[j]
           * matern_dalpha_scaled(dist, alpha_mat[i, j], nu)
           * (-params.delta_b / (2.0 * alpha_mat[i, j])))
    out[i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
    out[j * n:(j + 1) * n, i * n:(i + 1) * n] = blk.T
    return _maybe_permute(out, ordering, n, p)
