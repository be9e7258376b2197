"""Full and pairwise-composite Gaussian log-likelihoods with block gradients.

Both objectives share one gradient mechanism: with W = -1/2 Sigma^-1
+ 1/2 (Sigma^-1 z)(Sigma^-1 z)^T, the derivative of the log-objective along
any covariance perturbation dSigma is sum(W * dSigma).  The blockwise
structure of the multivariate Matern covariance turns that elementwise sum
into small p x p accumulations, so one pass yields the full BlockGradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpotri

from .matern import (
    BlockOrdering,
    MaternParams,
    _corr_at,
    correlation_blocks,
    cross_range_matrix,
    cross_scale_matrix,
    matern_dalpha_scaled,
)
from .spatial_data import NeighborGraph, SpatialDataset, pairwise_distances

__all__ = [
    "ObjectiveKind",
    "BlockGradient",
    "FullObjective",
    "CompositeObjective",
    "full_loglik",
    "composite_loglik",
    "full_loglik_grad",
    "composite_loglik_grad",
    "penalized_objective",
    "penalty_value",
    "make_objective",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ObjectiveKind:
    """Which log-objective drives estimation: "full" or "composite" with v neighbors."""

    kind: str = "full"
    v: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("full", "composite"):
            raise ValueError("kind must be 'full' or 'composite'")
        if self.kind == "composite" and (self.v is None or self.v < 1):
            raise ValueError("composite objective requires a neighbor count v >= 1")


@dataclass
class BlockGradient:
    """Gradient of a log-objective by parameter block.

    d_l is in l-coordinates (off-diagonal entries of L; diagonal through
    L_ii = exp(l_ii)); d_rb only uses the strict upper triangle (i < j).
    """

    d_l: np.ndarray
    d_delta_b: float
    d_rb: np.ndarray

    def max_abs_offdiag_l(self):
        p = self.d_l.shape[0]
        mask = np.tril(np.ones((p, p), dtype=bool), -1)
        return float(np.abs(self.d_l[mask]).max()) if p > 1 else 0.0


def _dalpha_at(h, alpha_mat, nu):
    """d/d(alpha) of alpha^(-2 nu) M(h; alpha, nu), broadcast h against (p, p)."""
    h = np.asarray(h, dtype=float)
    a = alpha_mat
    if nu == 0.5:
        return np.exp(-a * h) * (-(1.0 / a**2) - h / a)
    from scipy.special import kv
    s = math.sqrt(2.0 * nu)
    c = a ** (-2.0 * nu)
    x = s * a * h
    base = _corr_at(h, a, nu)
    out = np.broadcast_arrays(-2.0 * nu * c / a * base, x)[0].copy()
    pos = x > 0
    if np.any(pos):
        pref = 2.0 ** (1.0 - nu) / math.gamma(nu)
        with np.errstate(over="ignore", invalid="ignore"):
            dM_dx = -pref * x[pos] ** nu * kv(nu - 1.0, x[pos])
        dM_dx = np.where(np.isfinite(dM_dx), dM_dx, 0.0)
        hh = np.broadcast_to(h, x.shape)[pos]
        cc = np.broadcast_to(c, x.shape)[pos]
        out[pos] += cc * dM_dx * s * hh
    return out


def _grad_from_psi_grad(U, params):
    """Chain a gradient w.r.t. Psi entries into l-coordinates."""
    G = (U + U.T) @ params.L
    G[np.diag_indices_from(G)] *= np.diag(params.L)
    return np.tril(G)


# ---------------------------------------------------------------------------
# full likelihood
# ---------------------------------------------------------------------------

class FullObjective:
    """Full Gaussian log-likelihood of the stacked observation vector.

    Caches the distance matrix and the most recent correlation blocks (which
    only change when alpha, delta_b or rb move, not during L updates).
    """

    kind = "full"

    def __init__(self, dataset: SpatialDataset,
                 ordering=BlockOrdering.BY_VARIABLE):
        self.dataset = dataset
        self.ordering = ordering
        self.n = dataset.n
        self.p = dataset.p
        self.z = dataset.stacked("by-variable")
        self.dist = pairwise_distances(dataset.locations)
        self._corr_key = None
        self._corr = None

    def _corr_blocks(self, params, alpha_mat):
        key = (params.nu, alpha_mat.tobytes())
        if key != self._corr_key:
            self._corr = correlation_blocks(params, self.dist, alpha_mat)
            self._corr_key = key
        return self._corr

    def _assemble(self, params):
        alpha_mat = cross_range_matrix(params)
        corr = self._corr_blocks(params, alpha_mat)
        S = cross_scale_matrix(params, alpha_mat)
        n, p = self.n, self.p
        sigma = (S[:, :, None, None] * corr).transpose(0, 2, 1, 3).reshape(n * p, n * p)
        sigma[np.diag_indices_from(sigma)] += np.repeat(params.tau2, n)
        return sigma, alpha_mat, corr

    def loglik(self, params):
        sigma, _, _ = self._assemble(params)
        chol = cho_factor(sigma, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        z1 = cho_solve(chol, self.z)
        return float(-0.5 * self.n * self.p * _LOG_2PI - 0.5 * logdet
                     - 0.5 * self.z @ z1)

    def loglik_grad(self, params):
        """Return (loglik, BlockGradient of the loglik)."""
        sigma, alpha_mat, corr = self._assemble(params)
        n, p = self.n, self.p
        chol = cho_factor(sigma, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        z1 = cho_solve(chol, self.z)
        ll = float(-0.5 * n * p * _LOG_2PI - 0.5 * logdet - 0.5 * self.z @ z1)
        # inverse from the factor (dpotri fills one triangle only)
        sinv, info = dpotri(chol[0], lower=True)
        if info != 0:
            raise np.linalg.LinAlgError("dpotri failed")
        sinv = np.tril(sinv) + np.tril(sinv, -1).T
        W = -0.5 * sinv + 0.5 * np.outer(z1, z1)
        W4 = W.reshape(p, n, p, n)
        nu = params.nu
        an = params.alpha**nu
        factor = (an[:, None] * an[None, :]) / alpha_mat ** (2.0 * nu)
        # accumulation of sum(W * block) per variable pair
        T = np.einsum("ikjl,ijkl->ij", W4, corr, optimize=True)
        U = factor * T
        d_l = _grad_from_psi_grad(U, params)
        psi = params.psi
        V = np.zeros((p, p))
        for i in range(p):
            for j in range(p):
                if i == j:
                    continue
                dblk = (psi[i, j] * an[i] * an[j]
                        * matern_dalpha_scaled(self.dist, alpha_mat[i, j], nu))
                V[i, j] = np.sum(W4[i, :, j, :] * dblk)
        chain_delta = (1.0 - params.rb) / (2.0 * alpha_mat)
        np.fill_diagonal(chain_delta, 0.0)
        d_delta_b = float(np.sum(V * chain_delta))
        d_rb = np.zeros((p, p))
        if params.delta_b != 0.0:
            for i in range(p):
                for j in range(i + 1, p):
                    d_rb[i, j] = ((V[i, j] + V[j, i])
                                  * (-params.delta_b / (2.0 * alpha_mat[i, j])))
        return ll, BlockGradient(d_l=d_l, d_delta_b=d_delta_b, d_rb=d_rb)


# ---------------------------------------------------------------------------
# composite likelihood
# ---------------------------------------------------------------------------

class CompositeObjective:
    """Pairwise composite log-likelihood over nearest-neighbor pairs.

    Each unordered pair contributes the log-density of the 2p-vector
    (Z(s_k), Z(s_l)); pairs entering through both endpoints' neighbor lists
    are counted once.  All pair terms are evaluated in batch.
    """

    kind = "composite"

    def __init__(self, dataset: SpatialDataset, graph: NeighborGraph,
                 chunk=4096):
        self.dataset = dataset
        self.graph = graph
        self.p = dataset.p
        pairs = graph.pair_set()
        self.pairs = np.asarray(pairs, dtype=int)
        locs = dataset.locations
        self.h = np.linalg.norm(locs[self.pairs[:, 0]] - locs[self.pairs[:, 1]],
                                axis=1)
        if np.any(self.h == 0):
            raise ValueError("coincident locations in the pair set")
        # pair observation vectors (P, 2p)
        self.zpairs = np.concatenate(
            [dataset.values[self.pairs[:, 0]], dataset.values[self.pairs[:, 1]]],
            axis=1)
        self.chunk = chunk

    @property
    def n_pairs(self):
        return self.pairs.shape[0]

    def _pair_blocks(self, params, h):
        """C0 (p,p) and the stack of Ch blocks (m, p, p) for distances h."""
        alpha_mat = cross_range_matrix(params)
        S = cross_scale_matrix(params, alpha_mat)
        C0 = S + np.diag(params.tau2)
        corr = _corr_at(h[:, None, None], alpha_mat[None, :, :], params.nu)
        Ch = S[None, :, :] * corr
        return C0, Ch, corr, alpha_mat, S

    @staticmethod
    def _stack_q(C0, Ch):
        m, p, _ = Ch.shape
        Q = np.empty((m, 2 * p, 2 * p))
        Q[:, :p, :p] = C0
        Q[:, p:, p:] = C0
        Q[:, :p, p:] = Ch
        Q[:, p:, :p] = np.swapaxes(Ch, 1, 2)
        return Q

    def loglik(self, params):
        total = 0.0
        p = self.p
        for lo in range(0, self.n_pairs, self.chunk):
            sl = slice(lo, lo + self.chunk)
            h = self.h[sl]
            z = self.zpairs[sl]
            C0, Ch, _, _, _ = self._pair_blocks(params, h)
            Q = self._stack_q(C0, Ch)
            chol = np.linalg.cholesky(Q)  # raises LinAlgError if indefinite
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)),
                                  axis=1)
            sol = np.linalg.solve(Q, z[:, :, None])[:, :, 0]
            quad = np.einsum("ij,ij->i", z, sol)
            total += float(np.sum(-p * _LOG_2PI - 0.5 * logdet - 0.5 * quad))
        return total

    def loglik_grad(self, params):
        """Return (composite loglik, BlockGradient of it)."""
        p = self.p
        nu = params.nu
        an = params.alpha**nu
        psi = params.psi
        total = 0.0
        A = np.zeros((p, p))      # sum over pairs of W00 + W11
        B = np.zeros((p, p))      # sum of (W01 + W10) weighted by corr
        V = np.zeros((p, p))      # alpha_ij sensitivity accumulator
        alpha_mat = cross_range_matrix(params)
        dF0 = psi * (an[:, None] * an[None, :]) * _dalpha_at(
            np.zeros(()), alpha_mat, nu)
        np.fill_diagonal(dF0, 0.0)
        for lo in range(0, self.n_pairs, self.chunk):
            sl = slice(lo, lo + self.chunk)
            h = self.h[sl]
            z = self.zpairs[sl]
            C0, Ch, corr, _, _ = self._pair_blocks(params, h)
            Q = self._stack_q(C0, Ch)
            chol = np.linalg.cholesky(Q)
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)),
                                  axis=1)
            qinv = np.linalg.inv(Q)
            sol = np.einsum("mij,mj->mi", qinv, z)
            quad = np.einsum("ij,ij->i", z, sol)
            total += float(np.sum(-p * _LOG_2PI - 0.5 * logdet - 0.5 * quad))
            W = -0.5 * qinv + 0.5 * np.einsum("mi,mj->mij", sol, sol)
            Wd = W[:, :p, :p] + W[:, p:, p:]
            Wo = W[:, :p, p:] + np.swapaxes(W[:, p:, :p], 1, 2)
            A += Wd.sum(axis=0)
            B += np.einsum("mij,mij->ij", Wo, corr)
            dFh = (psi * (an[:, None] * an[None, :]))[None, :, :] * _dalpha_at(
                h[:, None, None], alpha_mat[None, :, :], nu)
            dFh[:, np.arange(p), np.arange(p)] = 0.0
            V += np.einsum("mij,mij->ij", Wd, np.broadcast_to(
                dF0, (h.size, p, p))) + np.einsum("mij,mij->ij", Wo, dFh)
        factor = (an[:, None] * an[None, :]) / alpha_mat ** (2.0 * nu)
        U = factor * (A + B)
        d_l = _grad_from_psi_grad(U, params)
        chain_delta = (1.0 - params.rb) / (2.0 * alpha_mat)
        np.fill_diagonal(chain_delta, 0.0)
        d_delta_b = float(np.sum(V * chain_delta))
        d_rb = np.zeros((p, p))
        if params.delta_b != 0.0:
            for i in range(p):
                for j in range(i + 1, p):
                    d_rb[i, j] = ((V[i, j] + V[j, i])
                                  * (-params.delta_b / (2.0 * alpha_mat[i, j])))
        return total, BlockGradient(d_l=d_l, d_delta_b=d_delta_b, d_rb=d_rb)


# ---------------------------------------------------------------------------
# module-level wrappers and the penalized objective
# ---------------------------------------------------------------------------

def make_objective(dataset, kind, graph=None,
                   ordering=BlockOrdering.BY_VARIABLE):
    if isinstance(kind, str):
        kind = ObjectiveKind(kind=kind, v=graph.v if graph is not None else None)
    if kind.kind == "full":
        return FullObjective(dataset, ordering=ordering)
    if graph is None:
        from .spatial_data import nearest_neighbors
        graph = nearest_neighbors(dataset.locations, kind.v)
    if graph.v != kind.v:
        raise ValueError("neighbor graph v does not match objective kind")
    return CompositeObjective(dataset, graph)


def full_loglik(params, dataset, ordering=BlockOrdering.BY_VARIABLE):
    return FullObjective(dataset, ordering=ordering).loglik(params)


def full_loglik_grad(params, dataset, ordering=BlockOrdering.BY_VARIABLE):
    return FullObjective(dataset, ordering=ordering).loglik_grad(params)[1]


def composite_loglik(params, dataset, graph):
    return CompositeObjective(dataset, graph).loglik(params)


def composite_loglik_grad(params, dataset, graph):
    return CompositeObjective(dataset, graph).loglik_grad(params)[1]


def penalty_value(params, lam):
    """LASSO penalty lam * sum_{i > j} |L_ij| (diagonal unpenalized)."""
    p = params.p
    mask = np.tril(np.ones((p, p), dtype=bool), -1)
    return float(lam * np.abs(params.L[mask]).sum())


def penalized_objective(params, lam, kind, dataset, graph=None,
                        ordering=BlockOrdering.BY_VARIABLE):
    """Minimization objective: negative log-objective plus the LASSO penalty."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    obj = make_objective(dataset, kind, graph=graph, ordering=ordering)
    return -obj.loglik(params) + penalty_value(params, lam)
