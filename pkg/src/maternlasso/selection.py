"""Penalty-level selection: lambda grids, warm-started paths, AIC and CLIC.

The CLIC machinery estimates the sensitivity matrix H by a subsampled sum of
pair-level trace terms and the variability matrix J by the subsampling scheme
of replicated score sums over location subsets.  Both are computed on the
free-parameter subspace of the fitted sparsity pattern.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .matern import MaternParams, cross_range_matrix, _corr_at
from .objectives import (
    CompositeObjective,
    FullObjective,
    ObjectiveKind,
    _dalpha_at,
    make_objective,
)
from .optimizer import FitConfig, FitResult, fit, fit_marginals
from .spatial_data import nearest_neighbors

__all__ = [
    "LambdaGrid",
    "PathResult",
    "ClicConfig",
    "lambda_max",
    "lambda_grid",
    "solution_path",
    "aic",
    "estimate_H",
    "estimate_J_subsample",
    "estimate_J_model",
    "clic",
    "select_lambda",
    "free_parameter_map",
]

_LAMBDA_MIN_RATIO = 1e-8


@dataclass
class LambdaGrid:
    """Log-equispaced descending penalty grid from lam_max to 1e-8 lam_max."""

    values: np.ndarray
    lam_max: float
    lam_min: float
    count: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.count < 2 or self.values.size != self.count:
            raise ValueError("grid needs count >= 2 values")
        if np.any(np.diff(self.values) >= 0):
            raise ValueError("grid must be strictly decreasing")


@dataclass
class ClicConfig:
    """Budgets and method switches of the CLIC variance/sensitivity estimators.

    j_method "subsample" estimates J from replicated score sums over spatial
    windows of the observed data; "model" redraws n_draws fields from the
    fitted covariance and takes the empirical covariance of the total score
    (parametric bootstrap), which is slower but does not rely on the window
    size exceeding the correlation range.
    """

    m_sub: int = 120
    pairs_per_subsample: int = 50
    h_budget: int = 500
    seed: int = 0
    trace_sign: float = 1.0  # -CL + tr(J H^-1); set -1.0 for -CL - tr(J H^-1)
    j_method: str = "subsample"
    n_draws: int = 40

    def __post_init__(self):
        if min(self.m_sub, self.pairs_per_subsample, self.h_budget) < 1:
            raise ValueError("all subsampling budgets must be positive")
        if self.trace_sign not in (-1.0, 1.0):
            raise ValueError("trace_sign must be -1.0 or +1.0")
        if self.j_method not in ("subsample", "model"):
            raise ValueError("j_method must be 'subsample' or 'model'")
        if self.n_draws < 2:
            raise ValueError("n_draws must be at least 2")


@dataclass
class PathResult:
    """Warm-started solution path over a descending lambda grid."""

    lams: np.ndarray
    fits: list  # FitResult or None where the fit failed
    criteria: np.ndarray  # NaN for failed/unavailable entries
    sparsity_L: np.ndarray  # fraction of zero off-diagonal L entries
    sparsity_Psi: np.ndarray
    selected: Optional[int] = None
    criterion_name: str = ""

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "objective", "criterion",
                             "pct_zeros_L", "pct_zeros_Psi", "converged"])
            for k, lam in enumerate(self.lams):
                f = self.fits[k]
                writer.writerow([
                    repr(float(lam)),
                    repr(float(f.objective_trace[-1])) if f else "",
                    repr(float(self.criteria[k]))
                    if np.isfinite(self.criteria[k]) else "",
                    repr(100.0 * float(self.sparsity_L[k])),
                    repr(100.0 * float(self.sparsity_Psi[k])),
                    int(f.converged) if f else "",
                ])


# ---------------------------------------------------------------------------
# grid construction
# ---------------------------------------------------------------------------

def default_grid_count(p):
    return max(p * p - p, 20)


def lambda_max(dataset, kind: ObjectiveKind, graph=None, init_params=None,
               objective=None, nu=0.5, estimate_nugget=True):
    """Smallest penalty at which the L update keeps every off-diagonal at zero.

    Evaluated as the largest off-diagonal gradient magnitude (in l-coordinates)
    of the negative log-objective at the diagonal-L marginal initialization.
    """
    if objective is None:
        objective = make_objective(dataset, kind, graph=graph)
    if init_params is None:
        sigma2, alpha, tau2 = fit_marginals(dataset, kind, graph=graph, nu=nu,
                                            estimate_nugget=estimate_nugget)
        init_params = MaternParams(sigma2=sigma2, alpha=alpha, tau2=tau2,
                                   nu=nu, L=np.diag(np.sqrt(sigma2)))
    _, grad = objective.loglik_grad(init_params)
    return grad.max_abs_offdiag_l()


def lambda_grid(lam_max, count=None, p=None):
    """LambdaGrid with grid[i] = lam_max * (1e-8)^(i / (count - 1))."""
    if lam_max <= 0:
        raise ValueError("lam_max must be positive")
    if count is None:
        if p is None:
            raise ValueError("either count or p is required")
        count = default_grid_count(p)
    if count < 2:
        raise ValueError("count must be >= 2")
    expo = np.arange(count) / (count - 1)
    values = lam_max * _LAMBDA_MIN_RATIO**expo
    return LambdaGrid(values=values, lam_max=float(lam_max),
                      lam_min=float(values[-1]), count=int(count))


# ---------------------------------------------------------------------------
# sparsity bookkeeping
# ---------------------------------------------------------------------------

def _offdiag_mask(p):
    return ~np.eye(p, dtype=bool)


def psi_support(L):
    """Boolean Psi nonzero pattern from the support closure of L's rows."""
    S = np.abs(L) > 0
    return S @ S.T


def _sparsity(L):
    p = L.shape[0]
    if p == 1:
        return 0.0, 0.0
    low = np.tril(np.ones((p, p), dtype=bool), -1)
    sp_l = float(np.mean(L[low] == 0.0))
    sp_psi = float(np.mean(~psi_support(L)[_offdiag_mask(p)]))
    return sp_l, sp_psi


# ---------------------------------------------------------------------------
# warm-started path
# ---------------------------------------------------------------------------

def solution_path(dataset, grid=None, config=None, graph=None,
                  compute_criterion=True, clic_config=None, objective=None):
    """Fit the model at every grid value, warm-starting each fit at the last.

    The criterion is AIC under the full likelihood and CLIC under the
    composite likelihood.  Fit failures are recorded (entry None, criterion
    NaN) and the path continues from the last successful fit.
    """
    config = config or FitConfig()
    if objective is None:
        objective = make_objective(dataset, config.kind, graph=graph)
    if config.kind.kind == "composite" and graph is None:
        graph = objective.graph
    sigma2, alpha, tau2 = fit_marginals(
        dataset, config.kind, graph=graph, nu=config.nu,
        estimate_nugget=config.estimate_nugget)
    init = MaternParams(sigma2=sigma2, alpha=alpha, tau2=tau2, nu=config.nu,
                        L=np.diag(np.sqrt(sigma2)))
    if grid is None:
        lmx = lambda_max(dataset, config.kind, graph=graph, init_params=init,
                         objective=objective)
        grid = lambda_grid(lmx, p=dataset.p)
    lams = grid.values
    fits = []
    criteria = np.full(lams.size, np.nan)
    sp_l = np.full(lams.size, np.nan)
    sp_psi = np.full(lams.size, np.nan)
    warm = init
    for k, lam in enumerate(lams):
        try:
            res = fit(dataset, lam=float(lam), config=config, warm_start=warm,
                      graph=graph, objective=objective)
        except (RuntimeError, np.linalg.LinAlgError):
            fits.append(None)
            continue
        fits.append(res)
        warm = res.params
        sp_l[k], sp_psi[k] = _sparsity(res.params.L)
        if compute_criterion:
            try:
                if config.kind.kind == "full":
                    criteria[k] = aic(res, dataset, objective=objective)
                else:
                    criteria[k] = clic(res, dataset, graph,
                                       clic_config or ClicConfig(),
                                       objective=objective)
            except (RuntimeError, np.linalg.LinAlgError):
                criteria[k] = np.nan
    path = PathResult(lams=lams, fits=fits, criteria=criteria,
                      sparsity_L=sp_l, sparsity_Psi=sp_psi,
                      criterion_name=("aic" if config.kind.kind == "full"
                                      else "clic"))
    if compute_criterion and np.any(np.isfinite(criteria)):
        path.selected = select_lambda(path)
    return path


def select_lambda(path: PathResult, criteria=None):
    """Index of the minimum criterion; ties resolve toward larger lambda."""
    vals = path.criteria if criteria is None else np.asarray(criteria, float)
    ok = np.isfinite(vals)
    if not np.any(ok):
        raise ValueError("no path entry has a finite criterion value")
    masked = np.where(ok, vals, np.inf)
    return int(np.argmin(masked))  # first minimum = largest lambda


# ---------------------------------------------------------------------------
# AIC
# ---------------------------------------------------------------------------

def aic(fit_result: FitResult, dataset, objective=None):
    """AIC = -2 loglik + 4 k, k the number of ordered nonzero off-diagonal
    Psi entries (each unordered pair counts twice; the diagonal is excluded)."""
    if objective is None:
        objective = FullObjective(dataset)
    if getattr(objective, "kind", "full") != "full":
        raise ValueError("aic requires the full likelihood")
    params = fit_result.params
    ll = objective.loglik(params)
    k = int(np.sum(psi_support(params.L)[_offdiag_mask(params.p)]))
    return float(-2.0 * ll + 4.0 * k)


# ---------------------------------------------------------------------------
# free parameters and pair-level derivatives
# ---------------------------------------------------------------------------

def free_parameter_map(params: MaternParams):
    """Ordered free parameters at the current pattern.

    Nonzero strict lower-triangle entries of L in row-major order, then
    delta_b, then the strict upper triangle of rb.  delta_b and rb move the
    covariance only through the cross ranges, so they count only where some
    off-diagonal Psi entry is nonzero (delta_b) resp. that entry itself is
    (rb, additionally requiring delta_b > 0): otherwise the derivative
    vanishes identically and would contribute exact zero rows to H and J.
    """
    entries = []
    p = params.p
    support = psi_support(params.L)
    off_support = bool(np.any(support[_offdiag_mask(p)]))
    for i in range(p):
        for j in range(i):
            if params.L[i, j] != 0.0:
                entries.append(("l", i, j))
    if off_support:
        entries.append(("delta_b",))
    if params.delta_b > 0:
        for i in range(p):
            for j in range(i + 1, p):
                if support[i, j]:
                    entries.append(("rb", i, j))
    return entries


def _pair_derivs(params, h, free_map):
    """dC0 (q, p, p) and dCh (q, m, p, p) for the 2p x 2p pair covariance.

    h is the (m,) vector of pair distances; C0 is the h = 0 block (without
    the nugget, which has zero derivative along every free direction).
    """
    p = params.p
    nu = params.nu
    m = h.size
    q = len(free_map)
    alpha_mat = cross_range_matrix(params)
    an = params.alpha**nu
    aouter = an[:, None] * an[None, :]
    factor = aouter / alpha_mat ** (2.0 * nu)
    corr = _corr_at(h[:, None, None], alpha_mat[None, :, :], nu)
    psi = params.psi
    # alpha_ij sensitivities of the scaled kernel, shared by delta_b and rb
    need_alpha = any(e[0] in ("delta_b", "rb") for e in free_map)
    if need_alpha:
        dg0 = _dalpha_at(np.zeros(()), alpha_mat, nu)
        dgh = _dalpha_at(h[:, None, None], alpha_mat[None, :, :], nu)
        base0 = psi * aouter * dg0
        baseh = (psi * aouter)[None, :, :] * dgh
    dC0 = np.zeros((q, p, p))
    dCh = np.zeros((q, m, p, p))
    for a, entry in enumerate(free_map):
        if entry[0] == "l":
            _, i, j = entry
            E = np.zeros((p, p))
            E[i, j] = 1.0
            M = E @ params.L.T
            dpsi = M + M.T
            dC0[a] = dpsi * factor
            dCh[a] = dC0[a][None, :, :] * corr
        elif entry[0] == "delta_b":
            chain = (1.0 - params.rb) / (2.0 * alpha_mat)
            np.fill_diagonal(chain, 0.0)
            dC0[a] = base0 * chain
            dCh[a] = baseh * chain[None, :, :]
        else:
            _, i, j = entry
            c = -params.delta_b / (2.0 * alpha_mat[i, j])
            dC0[a][i, j] = base0[i, j] * c
            dC0[a][j, i] = base0[j, i] * c
            dCh[a, :, i, j] = baseh[:, i, j] * c
            dCh[a, :, j, i] = baseh[:, j, i] * c
    return dC0, dCh


def _stack_dq(dC0, dCh):
    """(q, m, 2p, 2p) pair-covariance derivative stacks."""
    q, m, p, _ = dCh.shape
    dQ = np.zeros((q, m, 2 * p, 2 * p))
    dQ[:, :, :p, :p] = dC0[:, None, :, :]
    dQ[:, :, p:, p:] = dC0[:, None, :, :]
    dQ[:, :, :p, p:] = dCh
    dQ[:, :, p:, :p] = np.swapaxes(dCh, 2, 3)
    return dQ


def _pair_scores(params, objective: CompositeObjective, free_map,
                 pair_idx=None):
    """Per-pair score vectors (m, q) of the composite log-likelihood."""
    p = params.p
    idx = np.arange(objective.n_pairs) if pair_idx is None else pair_idx
    h = objective.h[idx]
    z = objective.zpairs[idx]
    C0, Ch, corr, _, _ = objective._pair_blocks(params, h)
    Q = objective._stack_q(C0, Ch)
    qinv = np.linalg.inv(Q)
    sol = np.einsum("mij,mj->mi", qinv, z)
    W = -0.5 * qinv + 0.5 * np.einsum("mi,mj->mij", sol, sol)
    Wd = W[:, :p, :p] + W[:, p:, p:]
    Wo = W[:, :p, p:] + np.swapaxes(W[:, p:, :p], 1, 2)
    dC0, dCh = _pair_derivs(params, h, free_map)
    scores = (np.einsum("mij,aij->ma", Wd, dC0)
              + np.einsum("mij,amij->ma", Wo, dCh))
    return scores


def estimate_H(params, dataset, graph, budget=None, free_map=None, seed=0,
               ridge=False):
    """Sensitivity matrix H over a uniform pair subsample of size <= budget.

    H_{ab} = 1/2 sum_pairs tr(Q^-1 dQ_a Q^-1 dQ_b), rescaled from the sample
    to the full pair count.
    """
    obj = _as_composite(dataset, graph)
    params.validate()
    free_map = free_map or free_parameter_map(params)
    q = len(free_map)
    total = obj.n_pairs
    if budget is None or budget >= total:
        idx = np.arange(total)
        scale = 1.0
    else:
        rng = np.random.Generator(np.random.Philox(seed))
        idx = np.sort(rng.choice(total, size=budget, replace=False))
        scale = total / budget
    h = obj.h[idx]
    C0, Ch, _, _, _ = obj._pair_blocks(params, h)
    Q = obj._stack_q(C0, Ch)
    qinv = np.linalg.inv(Q)
    dC0, dCh = _pair_derivs(params, h, free_map)
    dQ = _stack_dq(dC0, dCh)
    H = np.zeros((q, q))
    for m in range(idx.size):
        A = qinv[m] @ dQ[:, m]  # (q, 2p, 2p)
        H += 0.5 * np.einsum("aij,bji->ab", A, A)
    H *= scale
    H = 0.5 * (H + H.T)
    return H


def estimate_J_subsample(params, dataset, graph, config: ClicConfig,
                         free_map=None, max_retries=200):
    """Variability matrix J by replicated score sums over spatial windows.

    Each subsample is a random square window of the sampling domain sized so
    that roughly pairs_per_subsample pairs have both endpoints inside; its
    contribution is the outer product of the summed scores divided by the
    surviving pair count.  Contiguous windows (rather than random location
    subsets) keep spatially close pairs together, which is what carries the
    cross-pair score covariance.  The average over windows is rescaled by
    the total pair count.  Windows without any surviving pair are redrawn.
    """
    obj = _as_composite(dataset, graph)
    params.validate()
    free_map = free_map or free_parameter_map(params)
    q = len(free_map)
    total = obj.n_pairs
    locs = dataset.locations
    lo = locs.min(axis=0)
    span = locs.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    # pairs are local, so a window covering an area fraction a keeps ~a*total
    d = locs.shape[1]
    side = min(1.0, (config.pairs_per_subsample / total) ** (1.0 / d))
    scores = _pair_scores(params, obj, free_map)
    pair_a, pair_b = obj.pairs[:, 0], obj.pairs[:, 1]
    rng = np.random.Generator(np.random.Philox(config.seed))
    J = np.zeros((q, q))
    for _ in range(config.m_sub):
        for attempt in range(max_retries):
            c = lo + rng.uniform(0.0, 1.0 - side, size=locs.shape[1]) * span
            inside = np.all((locs >= c) & (locs <= c + side * span), axis=1)
            keep = inside[pair_a] & inside[pair_b]
            w = int(np.sum(keep))
            if w > 0:
                break
        else:
            raise RuntimeError("could not draw a window containing pairs")
        s = scores[keep].sum(axis=0)
        J += np.outer(s, s) / w
    J *= total / config.m_sub
    J = 0.5 * (J + J.T)
    return J


def estimate_J_model(params, dataset, graph, config: ClicConfig,
                     free_map=None):
    """Variability matrix J by parametric bootstrap under the fitted model.

    n_draws fields are redrawn from the fitted covariance at the observed
    locations; J is the empirical covariance across draws of the total
    composite score.  The trace part of the score is draw-independent and
    drops out of the covariance, so only the quadratic part is accumulated.
    """
    from .matern import assemble_full_covariance
    from .simulate import _philox, _standard_normals

    obj = _as_composite(dataset, graph)
    params.validate()
    free_map = free_map or free_parameter_map(params)
    q = len(free_map)
    p = params.p
    h = obj.h
    C0, Ch, _, _, _ = obj._pair_blocks(params, h)
    Q = obj._stack_q(C0, Ch)
    qinv = np.linalg.inv(Q)
    dC0, dCh = _pair_derivs(params, h, free_map)
    dQ = _stack_dq(dC0, dCh)
    A = np.einsum("mij,amjk,mkl->amil", qinv, dQ, qinv, optimize=True)
    del dQ, qinv
    sigma = assemble_full_covariance(params, dataset.locations)
    scale = float(np.mean(np.diag(sigma)))
    eps = 0.0
    while True:
        try:
            chol = np.linalg.cholesky(
                sigma if eps == 0.0 else sigma + eps * np.eye(sigma.shape[0]))
            break
        except np.linalg.LinAlgError:
            eps = 1e-10 * scale if eps == 0.0 else eps * 10.0
            if eps > 1e-6 * scale:
                raise
    n = dataset.n
    rng = _philox(config.seed)
    x = _standard_normals(rng, (n * p, config.n_draws))
    # columns are stacked by variable, matching the assembly ordering
    Z = (chol @ x).T.reshape(config.n_draws, p, n).transpose(0, 2, 1)
    pair_a, pair_b = obj.pairs[:, 0], obj.pairs[:, 1]
    ZP = np.concatenate((Z[:, pair_a, :], Z[:, pair_b, :]), axis=2)
    s = 0.5 * np.einsum("bmi,amij,bmj->ba", ZP, A, ZP, optimize=True)
    s -= s.mean(axis=0)
    J = s.T @ s / (config.n_draws - 1)
    J = 0.5 * (J + J.T)
    return J


def _as_composite(dataset, graph):
    return CompositeObjective(dataset, graph)


def clic(fit_result: FitResult, dataset, graph, config: ClicConfig = None,
         objective=None):
    """CLIC = -CL(theta) + trace_sign * tr(J H^-1), minimized over the path.

    H is inverted on the free-parameter subspace; a ridge of
    1e-10 tr(H)/q rescues ill-conditioned H, beyond which the error
    propagates.
    """
    config = config or ClicConfig()
    params = fit_result.params
    if objective is None:
        objective = CompositeObjective(dataset, graph)
    if getattr(objective, "kind", None) != "composite":
        raise ValueError("clic requires the composite likelihood")
    cl = objective.loglik(params)
    free_map = free_parameter_map(params)
    q = len(free_map)
    if q == 0:
        # fully diagonal model: no free cross-parameters, no penalty
        return float(-cl)
    H = estimate_H(params, dataset, graph, budget=config.h_budget,
                   free_map=free_map, seed=config.seed)
    if config.j_method == "model":
        J = estimate_J_model(params, dataset, graph, config,
                             free_map=free_map)
    else:
        J = estimate_J_subsample(params, dataset, graph, config,
                                 free_map=free_map)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        Hinv = None
    if Hinv is None or np.linalg.cond(H) > 1e12:
        Hinv = np.linalg.inv(H + 1e-10 * np.trace(H) / q * np.eye(q))
    tr = float(np.trace(J @ Hinv))
    return float(-cl + config.trace_sign * tr)
