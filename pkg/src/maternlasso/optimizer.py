"""Penalized projected block coordinate descent for the multivariate Matern model.

Step 1 fits the p marginal fields independently (variance, inverse range and
optionally a nugget per variable).  The outer loop then cycles proximal /
projected updates of the cross-structure blocks: soft-thresholded gradient
steps on L with an exact row rescaling enforcing (L L^T)_ii = sigma2_i, a
nonnegativity-projected step on delta_b, and a step on rb projected onto the
set of correlation matrices with entries in [0, 1].  Every accepted step
strictly decreases the penalized objective, so the trace is non-increasing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .matern import MaternParams, BlockOrdering, matern_correlation
from .objectives import (
    CompositeObjective,
    FullObjective,
    ObjectiveKind,
    make_objective,
    penalty_value,
)
from .spatial_data import SpatialDataset, nearest_neighbors, pairwise_distances

__all__ = [
    "FitConfig",
    "FitResult",
    "fit_marginals",
    "soft_threshold",
    "update_L",
    "update_DeltaB",
    "update_RB",
    "project_correlation_box",
    "fit",
]

_DIAG_FLOOR = 1e-8


@dataclass
class FitConfig:
    """Configuration of one penalized fit."""

    kind: ObjectiveKind = field(default_factory=ObjectiveKind)
    lam: float = 0.0
    max_outer_iter: int = 200
    step0: float = 1.0
    backtrack: float = 0.5
    max_backtracks: int = 50
    tol_rel: float = 1e-6
    nu: float = 0.5
    estimate_nugget: bool = True
    seed: int = 0
    track_iterates: bool = False

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = ObjectiveKind(kind=self.kind)
        if self.max_outer_iter < 1:
            raise ValueError("max_outer_iter must be >= 1")
        if self.step0 <= 0:
            raise ValueError("step0 must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.tol_rel <= 0:
            raise ValueError("tol_rel must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


@dataclass
class FitResult:
    params: MaternParams
    objective_trace: np.ndarray
    converged: bool
    n_iter: int
    sparsity_pattern: np.ndarray  # boolean lower triangle, True where L_ij != 0
    duration: float
    iterates: Optional[list] = None

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "objective_trace": np.asarray(self.objective_trace).tolist(),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "sparsity_pattern": self.sparsity_pattern.astype(int).tolist(),
            "duration": float(self.duration),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            params=MaternParams.from_dict(doc["params"]),
            objective_trace=np.asarray(doc["objective_trace"], dtype=float),
            converged=bool(doc["converged"]),
            n_iter=int(doc["n_iter"]),
            sparsity_pattern=np.asarray(doc["sparsity_pattern"], dtype=bool),
            duration=float(doc["duration"]),
        )


# ---------------------------------------------------------------------------
# step 1: marginal fits
# ---------------------------------------------------------------------------

def _univariate_negloglik_full(x, dist, z, nu, with_nugget):
    sigma2 = np.exp(x[0])
    alpha = np.exp(x[1])
    tau2 = np.exp(x[2]) if with_nugget else 0.0
    n = z.shape[0]
    sigma = sigma2 * matern_correlation(dist, alpha, nu)
    sigma[np.diag_indices_from(sigma)] += tau2 + 1e-12 * sigma2
    try:
        chol = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError:
        return 1e12
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    quad = z @ cho_solve(chol, z)
    return 0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)


def _univariate_negloglik_pairs(x, h, zpairs, nu, with_nugget):
    sigma2 = np.exp(x[0])
    alpha = np.exp(x[1])
    tau2 = np.exp(x[2]) if with_nugget else 0.0
    var = sigma2 + tau2 + 1e-12 * sigma2
    cov = sigma2 * matern_correlation(h, alpha, nu)
    det = var**2 - cov**2
    if np.any(det <= 0):
        return 1e12
    a, b = zpairs[:, 0], zpairs[:, 1]
    quad = (var * (a**2 + b**2) - 2.0 * cov * a * b) / det
    return float(np.sum(np.log(2.0 * np.pi) + 0.5 * np.log(det) + 0.5 * quad))


def fit_marginals(dataset, kind: ObjectiveKind, graph=None, nu=0.5,
                  estimate_nugget=True):
    """Fit (sigma2_i, alpha_i, tau2_i) per variable under independence.

    Each component is a separate univariate optimization of the chosen
    objective; several inverse-range starts guard against the flat tails of
    the marginal likelihood surface.
    """
    if isinstance(kind, str):
        kind = ObjectiveKind(kind=kind, v=graph.v if graph is not None else None)
    if dataset.n < 3:
        raise ValueError("marginal fits need at least 3 observations")
    dist = pairwise_distances(dataset.locations)
    pos = dist[np.triu_indices(dataset.n, 1)]
    med = np.median(pos)
    if kind.kind == "composite":
        if graph is None:
            graph = nearest_neighbors(dataset.locations, kind.v)
        pairs = np.asarray(graph.pair_set(), dtype=int)
        h = np.linalg.norm(dataset.locations[pairs[:, 0]]
                           - dataset.locations[pairs[:, 1]], axis=1)
    sigma2 = np.empty(dataset.p)
    alpha = np.empty(dataset.p)
    tau2 = np.zeros(dataset.p)
    for i in range(dataset.p):
        z = dataset.values[:, i]
        var = max(z.var(), 1e-12)
        if kind.kind == "full":
            fun = lambda x: _univariate_negloglik_full(x, dist, z, nu,
                                                       estimate_nugget)
        else:
            zp = np.column_stack([z[pairs[:, 0]], z[pairs[:, 1]]])
            fun = lambda x: _univariate_negloglik_pairs(x, h, zp, nu,
                                                        estimate_nugget)
        best = None
        for a0 in (3.0 / med, 10.0 / med, 1.0 / med):
            x0 = [np.log(0.8 * var), np.log(a0)]
            if estimate_nugget:
                x0.append(np.log(0.2 * var))
            res = minimize(fun, np.asarray(x0), method="Nelder-Mead",
                           options={"xatol": 1e-6, "fatol": 1e-8,
                                    "maxiter": 2000})
            if best is None or res.fun < best.fun:
                best = res
        if not np.isfinite(best.fun) or best.fun >= 1e12:
            raise RuntimeError(f"marginal fit failed for variable "
                               f"{dataset.names[i]!r}")
        sigma2[i] = np.exp(best.x[0])
        alpha[i] = np.exp(best.x[1])
        tau2[i] = np.exp(best.x[2]) if estimate_nugget else 0.0
    return sigma2, alpha, tau2


# ---------------------------------------------------------------------------
# block updates
# ---------------------------------------------------------------------------

def soft_threshold(mat, thr):
    """Soft-threshold the strict lower triangle; diagonal passes through."""
    if thr < 0:
        raise ValueError("threshold must be nonnegative")
    mat = np.asarray(mat, dtype=float)
    out = np.sign(mat) * np.maximum(np.abs(mat) - thr, 0.0)
    out[np.diag_indices_from(out)] = np.diag(mat)
    return np.tril(out)


def _l_coords(L):
    l = np.tril(L).copy()
    l[np.diag_indices_from(l)] = np.log(np.diag(L))
    return l


def _from_l_coords(l):
    L = np.tril(l).copy()
    # clamp so an oversized trial step cannot overflow exp; the backtracking
    # line search rejects such steps anyway, but inf would poison the rescale
    L[np.diag_indices_from(L)] = np.exp(np.clip(np.diag(l), -100.0, 100.0))
    return L


def update_L(params, grad_dl, step, lam):
    """One proximal gradient step on L with exact diagonal-constraint rescaling.

    grad_dl is the gradient of the minimization objective in l-coordinates.
    Rows are rescaled to sigma_ii * row / ||row|| so that (L L^T)_ii = sigma2_i
    exactly; entries zeroed by the soft threshold stay zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    l = _l_coords(params.L)
    l_new = soft_threshold(l - step * grad_dl, step * lam)
    L = _from_l_coords(l_new)
    sig = np.sqrt(params.sigma2)
    for i in range(L.shape[0]):
        if L[i, i] < _DIAG_FLOOR * sig[i]:
            L[i, i] = _DIAG_FLOOR * sig[i]
        nrm = np.linalg.norm(L[i, :i + 1])
        L[i, :i + 1] *= sig[i] / nrm
    return L


def project_correlation_box(mat, tol=1e-9, max_sweeps=500):
    """Nearest symmetric unit-diagonal PSD matrix with off-diagonals in [0, 1].

    Dykstra's alternating projections between the PSD cone and the
    box-with-unit-diagonal set.
    """
    mat = np.asarray(mat, dtype=float)
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError("input must be symmetric")
    p = mat.shape[0]

    def proj_psd(a):
        w, v = np.linalg.eigh(a)
        w = np.maximum(w, 0.0)
        return (v * w) @ v.T

    def proj_box(a):
        out = np.clip(a, 0.0, 1.0)
        np.fill_diagonal(out, 1.0)
        return out

    x = mat.copy()
    dp = np.zeros((p, p))
    dq = np.zeros((p, p))
    for _ in range(max_sweeps):
        y = proj_psd(x + dp)
        dp = x + dp - y
        x_new = proj_box(y + dq)
        dq = y + dq - x_new
        small_move = np.linalg.norm(x_new - x, "fro") < tol
        x = x_new
        # box constraints hold exactly; stop once the PSD side does too
        if small_move and np.linalg.eigvalsh(x).min() >= -1e-9:
            break
    x = 0.5 * (x + x.T)
    np.fill_diagonal(x, 1.0)
    # shrink toward the identity if the sweep budget ran out short of PSD;
    # preserves the unit diagonal and the [0, 1] box exactly
    w_min = np.linalg.eigvalsh(x).min()
    if w_min < 0.0:
        eps = -w_min * (1.0 + 1e-6)
        x = (x + eps * np.eye(p)) / (1.0 + eps)
        np.fill_diagonal(x, 1.0)
    return x


def _backtrack_steps(config, step0=None):
    start = config.step0 if step0 is None else step0
    return (start * config.backtrack**i
            for i in range(config.max_backtracks))


def update_DeltaB(params, grad, objective_fn, config, step0=None, f0=None):
    """Backtracking projected gradient step.

    Returns (delta_b, objective, moved, accepted step or None).
    """
    if f0 is None:
        f0 = objective_fn(params)
    if grad == 0.0 or (params.delta_b == 0.0 and grad >= 0.0):
        return params.delta_b, f0, False, None
    scale = max(1.0, abs(params.delta_b))
    for step in _backtrack_steps(config, step0):
        if step * abs(grad) < 1e-10 * scale:
            break
        cand = max(0.0, params.delta_b - step * grad)
        if cand == params.delta_b:
            continue
        trial = params.copy()
        trial.delta_b = cand
        try:
            f = objective_fn(trial)
        except np.linalg.LinAlgError:
            continue
        if f < f0:
            return cand, f, True, step
    return params.delta_b, f0, False, None


def update_RB(params, grad_rb, objective_fn, config, step0=None, f0=None):
    """Backtracking projected gradient step on rb.

    Returns (rb, objective, moved, accepted step or None).
    """
    if f0 is None:
        f0 = objective_fn(params)
    g = grad_rb + grad_rb.T  # symmetric step from the upper-triangle gradient
    if not np.any(g):
        return params.rb, f0, False, None
    gmax = np.abs(g).max()
    for step in _backtrack_steps(config, step0):
        if step * gmax < 1e-12:
            break
        cand = project_correlation_box(params.rb - step * g)
        if np.allclose(cand, params.rb, atol=1e-15):
            continue
        trial = params.copy()
        trial.rb = cand
        try:
            f = objective_fn(trial)
        except np.linalg.LinAlgError:
            continue
        if f < f0:
            return cand, f, True, step
    return params.rb, f0, False, None


# ---------------------------------------------------------------------------
# the full fit
# ---------------------------------------------------------------------------

def fit(dataset, lam=None, config=None, warm_start=None, graph=None,
        objective=None):
    """Penalized projected block coordinate descent fit.

    warm_start, when given, supplies both the marginal parameters and the
    cross-structure initialization; otherwise marginals are fitted under
    independence and L starts diagonal with delta_b = 0 and rb = I.
    """
    config = config or FitConfig()
    if lam is not None:
        config = FitConfig(**{**config.__dict__, "lam": lam})
    lam = config.lam
    t0 = time.time()
    if objective is None:
        objective = make_objective(dataset, config.kind, graph=graph)
    if warm_start is not None:
        params = warm_start.copy()
        params.validate()
    else:
        sigma2, alpha, tau2 = fit_marginals(
            dataset, config.kind, graph=graph, nu=config.nu,
            estimate_nugget=config.estimate_nugget)
        params = MaternParams(sigma2=sigma2, alpha=alpha, tau2=tau2,
                              nu=config.nu, L=np.diag(np.sqrt(sigma2)),
                              delta_b=0.0, rb=np.eye(dataset.p))

    def f_pen(prm):
        return -objective.loglik(prm) + penalty_value(prm, lam)

    trace = []
    iterates = [] if config.track_iterates else None
    try:
        ll, grad = objective.loglik_grad(params)
    except np.linalg.LinAlgError:
        raise RuntimeError("objective evaluation failed at the initial point")
    f_cur = -ll + penalty_value(params, lam)
    trace.append(f_cur)
    converged = False
    n_iter = 0
    # persistent per-block step sizes: each backtracking search resumes near
    # the last accepted step (regrown 4x, capped at step0) instead of step0
    step_l = step_d = step_r = config.step0
    for m in range(config.max_outer_iter):
        n_iter = m + 1
        f_prev = f_cur
        # --- L block: proximal step with backtracking acceptance
        if dataset.p > 1:
            accepted = False
            gl_max = np.abs(grad.d_l).max()
            for step in _backtrack_steps(config, step_l):
                if step * (gl_max + lam) < 1e-12:
                    break
                L_cand = update_L(params, -grad.d_l, step, lam)
                trial = params.copy()
                trial.L = L_cand
                try:
                    f = f_pen(trial)
                except np.linalg.LinAlgError:
                    continue
                if f < f_cur:
                    params = trial
                    f_cur = f
                    accepted = True
                    step_l = min(config.step0, 4.0 * step)
                    break
            if accepted:
                ll, grad = objective.loglik_grad(params)
            else:
                # failed search: shrink so the next one terminates quickly
                step_l = max(step_l * config.backtrack**5, 1e-10)
        # --- delta_b block
        delta, f_cur, moved_d, used = update_DeltaB(
            params, -grad.d_delta_b, f_pen, config, step0=step_d, f0=f_cur)
        if moved_d:
            params.delta_b = delta
            step_d = min(config.step0, 4.0 * used)
            ll, grad = objective.loglik_grad(params)
        else:
            step_d = max(step_d * config.backtrack**5, 1e-10)
        # --- rb block (gradient is identically zero while delta_b = 0)
        if dataset.p > 1 and params.delta_b > 0:
            rb, f_cur, moved_r, used = update_RB(
                params, -grad.d_rb, f_pen, config, step0=step_r, f0=f_cur)
            if moved_r:
                params.rb = rb
                step_r = min(config.step0, 4.0 * used)
                ll, grad = objective.loglik_grad(params)
            else:
                step_r = max(step_r * config.backtrack**5, 1e-10)
        trace.append(f_cur)
        if iterates is not None:
            iterates.append(params.copy())
        rel = (f_prev - f_cur) / max(abs(f_prev), 1.0)
        if rel < config.tol_rel:
            converged = True
            break
    p = dataset.p
    pattern = np.tril(params.L != 0.0)
    return FitResult(params=params, objective_trace=np.asarray(trace),
                     converged=converged, n_iter=n_iter,
                     sparsity_pattern=pattern, duration=time.time() - t0,
                     iterates=iterates)
