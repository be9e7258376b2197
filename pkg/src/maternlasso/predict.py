"""Simple and ordinary cokriging with sparsity-driven variable reduction.

The fitted zero pattern of Psi decides which variables can inform a target:
variables with Psi_tj = 0 carry no cross-covariance with the target and are
dropped from the kriging system.  Large training sets are handled with a
moving neighborhood of the k nearest training locations per target.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve

from .matern import MaternParams, cross_range_matrix, cross_scale_matrix, _corr_at
from .spatial_data import SpatialDataset

__all__ = [
    "PredictionRequest",
    "CokrigingResult",
    "active_variable_set",
    "cokrige",
    "evaluate_predictions",
    "prediction_grid",
    "save_predictions",
]


@dataclass
class PredictionRequest:
    """Where, what and how to predict."""

    locations: np.ndarray        # (m, d) target locations
    targets: list                # variable indices to predict
    mode: str = "simple"         # "simple" or "ordinary"
    neighborhood: Optional[int] = 100   # k nearest training points; None = all
    reduce_variables: bool = True       # sparsity-reduced active sets
    interpolate_nugget: bool = False    # exact-interpolation mode

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.targets = [int(t) for t in self.targets]
        if self.mode not in ("simple", "ordinary"):
            raise ValueError("mode must be 'simple' or 'ordinary'")
        if self.neighborhood is not None and self.neighborhood < 1:
            raise ValueError("neighborhood size k must be >= 1")
        if not self.targets:
            raise ValueError("at least one target variable is required")


@dataclass
class CokrigingResult:
    predictions: np.ndarray   # (m, n_targets)
    variances: np.ndarray     # (m, n_targets), clamped at 0
    targets: list
    active_sets: dict         # target -> sorted active variable list
    duration: float


def active_variable_set(params: MaternParams, target, reduce_variables=True):
    """Variables j with Psi_tj != 0, plus the target itself."""
    p = params.p
    if not 0 <= target < p:
        raise ValueError("target variable index out of range")
    if not reduce_variables:
        return list(range(p))
    S = np.abs(params.L) > 0
    support = S @ S.T
    active = set(np.nonzero(support[target])[0].tolist())
    active.add(int(target))
    return sorted(active)


def _cross_cov_blocks(params, locs_a, locs_b, active):
    """Stacked covariance between observations at locs_a and locs_b.

    Ordering is by variable within the active list: index = i * n + k.
    No nugget (added separately on the data-data diagonal).
    """
    alpha_mat = cross_range_matrix(params)
    S = cross_scale_matrix(params, alpha_mat)
    diff = locs_a[:, None, :] - locs_b[None, :, :]
    dist = np.sqrt(np.einsum("abk,abk->ab", diff, diff))
    na, nb = locs_a.shape[0], locs_b.shape[0]
    m = len(active)
    out = np.empty((m * na, m * nb))
    for ii, i in enumerate(active):
        for jj, j in enumerate(active):
            blk = S[i, j] * _corr_at(dist, alpha_mat[i, j], params.nu)
            out[ii * na:(ii + 1) * na, jj * nb:(jj + 1) * nb] = blk
    return out


def cokrige(train: SpatialDataset, params: MaternParams,
            request: PredictionRequest) -> CokrigingResult:
    """Cokriging prediction of the signal at the requested locations.

    Per target variable and location, the system is built over the active
    variables observed at the neighborhood locations.  The right-hand side
    uses the noise-free signal covariance; the data matrix carries the
    nugget, so measurement error is filtered unless interpolate_nugget.
    """
    params.validate()
    if train.n < 1:
        raise ValueError("training dataset is empty")
    if params.p != train.p:
        raise ValueError("params dimension does not match training data")
    t0 = time.time()
    m = request.locations.shape[0]
    preds = np.empty((m, len(request.targets)))
    variances = np.empty((m, len(request.targets)))
    active_sets = {}
    k = request.neighborhood
    use_all = k is None or k >= train.n
    for tcol, target in enumerate(request.targets):
        if not 0 <= target < params.p:
            raise ValueError("target variable index out of range")
        active = active_variable_set(params, target,
                                     request.reduce_variables)
        active_sets[target] = active
        tpos = active.index(target)
        if use_all:
            groups = {tuple(range(train.n)): np.arange(m)}
        else:
            # group targets sharing one neighborhood to reuse factorizations
            diff = request.locations[:, None, :] - train.locations[None, :, :]
            dist = np.sqrt(np.einsum("abk,abk->ab", diff, diff))
            nbr = np.argsort(dist, axis=1)[:, :k]
            nbr.sort(axis=1)
            groups = {}
            for a in range(m):
                groups.setdefault(tuple(nbr[a]), []).append(a)
            groups = {key: np.asarray(v) for key, v in groups.items()}
        for key, tgt_idx in groups.items():
            idx = np.asarray(key)
            locs = train.locations[idx]
            nn = idx.size
            C = _cross_cov_blocks(params, locs, locs, active)
            nug = np.concatenate([np.full(nn, params.tau2[i]) for i in active])
            C[np.diag_indices_from(C)] += nug
            z = np.concatenate([train.values[idx, i] for i in active])
            c0 = _cross_cov_blocks(
                params, locs, request.locations[tgt_idx], active)
            c0 = c0[:, tpos * tgt_idx.size:(tpos + 1) * tgt_idx.size]
            if request.interpolate_nugget:
                # covariance to the observable (signal + error) at the target
                diffs = locs[None, :, :] - request.locations[tgt_idx][:, None, :]
                at_data = np.where(
                    np.all(diffs == 0.0, axis=2).T)
                c0[tpos * nn + at_data[0], at_data[1]] += params.tau2[target]
            prior = params.sigma2[target] + (
                params.tau2[target] if request.interpolate_nugget else 0.0)
            if request.mode == "simple":
                try:
                    chol = cho_factor(C, lower=True)
                except np.linalg.LinAlgError:
                    raise np.linalg.LinAlgError(
                        f"singular cokriging matrix for neighborhood of "
                        f"target locations {tgt_idx.tolist()[:5]}")
                w = cho_solve(chol, c0)
                preds[tgt_idx, tcol] = w.T @ z
                variances[tgt_idx, tcol] = prior - np.einsum(
                    "ij,ij->j", c0, w)
            else:
                na = len(active)
                if nn < 1:
                    raise ValueError("ordinary mode needs data per variable")
                X = np.zeros((na * nn, na))
                for ii in range(na):
                    X[ii * nn:(ii + 1) * nn, ii] = 1.0
                K = np.block([[C, X], [X.T, np.zeros((na, na))]])
                rhs = np.vstack([c0, np.zeros((na, tgt_idx.size))])
                rhs[na * nn + tpos] = 1.0
                try:
                    sol = solve(K, rhs)
                except np.linalg.LinAlgError:
                    raise np.linalg.LinAlgError(
                        f"singular ordinary cokriging system for targets "
                        f"{tgt_idx.tolist()[:5]}")
                w = sol[:na * nn]
                mu = sol[na * nn:]
                preds[tgt_idx, tcol] = w.T @ z
                variances[tgt_idx, tcol] = (prior
                                            - np.einsum("ij,ij->j", c0, w)
                                            - mu[tpos])
    variances = np.maximum(variances, 0.0)  # clamp -1e-10 scale round-off
    return CokrigingResult(predictions=preds, variances=variances,
                           targets=list(request.targets),
                           active_sets=active_sets,
                           duration=time.time() - t0)


def evaluate_predictions(result: CokrigingResult, truth: SpatialDataset):
    """Per-target RMSE and mean prediction standard deviation."""
    if truth.n != result.predictions.shape[0]:
        raise ValueError("truth rows do not match prediction rows")
    out = {}
    for tcol, target in enumerate(result.targets):
        err = result.predictions[:, tcol] - truth.values[:, target]
        out[target] = {
            "rmse": float(np.sqrt(np.mean(err**2))),
            "mean_sd": float(np.mean(np.sqrt(result.variances[:, tcol]))),
        }
    return out


def prediction_grid(n1, n2, bounds=((0.0, 1.0), (0.0, 1.0))):
    """Regular n1 x n2 grid of locations over the given rectangle."""
    if n1 < 1 or n2 < 1:
        raise ValueError("grid dimensions must be positive")
    x = np.linspace(bounds[0][0], bounds[0][1], n1)
    y = np.linspace(bounds[1][0], bounds[1][1], n2)
    xx, yy = np.meshgrid(x, y, indexing="ij")
    return np.column_stack([xx.reshape(-1), yy.reshape(-1)])


def save_predictions(result: CokrigingResult, locations, path):
    """CSV rows: coordinates, variable index, prediction, variance."""
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = locations.shape[1]
        writer.writerow([f"x{j}" for j in range(d)]
                        + ["variable", "prediction", "variance"])
        for tcol, target in enumerate(result.targets):
            for a in range(locations.shape[0]):
                writer.writerow(list(map(repr, locations[a]))
                                + [target,
                                   repr(float(result.predictions[a, tcol])),
                                   repr(float(result.variances[a, tcol]))])
