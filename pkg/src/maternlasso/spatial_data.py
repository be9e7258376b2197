"""Spatial datasets: ingestion, geometry, preprocessing and exploratory stats."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtri
from scipy.stats import rankdata

__all__ = [
    "SpatialDataset",
    "NeighborGraph",
    "VariogramEstimate",
    "NormalScoreTable",
    "load_dataset",
    "save_dataset",
    "pairwise_distances",
    "nearest_neighbors",
    "normal_score_transform",
    "empirical_cross_variogram",
    "train_test_split",
]

_DUP_TOL = 1e-12


@dataclass
class SpatialDataset:
    """n co-located observations of p variables at locations in R^d."""

    locations: np.ndarray  # (n, d)
    values: np.ndarray     # (n, p)
    names: Sequence[str]

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.names = list(self.names)
        if self.values.shape[0] != self.locations.shape[0]:
            raise ValueError("values row count must equal locations row count")
        if len(self.names) != self.values.shape[1]:
            raise ValueError("one name per value column is required")
        if self.p < 1 or self.d < 1:
            raise ValueError("p >= 1 and d >= 1 required")
        _check_no_duplicates(self.locations)

    @property
    def n(self):
        return self.locations.shape[0]

    @property
    def d(self):
        return self.locations.shape[1]

    @property
    def p(self):
        return self.values.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return SpatialDataset(self.locations[idx], self.values[idx], self.names)

    def stacked(self, ordering="by-variable"):
        """Flatten values to the np-vector matching a covariance ordering."""
        from .matern import BlockOrdering
        if ordering in (BlockOrdering.BY_VARIABLE, "by-variable"):
            return self.values.T.reshape(-1)
        return self.values.reshape(-1)


def _check_no_duplicates(locations):
    if locations.shape[0] < 2:
        return
    tree = cKDTree(locations)
    pairs = tree.query_pairs(_DUP_TOL)
    if pairs:
        k, l = sorted(pairs)[0]
        raise ValueError(f"duplicate coordinates at rows {k} and {l}")


@dataclass
class NeighborGraph:
    """Per-location lists of the v nearest other locations."""

    v: int
    neighbors: list  # neighbors[k] = indices sorted by ascending distance

    def pair_set(self):
        """Unordered pairs {k, l} with l in N_k(v) or k in N_l(v), deduplicated."""
        pairs = set()
        for k, neigh in enumerate(self.neighbors):
            for l in neigh:
                pairs.add((k, l) if k < l else (l, k))
        return sorted(pairs)


@dataclass
class VariogramEstimate:
    bin_centers: np.ndarray
    semivariance: np.ndarray
    counts: np.ndarray
    pair: tuple


@dataclass
class NormalScoreTable:
    """Monotone value <-> Gaussian score table for one variable."""

    values: np.ndarray  # sorted distinct original values
    scores: np.ndarray  # matching Gaussian scores, strictly increasing

    def inverse(self, scores):
        return np.interp(scores, self.scores, self.values)

    def forward(self, values):
        return np.interp(values, self.values, self.scores)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def load_dataset(path, coord_cols, value_cols):
    """Load a CSV with a header row into a SpatialDataset.

    Raises ValueError naming the offending cell for non-numeric entries, and
    for duplicate coordinate rows.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        header = [hdr.strip() for hdr in header]
        missing = [c for c in list(coord_cols) + list(value_cols)
                   if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        ci = [header.index(c) for c in coord_cols]
        vi = [header.index(c) for c in value_cols]
        locs, vals = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            parsed = []
            for col in ci + vi:
                cell = row[col].strip()
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric value {cell!r} at row {r}, "
                        f"column {header[col]!r}")
            locs.append(parsed[:len(ci)])
            vals.append(parsed[len(ci):])
    return SpatialDataset(np.asarray(locs), np.asarray(vals), list(value_cols))


def save_dataset(dataset, path, coord_names=None):
    """Write a dataset as CSV in the same schema load_dataset reads."""
    coord_names = coord_names or [f"x{j}" for j in range(dataset.d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(coord_names) + list(dataset.names))
        for k in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.locations[k]]
                            + [repr(float(v)) for v in dataset.values[k]])


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def pairwise_distances(locations):
    """Symmetric matrix of Euclidean distances, zero diagonal."""
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    diff = locations[:, None, :] - locations[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, 0.0)
    return dist


def nearest_neighbors(locations, v):
    """NeighborGraph of the v nearest locations per point (ties by index)."""
    if v <= 0:
        raise ValueError("v must be positive")
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n = locations.shape[0]
    if n < 2:
        raise ValueError("at least two locations required")
    dist = pairwise_distances(locations)
    m = min(v, n - 1)
    neighbors = []
    idx = np.arange(n)
    for k in range(n):
        others = idx[idx != k]
        order = np.lexsort((others, dist[k, others]))
        neighbors.append([int(o) for o in others[order[:m]]])
    return NeighborGraph(v=v, neighbors=neighbors)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normal_score_transform(values):
    """Rank-based transform to standard Gaussian quantiles.

    Rank r (1-based, average ranks for ties) maps to ndtri((r - 0.5) / n).
    Returns the transformed column and an invertible NormalScoreTable.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise ValueError("at least two values required")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if np.all(values == values[0]):
        raise ValueError("all values identical; normal scores undefined")
    ranks = rankdata(values, method="average")
    scores = ndtri((ranks - 0.5) / n)
    uniq, first = np.unique(values, return_index=True)
    table = NormalScoreTable(values=uniq, scores=scores[first])
    return scores, table


def train_test_split(dataset, n_test, seed=0):
    """Disjoint (train, test) partition, reproducible under the seed."""
    if not 0 < n_test < dataset.n:
        raise ValueError("n_test must lie strictly between 0 and n")
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(dataset.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# exploratory statistics
# ---------------------------------------------------------------------------

def empirical_cross_variogram(dataset, i, j, bins):
    """Classical cross-variogram over unordered location pairs.

    Per-bin estimate: (1 / (2 count)) * sum (Z_i(s_k) - Z_i(s_l)) (Z_j(s_k) - Z_j(s_l))
    over pairs whose separation distance falls in the bin.  Empty bins carry
    count 0 and NaN estimate.
    """
    bins = np.asarray(bins, dtype=float)
    if bins.ndim != 1 or bins.size < 2 or np.any(np.diff(bins) <= 0):
        raise ValueError("bins must be an increasing vector of lag edges")
    if not (0 <= i < dataset.p and 0 <= j < dataset.p):
        raise ValueError("variable index out of range")
    dist = pairwise_distances(dataset.locations)
    iu = np.triu_indices(dataset.n, 1)
    d = dist[iu]
    zi = dataset.values[:, i]
    zj = dataset.values[:, j]
    prod = (zi[iu[0]] - zi[iu[1]]) * (zj[iu[0]] - zj[iu[1]])
    which = np.digitize(d, bins) - 1
    nb = bins.size - 1
    ok = (which >= 0) & (which < nb)
    counts = np.bincount(which[ok], minlength=nb)
    sums = np.bincount(which[ok], weights=prod[ok], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = sums / (2.0 * counts)
    gamma[counts == 0] = np.nan
    centers = 0.5 * (bins[:-1] + bins[1:])
    return VariogramEstimate(bin_centers=centers, semivariance=gamma,
                             counts=counts.astype(int), pair=(i, j))
