import numpy as np
import pytest
from scipy.stats import multivariate_normal

from maternlasso.matern import BlockOrdering, MaternParams, assemble_full_covariance
from maternlasso.objectives import (
    CompositeObjective,
    FullObjective,
    ObjectiveKind,
    composite_loglik,
    full_loglik,
    make_objective,
    penalized_objective,
    penalty_value,
)
from maternlasso.spatial_data import SpatialDataset, nearest_neighbors

rng = np.random.default_rng(31)


def random_params(p=3, nu=0.5, delta_b=2.0, seed=None):
    r = np.random.default_rng(seed) if seed is not None else rng
    A = r.normal(size=(p, p))
    psi = A @ A.T + p * np.eye(p)
    rb = np.full((p, p), 0.3)
    np.fill_diagonal(rb, 1.0)
    return MaternParams.from_psi(psi, alpha=r.uniform(2.0, 8.0, p),
                                 tau2=r.uniform(0.01, 0.2, p), nu=nu,
                                 delta_b=delta_b, rb=rb)


def random_dataset(n=12, p=3, seed=4):
    r = np.random.default_rng(seed)
    locs = r.uniform(0, 1, (n, 2))
    return SpatialDataset(locs, r.normal(size=(n, p)),
                          [f"z{i}" for i in range(p)])


def test_objective_kind_validation():
    ObjectiveKind("full")
    ObjectiveKind("composite", v=3)
    with pytest.raises(ValueError):
        ObjectiveKind("banana")
    with pytest.raises(ValueError):
        ObjectiveKind("composite")


def test_full_loglik_matches_scipy():
    ds = random_dataset(8, 2)
    prm = random_params(p=2)
    sigma = assemble_full_covariance(prm, ds.locations,
                                     BlockOrdering.BY_VARIABLE)
    expect = multivariate_normal(mean=np.zeros(16), cov=sigma).logpdf(
        ds.stacked("by-variable"))
    assert full_loglik(prm, ds) == pytest.approx(expect, rel=1e-12)


def test_composite_pair_terms_include_2pi_constant():
    # a single pair's contribution is the exact bivariate-vector logpdf
    ds = random_dataset(2, 2)
    prm = random_params(p=2)
    graph = nearest_neighbors(ds.locations, 1)
    obj = CompositeObjective(ds, graph)
    assert obj.n_pairs == 1
    from maternlasso.matern import assemble_pair_covariance
    Q = assemble_pair_covariance(prm, ds.locations[0], ds.locations[1])
    z = np.concatenate([ds.values[0], ds.values[1]])
    expect = multivariate_normal(mean=np.zeros(4), cov=Q).logpdf(z)
    assert obj.loglik(prm) == pytest.approx(expect, rel=1e-12)


def test_full_equals_composite_n2_v1():
    ds = random_dataset(2, 3)
    prm = random_params(p=3, delta_b=1.5)
    graph = nearest_neighbors(ds.locations, 1)
    lf = FullObjective(ds).loglik(prm)
    lc = CompositeObjective(ds, graph).loglik(prm)
    assert abs(lf - lc) < 1e-10
    _, gf = FullObjective(ds).loglik_grad(prm)
    _, gc = CompositeObjective(ds, graph).loglik_grad(prm)
    np.testing.assert_allclose(gf.d_l, gc.d_l, atol=1e-10)
    assert gf.d_delta_b == pytest.approx(gc.d_delta_b, abs=1e-10)
    np.testing.assert_allclose(gf.d_rb, gc.d_rb, atol=1e-10)


def test_composite_chunking_invariant():
    ds = random_dataset(15, 2)
    prm = random_params(p=2)
    graph = nearest_neighbors(ds.locations, 4)
    big = CompositeObjective(ds, graph)
    small = CompositeObjective(ds, graph, chunk=3)
    assert big.loglik(prm) == pytest.approx(small.loglik(prm), rel=1e-13)
    _, g1 = big.loglik_grad(prm)
    _, g2 = small.loglik_grad(prm)
    np.testing.assert_allclose(g1.d_l, g2.d_l, rtol=1e-11)
    assert g1.d_delta_b == pytest.approx(g2.d_delta_b, rel=1e-11)


def _fd_check(obj, prm, eps=1e-6):
    """Max relative error of the analytic gradient against central FD."""
    _, g = obj.loglik_grad(prm)
    p = prm.p
    worst = 0.0

    def rel(analytic, fd):
        return abs(analytic - fd) / max(abs(fd), 1e-8)

    for i in range(p):
        for j in range(i + 1):
            hi, lo = prm.copy(), prm.copy()
            for q, e in ((hi, eps), (lo, -eps)):
                q.L = q.L.copy()
                if i == j:
                    q.L[i, i] *= np.exp(e)
                else:
                    q.L[i, j] += e
                q.sigma2 = np.einsum("ab,ab->a", q.L, q.L)
            fd = (obj.loglik(hi) - obj.loglik(lo)) / (2 * eps)
            worst = max(worst, rel(g.d_l[i, j], fd))
    hi, lo = prm.copy(), prm.copy()
    hi.delta_b += eps
    lo.delta_b -= eps
    fd = (obj.loglik(hi) - obj.loglik(lo)) / (2 * eps)
    worst = max(worst, rel(g.d_delta_b, fd))
    for i in range(p):
        for j in range(i + 1, p):
            hi, lo = prm.copy(), prm.copy()
            for q, e in ((hi, eps), (lo, -eps)):
                q.rb = q.rb.copy()
                q.rb[i, j] += e
                q.rb[j, i] += e
            fd = (obj.loglik(hi) - obj.loglik(lo)) / (2 * eps)
            worst = max(worst, rel(g.d_rb[i, j], fd))
    return worst


@pytest.mark.parametrize("nu", [0.5, 1.5, 0.8])
def test_full_gradient_fd(nu):
    ds = random_dataset(10, 3, seed=7)
    prm = random_params(p=3, nu=nu, delta_b=3.0, seed=8)
    assert _fd_check(FullObjective(ds), prm) < 1e-5


@pytest.mark.parametrize("nu", [0.5, 1.5])
def test_composite_gradient_fd(nu):
    ds = random_dataset(14, 3, seed=9)
    prm = random_params(p=3, nu=nu, delta_b=3.0, seed=10)
    graph = nearest_neighbors(ds.locations, 4)
    assert _fd_check(CompositeObjective(ds, graph), prm) < 1e-5


def test_rb_gradient_zero_when_delta_zero():
    ds = random_dataset(10, 3)
    prm = random_params(p=3, delta_b=0.0)
    _, g = FullObjective(ds).loglik_grad(prm)
    assert not np.any(g.d_rb)


def test_corr_cache_reused_for_L_moves():
    ds = random_dataset(10, 2)
    prm = random_params(p=2)
    obj = FullObjective(ds)
    obj.loglik(prm)
    cached = obj._corr
    moved = prm.copy()
    moved.L = moved.L.copy()
    moved.L[1, 0] += 0.1
    moved.sigma2 = np.einsum("ab,ab->a", moved.L, moved.L)
    obj.loglik(moved)
    assert obj._corr is cached  # alpha unchanged -> same blocks
    bumped = prm.copy()
    bumped.delta_b += 1.0
    obj.loglik(bumped)
    assert obj._corr is not cached


def test_penalty_and_penalized_objective():
    prm = random_params(p=3)
    lam = 0.7
    expect = lam * np.abs(prm.L[np.tril_indices(3, -1)]).sum()
    assert penalty_value(prm, lam) == pytest.approx(expect, rel=1e-14)
    ds = random_dataset(8, 3)
    f = penalized_objective(prm, lam, ObjectiveKind("full"), ds)
    assert f == pytest.approx(-full_loglik(prm, ds) + expect, rel=1e-12)
    with pytest.raises(ValueError):
        penalized_objective(prm, -0.1, ObjectiveKind("full"), ds)


def test_make_objective_dispatch():
    ds = random_dataset(9, 2)
    assert isinstance(make_objective(ds, ObjectiveKind("full")), FullObjective)
    obj = make_objective(ds, ObjectiveKind("composite", v=2))
    assert isinstance(obj, CompositeObjective)
    graph = nearest_neighbors(ds.locations, 3)
    with pytest.raises(ValueError, match="v"):
        make_objective(ds, ObjectiveKind("composite", v=2), graph=graph)


def test_max_abs_offdiag_l():
    ds = random_dataset(8, 3)
    prm = random_params(p=3)
    _, g = FullObjective(ds).loglik_grad(prm)
    mask = np.tril(np.ones((3, 3), dtype=bool), -1)
    assert g.max_abs_offdiag_l() == pytest.approx(np.abs(g.d_l[mask]).max())
