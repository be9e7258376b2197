import numpy as np
import pytest

from maternlasso.matern import MaternParams
from maternlasso.objectives import CompositeObjective, FullObjective, ObjectiveKind
from maternlasso.optimizer import FitConfig, FitResult, fit
from maternlasso.selection import (
    ClicConfig,
    LambdaGrid,
    PathResult,
    aic,
    clic,
    estimate_H,
    estimate_J_subsample,
    free_parameter_map,
    lambda_grid,
    lambda_max,
    select_lambda,
    solution_path,
)
from maternlasso.simulate import experiment_config, sample_locations_uniform, simulate_field
from maternlasso.spatial_data import nearest_neighbors

rng = np.random.default_rng(77)


def sim(p=3, n=50, seed=0, delta_b=20.0):
    prm = experiment_config(p=p, delta_b=delta_b)
    locs = sample_locations_uniform(n, seed=seed)
    return prm, simulate_field(prm, locs, seed=seed + 31)


def make_fit_result(params):
    p = params.p
    return FitResult(params=params, objective_trace=np.zeros(1),
                     converged=True, n_iter=1,
                     sparsity_pattern=np.tril(params.L != 0),
                     duration=0.0)


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def test_lambda_grid_oracles():
    g = lambda_grid(1.0, count=3)
    np.testing.assert_allclose(g.values, [1.0, 1e-4, 1e-8], rtol=1e-12)
    g2 = lambda_grid(2.5, count=2)
    np.testing.assert_allclose(g2.values, [2.5, 2.5e-8], rtol=1e-12)
    # default count: max(p^2 - p, 20) -> 20 at p=5
    g5 = lambda_grid(1.0, p=5)
    assert g5.count == 20
    g7 = lambda_grid(1.0, p=7)
    assert g7.count == 42
    with pytest.raises(ValueError):
        lambda_grid(-1.0, count=5)
    with pytest.raises(ValueError):
        lambda_grid(1.0, count=1)
    with pytest.raises(ValueError):
        LambdaGrid(values=np.array([1.0, 2.0]), lam_max=1.0, lam_min=2.0,
                   count=2)


def test_lambda_max_permutation_invariant():
    # with a common marginal scale the gradient magnitudes permute with the
    # variables, so the max is invariant under relabeling
    prm, ds = sim(p=3, n=40, seed=5)
    kind = ObjectiveKind("full")
    init = MaternParams(sigma2=np.ones(3), alpha=np.full(3, 5.0),
                        tau2=np.zeros(3), nu=0.5, L=np.eye(3))
    lmx = lambda_max(ds, kind, init_params=init)
    perm = [2, 0, 1]
    ds2 = type(ds)(ds.locations, ds.values[:, perm],
                   [ds.names[i] for i in perm])
    lmx2 = lambda_max(ds2, kind, init_params=init)
    assert lmx2 == pytest.approx(lmx, rel=1e-10)


def test_lambda_max_gradient_oracle():
    # direct check against the objective gradient at the same initialization
    prm, ds = sim(p=3, n=30, seed=6)
    from maternlasso.optimizer import fit_marginals
    sigma2, alpha, tau2 = fit_marginals(ds, ObjectiveKind("full"),
                                        estimate_nugget=False)
    init = MaternParams(sigma2=sigma2, alpha=alpha, tau2=tau2, nu=0.5,
                        L=np.diag(np.sqrt(sigma2)))
    obj = FullObjective(ds)
    _, g = obj.loglik_grad(init)
    expect = np.abs(g.d_l[np.tril_indices(3, -1)]).max()
    got = lambda_max(ds, ObjectiveKind("full"), init_params=init,
                     objective=obj)
    assert got == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------------------
# AIC
# ---------------------------------------------------------------------------

class _FixedLoglik:
    kind = "full"

    def __init__(self, value):
        self.value = value

    def loglik(self, params):
        return self.value


def test_aic_arithmetic_oracles():
    # p=3, one nonzero off-diagonal pair -> ordered set size 2 -> penalty 8
    L = np.array([[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])
    prm = MaternParams(sigma2=np.einsum("ij,ij->i", L, L),
                       alpha=[1.0, 1.0, 1.0], tau2=[0.0] * 3, nu=0.5, L=L)
    res = make_fit_result(prm)
    assert aic(res, None, objective=_FixedLoglik(-100.0)) == 208.0
    # diagonal Psi -> AIC = -2 loglik
    Ld = np.eye(3)
    prmd = MaternParams(sigma2=[1.0] * 3, alpha=[1.0] * 3, tau2=[0.0] * 3,
                        nu=0.5, L=Ld)
    assert aic(make_fit_result(prmd), None,
               objective=_FixedLoglik(-100.0)) == 200.0
    # one extra nonzero pair raises the penalty by exactly 8
    L2 = L.copy()
    L2[2, 1] = 0.3
    prm2 = MaternParams(sigma2=np.einsum("ij,ij->i", L2, L2),
                        alpha=[1.0] * 3, tau2=[0.0] * 3, nu=0.5, L=L2)
    a1 = aic(res, None, objective=_FixedLoglik(-100.0))
    a2 = aic(make_fit_result(prm2), None, objective=_FixedLoglik(-100.0))
    # rows 1, 2 now share support: exactly one extra symmetric pair
    assert a2 - a1 == 8.0


def test_aic_rejects_composite_objective():
    prm, ds = sim(p=2, n=20, seed=9)
    graph = nearest_neighbors(ds.locations, 2)
    res = make_fit_result(prm)
    with pytest.raises(ValueError):
        aic(res, ds, objective=CompositeObjective(ds, graph))


# ---------------------------------------------------------------------------
# free parameters, H and J
# ---------------------------------------------------------------------------

def test_free_parameter_map_order_and_pattern():
    L = np.array([[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.0, 0.7, 1.0]])
    prm = MaternParams(sigma2=np.einsum("ij,ij->i", L, L),
                       alpha=[2.0] * 3, tau2=[0.0] * 3, nu=0.5, L=L,
                       delta_b=3.0)
    fm = free_parameter_map(prm)
    assert fm[:2] == [("l", 1, 0), ("l", 2, 1)]
    assert fm[2] == ("delta_b",)
    # rb_02 excluded: Psi_02 = 0 so its derivative vanishes identically
    assert fm[3:] == [("rb", 0, 1), ("rb", 1, 2)]
    flat = prm.copy()
    flat.delta_b = 0.0
    fm0 = free_parameter_map(flat)
    assert fm0 == [("l", 1, 0), ("l", 2, 1), ("delta_b",)]


def test_estimate_H_matches_fd_hessian_single_pair():
    # one pair, expected-Hessian identity: H_ab = 1/2 tr(Q^-1 dQ_a Q^-1 dQ_b)
    # equals the FD Hessian of the pair's negative expected loglik curvature
    prm, ds = sim(p=2, n=2, seed=12, delta_b=8.0)
    graph = nearest_neighbors(ds.locations, 1)
    obj = CompositeObjective(ds, graph)
    fm = free_parameter_map(prm)
    H = estimate_H(prm, ds, graph, free_map=fm)
    assert H.shape == (3, 3)
    np.testing.assert_allclose(H, H.T, atol=1e-12)
    # FD of the score (gradient of cl) wrt each free parameter, averaged over
    # the data distribution, equals -E[Hessian]; use the trace identity
    # directly on a scalar parameter instead: perturb delta_b
    from maternlasso.selection import _pair_derivs, _stack_dq
    h = obj.h
    C0, Ch, _, _, _ = obj._pair_blocks(prm, h)
    Q = obj._stack_q(C0, Ch)[0]
    dC0, dCh = _pair_derivs(prm, h, fm)
    dQ = _stack_dq(dC0, dCh)[:, 0]
    qinv = np.linalg.inv(Q)
    expect = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            expect[a, b] = 0.5 * np.trace(qinv @ dQ[a] @ qinv @ dQ[b])
    np.testing.assert_allclose(H, expect, rtol=1e-10)


def test_estimate_H_budget_subsample_consistency():
    prm, ds = sim(p=2, n=30, seed=13, delta_b=8.0)
    graph = nearest_neighbors(ds.locations, 3)
    exact = estimate_H(prm, ds, graph)  # budget = all pairs
    sub = estimate_H(prm, ds, graph, budget=10**9)
    np.testing.assert_allclose(sub, exact, rtol=1e-12)
    small = estimate_H(prm, ds, graph, budget=20, seed=5)
    assert small.shape == exact.shape
    # same order of magnitude after rescaling
    assert np.trace(small) == pytest.approx(np.trace(exact), rel=1.0)


def test_pair_derivs_match_fd():
    prm, ds = sim(p=3, n=10, seed=14, delta_b=8.0)
    graph = nearest_neighbors(ds.locations, 2)
    obj = CompositeObjective(ds, graph)
    fm = free_parameter_map(prm)
    from maternlasso.selection import _pair_derivs
    h = obj.h
    dC0, dCh = _pair_derivs(prm, h, fm)
    eps = 1e-6
    for a, entry in enumerate(fm):
        hi, lo = prm.copy(), prm.copy()
        for q, e in ((hi, eps), (lo, -eps)):
            if entry[0] == "l":
                _, i, j = entry
                q.L = q.L.copy()
                q.L[i, j] += e
                q.sigma2 = np.einsum("ab,ab->a", q.L, q.L)
            elif entry[0] == "delta_b":
                q.delta_b += e
            else:
                _, i, j = entry
                q.rb = q.rb.copy()
                q.rb[i, j] += e
                q.rb[j, i] += e
        C0h, Chh, _, _, _ = obj._pair_blocks(hi, h)
        C0l, Chl, _, _, _ = obj._pair_blocks(lo, h)
        fd0 = (C0h - C0l) / (2 * eps)
        fdh = (Chh - Chl) / (2 * eps)
        # remove the nugget column (tau2 constant under these moves)
        np.testing.assert_allclose(dC0[a], fd0, atol=5e-6)
        np.testing.assert_allclose(dCh[a], fdh, atol=5e-6)


def test_estimate_J_degenerate_subsample():
    # one subsample covering every location reproduces the full outer product
    prm, ds = sim(p=2, n=12, seed=15, delta_b=8.0)
    graph = nearest_neighbors(ds.locations, 2)
    obj = CompositeObjective(ds, graph)
    fm = free_parameter_map(prm)
    total = obj.n_pairs
    cfg = ClicConfig(m_sub=1, pairs_per_subsample=10**9, h_budget=10)
    J = estimate_J_subsample(prm, ds, graph, cfg, free_map=fm)
    from maternlasso.selection import _pair_scores
    s = _pair_scores(prm, obj, fm).sum(axis=0)
    expect = np.outer(s, s) / total * total
    np.testing.assert_allclose(J, expect, rtol=1e-10)
    np.testing.assert_allclose(J, J.T, atol=1e-12)
    assert np.linalg.eigvalsh(J).min() >= -1e-8


def test_clic_scalar_assembly_and_trace_invariance():
    # p=3 keeps H nonsingular (at p=2, delta_b and the single rb entry steer
    # the same cross range, a structurally flat direction)
    prm, ds = sim(p=3, n=25, seed=16, delta_b=8.0)
    graph = nearest_neighbors(ds.locations, 3)
    obj = CompositeObjective(ds, graph)
    res = make_fit_result(prm)
    cfg = ClicConfig(m_sub=5, pairs_per_subsample=8, h_budget=10**6, seed=3)
    val = clic(res, ds, graph, cfg, objective=obj)
    fm = free_parameter_map(prm)
    H = estimate_H(prm, ds, graph, budget=cfg.h_budget, free_map=fm,
                   seed=cfg.seed)
    J = estimate_J_subsample(prm, ds, graph, cfg, free_map=fm)
    # the likelihood sees only the products delta_b * (1 - rb_ij), so the
    # (delta_b, rb) block is rank deficient by one and the ridge kicks in,
    # exactly as inside clic
    q = len(fm)
    Hinv = np.linalg.inv(H + 1e-10 * np.trace(H) / q * np.eye(q))
    expect = -obj.loglik(prm) + np.trace(J @ Hinv)
    assert val == pytest.approx(expect, rel=1e-6)
    # sign switch
    cfg2 = ClicConfig(m_sub=5, pairs_per_subsample=8, h_budget=10**6, seed=3,
                      trace_sign=-1.0)
    val2 = clic(res, ds, graph, cfg2, objective=obj)
    assert val2 == pytest.approx(-obj.loglik(prm) - np.trace(J @ Hinv),
                                 rel=1e-6)


def test_clic_rejects_full_objective():
    prm, ds = sim(p=2, n=20, seed=17)
    graph = nearest_neighbors(ds.locations, 2)
    with pytest.raises(ValueError):
        clic(make_fit_result(prm), ds, graph, ClicConfig(),
             objective=FullObjective(ds))


# ---------------------------------------------------------------------------
# path and selection
# ---------------------------------------------------------------------------

def test_select_lambda_ties_towards_larger():
    path = PathResult(lams=np.array([3.0, 2.0, 1.0]),
                      fits=[None, None, None],
                      criteria=np.array([5.0, 5.0, 5.0]),
                      sparsity_L=np.zeros(3), sparsity_Psi=np.zeros(3))
    assert select_lambda(path) == 0
    path.criteria = np.array([np.nan, 7.0, 2.0])
    assert select_lambda(path) == 2
    path.criteria = np.full(3, np.nan)
    with pytest.raises(ValueError):
        select_lambda(path)


def test_solution_path_full_small():
    prm, ds = sim(p=3, n=40, seed=18)
    config = FitConfig(kind=ObjectiveKind("full"), estimate_nugget=False,
                       max_outer_iter=15, tol_rel=1e-4)
    grid = lambda_grid(lambda_max(ds, ObjectiveKind("full"),
                                  estimate_nugget=False) * 1.0001, count=4)
    path = solution_path(ds, grid=grid, config=config)
    assert len(path.fits) == 4
    # first fit at lambda >= lambda_max: fully sparse off-diagonal
    assert path.sparsity_L[0] == 1.0
    assert path.criterion_name == "aic"
    assert path.selected is not None
    # Psi sparsity never below the L pattern closure
    for k, f in enumerate(path.fits):
        if f is None:
            continue
        assert path.sparsity_Psi[k] <= path.sparsity_L[k] + 1e-12


def test_path_csv_round_trip(tmp_path):
    prm, ds = sim(p=2, n=30, seed=19)
    config = FitConfig(kind=ObjectiveKind("full"), estimate_nugget=False,
                       max_outer_iter=8, tol_rel=1e-3)
    grid = lambda_grid(5.0, count=3)
    path = solution_path(ds, grid=grid, config=config,
                         compute_criterion=False)
    out = tmp_path / "path.csv"
    path.to_csv(out)
    rows = out.read_text().strip().split("\n")
    assert rows[0].startswith("lambda,")
    assert len(rows) == 4
