import numpy as np
import pytest

from maternlasso.spatial_data import (
    NeighborGraph,
    SpatialDataset,
    empirical_cross_variogram,
    load_dataset,
    nearest_neighbors,
    normal_score_transform,
    pairwise_distances,
    save_dataset,
    train_test_split,
)

rng = np.random.default_rng(99)


def make_dataset(n=20, p=2):
    locs = rng.uniform(0, 1, (n, 2))
    vals = rng.normal(size=(n, p))
    return SpatialDataset(locs, vals, [f"v{i}" for i in range(p)])


def test_dataset_shape_validation():
    with pytest.raises(ValueError, match="row count"):
        SpatialDataset(np.zeros((3, 2)), np.zeros((4, 1)), ["a"])
    with pytest.raises(ValueError, match="name"):
        SpatialDataset(np.zeros((3, 2)) + np.arange(3)[:, None],
                       np.zeros((3, 2)), ["a"])


def test_duplicate_locations_rejected_with_rows():
    locs = np.array([[0.1, 0.2], [0.5, 0.5], [0.1, 0.2]])
    with pytest.raises(ValueError, match="rows 0 and 2"):
        SpatialDataset(locs, np.zeros((3, 1)), ["a"])


def test_stacked_by_variable():
    ds = make_dataset(4, 3)
    z = ds.stacked("by-variable")
    # index i*n + k
    for i in range(3):
        for k in range(4):
            assert z[i * 4 + k] == ds.values[k, i]


def test_csv_round_trip(tmp_path):
    ds = make_dataset(15, 3)
    path = tmp_path / "data.csv"
    save_dataset(ds, path)
    back = load_dataset(path, ["x0", "x1"], ds.names)
    np.testing.assert_array_equal(back.locations, ds.locations)
    np.testing.assert_array_equal(back.values, ds.values)


def test_load_errors_name_the_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,a\n0.1,0.2,3.0\n0.3,oops,4.0\n")
    with pytest.raises(ValueError, match="row 3.*'y'"):
        load_dataset(path, ["x", "y"], ["a"])
    path.write_text("x,y,a\n")
    out = None
    with pytest.raises(ValueError):
        load_dataset(path, ["x", "y"], ["b"])  # missing column b
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_dataset(path, ["x", "y"], ["a"])


def test_pairwise_distances():
    locs = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    d = pairwise_distances(locs)
    assert d[0, 1] == pytest.approx(5.0)
    assert d[0, 2] == pytest.approx(1.0)
    np.testing.assert_array_equal(np.diag(d), 0.0)
    np.testing.assert_allclose(d, d.T)


def test_nearest_neighbors_and_pair_dedup():
    # four collinear points: neighbor lists overlap heavily
    locs = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    g = nearest_neighbors(locs, 1)
    assert g.neighbors[0] == [1]
    assert g.neighbors[3] == [2]
    # 1's nearest is 0 (tie with 2 broken by index)
    assert g.neighbors[1] == [0]
    pairs = g.pair_set()
    assert pairs == [(0, 1), (1, 2), (2, 3)]
    # pairs entering from both sides appear once
    assert len(pairs) == len(set(pairs))


def test_nearest_neighbors_v_larger_than_n():
    locs = rng.uniform(0, 1, (4, 2))
    g = nearest_neighbors(locs, 10)
    assert all(len(nb) == 3 for nb in g.neighbors)
    # all pairs present
    assert len(g.pair_set()) == 6


def test_normal_scores_oracle_n3():
    # ranks 1,2,3 -> quantiles at 1/6, 1/2, 5/6; Phi^-1(5/6) = 0.96742...
    scores, table = normal_score_transform(np.array([10.0, -3.0, 4.0]))
    np.testing.assert_allclose(sorted(scores),
                               [-0.9674215661017014, 0.0, 0.9674215661017014],
                               rtol=1e-12)
    # monotone and invertible on the observed values
    np.testing.assert_allclose(table.inverse(scores), [10.0, -3.0, 4.0])


def test_normal_scores_statistics():
    x = rng.gamma(2.0, size=400)
    scores, table = normal_score_transform(x)
    assert abs(np.mean(scores)) < 1e-10
    assert np.std(scores) == pytest.approx(1.0, abs=0.05)
    # forward map reproduces scores
    np.testing.assert_allclose(table.forward(x), scores, atol=1e-10)


def test_normal_scores_errors():
    with pytest.raises(ValueError):
        normal_score_transform(np.array([1.0]))
    with pytest.raises(ValueError):
        normal_score_transform(np.array([2.0, 2.0, 2.0]))
    with pytest.raises(ValueError):
        normal_score_transform(np.array([1.0, np.nan]))


def test_train_test_split_reproducible_and_disjoint():
    ds = make_dataset(30, 2)
    tr1, te1 = train_test_split(ds, 10, seed=5)
    tr2, te2 = train_test_split(ds, 10, seed=5)
    np.testing.assert_array_equal(te1.locations, te2.locations)
    assert tr1.n == 20 and te1.n == 10
    joined = np.vstack([tr1.locations, te1.locations])
    assert np.unique(joined, axis=0).shape[0] == 30
    with pytest.raises(ValueError):
        train_test_split(ds, 30)


def test_cross_variogram_two_point_oracle():
    # two points in one bin: gamma = (z(s1)-z(s2))^2 / 2 for i=j
    locs = np.array([[0.0, 0.0], [0.5, 0.0]])
    vals = np.array([[1.0], [4.0]])
    ds = SpatialDataset(locs, vals, ["a"])
    est = empirical_cross_variogram(ds, 0, 0, np.array([0.0, 1.0]))
    assert est.semivariance[0] == pytest.approx(4.5)
    assert est.counts[0] == 1


def test_cross_variogram_empty_bins_nan():
    ds = make_dataset(10, 2)
    est = empirical_cross_variogram(ds, 0, 1, np.array([10.0, 11.0, 12.0]))
    assert np.all(np.isnan(est.semivariance))
    assert np.all(est.counts == 0)
    with pytest.raises(ValueError):
        empirical_cross_variogram(ds, 0, 1, np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        empirical_cross_variogram(ds, 0, 5, np.array([0.0, 1.0]))
