import numpy as np
import pytest

from maternlasso.matern import (
    BlockOrdering,
    MaternParams,
    assemble_full_covariance,
)
from maternlasso.simulate import (
    experiment_4_1_config,
    experiment_config,
    make_band_R,
    sample_locations_uniform,
    simulate_field,
)


def test_sample_locations_in_box_and_reproducible():
    a = sample_locations_uniform(500, seed=42)
    b = sample_locations_uniform(500, seed=42)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (500, 2)
    assert a.min() >= 0.0 and a.max() <= 1.0
    # uniform moment bound on the mean
    assert abs(a.mean() - 0.5) < 3.0 / np.sqrt(12 * 500)
    c = sample_locations_uniform(100, seed=7, low=-2.0, high=3.0)
    assert c.min() >= -2.0 and c.max() <= 3.0
    with pytest.raises(ValueError):
        sample_locations_uniform(0)
    with pytest.raises(ValueError):
        sample_locations_uniform(10, low=1.0, high=1.0)


def test_simulate_reproducible_and_shape():
    prm = experiment_config(p=3)
    locs = sample_locations_uniform(40, seed=1)
    a = simulate_field(prm, locs, seed=9)
    b = simulate_field(prm, locs, seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.n == 40 and a.p == 3
    c = simulate_field(prm, locs, seed=10)
    assert np.any(c.values != a.values)


def test_simulate_affine_scaling_same_seed():
    # scaling Sigma by c^2 scales the draw by c exactly (same normal stream)
    prm = experiment_config(p=2)
    scaled = prm.copy()
    c = 3.0
    scaled.sigma2 = prm.sigma2 * c**2
    scaled.L = prm.L * c
    locs = sample_locations_uniform(25, seed=2)
    z1 = simulate_field(prm, locs, seed=5).values
    z2 = simulate_field(scaled, locs, seed=5).values
    np.testing.assert_allclose(z2, c * z1, rtol=1e-10)


def test_simulate_pure_nugget_iid():
    prm = MaternParams(sigma2=[1e-8, 1e-8], alpha=[1.0, 1.0],
                       tau2=[1.0, 1.0], nu=0.5,
                       L=np.diag([1e-4, 1e-4]))
    locs = sample_locations_uniform(400, seed=3)
    ds = simulate_field(prm, locs, seed=4)
    # columns statistically standard normal and uncorrelated
    assert abs(ds.values.mean()) < 0.1
    assert np.std(ds.values) == pytest.approx(1.0, abs=0.1)
    r = np.corrcoef(ds.values.T)[0, 1]
    assert abs(r) < 0.15


def test_simulate_orderings_same_distribution_fixed_locations():
    prm = experiment_config(p=2)
    locs = sample_locations_uniform(10, seed=6)
    by_var = simulate_field(prm, locs, seed=8,
                            ordering=BlockOrdering.BY_VARIABLE)
    by_loc = simulate_field(prm, locs, seed=8,
                            ordering=BlockOrdering.BY_LOCATION)
    # different stacking of the same stream: values differ but both valid
    assert by_var.values.shape == by_loc.values.shape


def test_monte_carlo_covariance_small():
    # cheap version of the distributional check: p=2, n=4, 1500 draws
    prm = experiment_config(p=2, delta_b=10.0)
    locs = sample_locations_uniform(4, seed=21)
    sigma = assemble_full_covariance(prm, locs, BlockOrdering.BY_VARIABLE)
    draws = np.empty((1500, 8))
    for r in range(1500):
        draws[r] = simulate_field(prm, locs, seed=5000 + r).values.T.reshape(-1)
    emp = np.cov(draws.T)
    assert np.abs(emp - sigma).max() < 0.25


def test_make_band_R():
    R = make_band_R(5, 0.5)
    assert R.shape == (5, 5)
    np.testing.assert_array_equal(np.diag(R), 1.0)
    np.testing.assert_array_equal(np.diag(R, 1), 0.5)
    np.testing.assert_array_equal(np.diag(R, 2), 0.0)
    np.testing.assert_array_equal(R, R.T)
    np.testing.assert_array_equal(make_band_R(4, 0.0), np.eye(4))
    # PSD at half-band weight for a range of sizes
    for p in (2, 10, 50):
        assert np.linalg.eigvalsh(make_band_R(p, 0.5)).min() > -1e-12
    with pytest.raises(ValueError):
        make_band_R(3, 1.2)


def test_experiment_config_values():
    prm, domain, n = experiment_4_1_config()
    assert n == 500
    assert domain == (0.0, 1.0)
    np.testing.assert_allclose(prm.sigma2, [0.5, 1.0, 1.5, 2.0, 2.5])
    np.testing.assert_allclose(prm.alpha, [10.0, 20 / 3, 5.0, 4.0, 10 / 3],
                               rtol=1e-12)
    assert prm.delta_b == 60.0
    assert prm.nu == 0.5
    np.testing.assert_array_equal(prm.tau2, 0.0)
    psi = prm.psi
    assert psi[0, 1] == pytest.approx(np.sqrt(0.5 * 1.0) * 0.5, rel=1e-10)
    assert abs(psi[0, 2]) < 1e-12
    np.testing.assert_allclose(prm.rb, make_band_R(5, 0.5), atol=1e-12)
    prm.validate()
