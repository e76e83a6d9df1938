import numpy as np
import pytest

from anchormix.core import AnchorSet, PriorSpec
from anchormix.errors import AnchorMixError, ValidationError
from anchormix.gibbs import (
    PosteriorDraws,
    SamplerConfig,
    allocation_table,
    gibbs_fit,
    read_draws_csv,
    summarize,
    table_block,
    write_draws_csv,
)
from oracles import batch_means_se, geweke_check


def test_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(chains=0)
    with pytest.raises(ValidationError):
        SamplerConfig(chains=2, iterations=100, burn_in=100)
    with pytest.raises(ValidationError):
        SamplerConfig(chains=2, iterations=100, burn_in=50, target_draws=101)


def test_kept_iterations_evenly_spaced():
    c = SamplerConfig(chains=3, iterations=110, burn_in=10, target_draws=10)
    kept = [c.kept_iterations(j) for j in range(3)]
    assert [len(k) for k in kept] == [4, 3, 3]
    assert kept[0].tolist() == [34, 59, 84, 109]
    assert all(k.min() >= 10 and k.max() < 110 for k in kept)


def test_single_component_normal_wishart_conjugate(rng):
    n, p = 25, 2
    y = rng.normal(size=(n, p)) @ np.array([[1.0, 0.3], [0.0, 0.7]]) + [1.0, -2.0]
    m0, kappa, nu = np.array([0.5, 0.0]), 0.7, 6.0
    W = np.array([[0.8, 0.1], [0.1, 1.2]])
    prior = PriorSpec.normal_wishart(m0, kappa, nu, W)
    draws = gibbs_fit(y, AnchorSet(((),)), prior, SamplerConfig(chains=2, iterations=6000, burn_in=100,
                                                                 target_draws=5800, seed=5))
    ybar = y.mean(axis=0)
    S = (y - ybar).T @ (y - ybar)
    post_mean = (kappa * m0 + n * ybar) / (kappa + n)
    psi_n = np.linalg.inv(W) + S + kappa * n / (kappa + n) * np.outer(ybar - m0, ybar - m0)
    post_cov = psi_n / (nu + n - p - 1)
    for d in range(p):
        x = draws.means[:, 0, d]
        assert abs(x.mean() - post_mean[d]) < 3 * batch_means_se(x)
    for a in range(p):
        for b in range(p):
            x = draws.covs[:, 0, a, b]
            assert abs(x.mean() - post_cov[a, b]) < 3 * batch_means_se(x)
    np.testing.assert_allclose(draws.weights, 1.0, rtol=1e-15)


def test_fully_anchored_allocations_fixed(rng):
    y = rng.normal(size=6)[:, None]
    anchors = AnchorSet(((0, 3, 4), (1, 2, 5)))
    prior = PriorSpec.normal_gamma(0.0, 0.1, 2.0, rate=1.0)
    draws = gibbs_fit(y, anchors, prior, SamplerConfig(chains=2, iterations=50, burn_in=10, target_draws=20))
    assert np.all(draws.alloc == anchors.labels(6)[None, :])
    names, table = allocation_table(draws, ["a", "b", "b", "a", "a", "b"])
    assert names == ["a", "b"]
    np.testing.assert_array_equal(table, [[1.0, 0.0], [0.0, 1.0]])


def test_anchored_rows_stay_put_and_order_is_kept(rng, galaxies_prior):
    y = np.concatenate([rng.normal(10, 1, 10), rng.normal(25, 1, 10)])
    anchors = AnchorSet(((0,), (10,)))
    draws = gibbs_fit(y, anchors, galaxies_prior.__class__.normal_gamma(17.5, 1e-3, 2.0, rate=1.0),
                      SamplerConfig(chains=2, iterations=500, burn_in=100, target_draws=400, seed=1))
    assert np.all(draws.alloc[:, 0] == 0) and np.all(draws.alloc[:, 10] == 1)
    m = draws.means[:, :, 0].mean(axis=0)
    assert m[0] == pytest.approx(10, abs=1) and m[1] == pytest.approx(25, abs=1)


def test_deterministic_and_worker_invariant(rng):
    y = np.concatenate([rng.normal(-2, 1, 15), rng.normal(2, 1, 15)])
    prior = PriorSpec.normal_gamma(0.0, 0.1, 2.0, rate_hyper=(2.0, 1.0))
    cfg = SamplerConfig(chains=3, iterations=200, burn_in=50, target_draws=90, seed=9)
    a = gibbs_fit(y, AnchorSet(((0,), (20,))), prior, cfg)
    b = gibbs_fit(y, AnchorSet(((0,), (20,))), prior, cfg, workers=3)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.rate, b.rate)
    np.testing.assert_array_equal(a.alloc, b.alloc)


def test_needs_enough_anchor_sets():
    with pytest.raises(ValidationError):
        gibbs_fit(np.arange(5.0), AnchorSet(((0,), (), ())), PriorSpec.normal_gamma(0.0, 1.0, 2.0, rate=1.0),
                  SamplerConfig(chains=1, iterations=10, burn_in=1, target_draws=5))


def make_draws(D=40, k=2, n=4, seed=0):
    r = np.random.default_rng(seed)
    anchors = AnchorSet(((0,), (1,)))
    alloc = r.integers(0, k, size=(D, n)).astype(np.int16)
    alloc[:, 0], alloc[:, 1] = 0, 1
    covs = r.uniform(0.5, 2, size=(D, k))[:, :, None, None]
    return PosteriorDraws(r.normal(size=(D, k, 1)), covs, r.dirichlet(np.ones(k), size=D), r.gamma(2, 1, size=D),
                          alloc, np.repeat(np.arange(2), D // 2), np.tile(np.arange(1, D // 2 + 1), 2), anchors)


def test_draws_leaving_support_are_rejected():
    d = make_draws()
    alloc = d.alloc.copy()
    alloc[3, 0] = 1
    with pytest.raises(AnchorMixError):
        PosteriorDraws(d.means, d.covs, d.weights, d.rate, alloc, d.chain, d.iteration, d.anchors)


def test_summary_of_constant_draws():
    d = make_draws()
    const = PosteriorDraws(np.full_like(d.means, 3.0), np.full_like(d.covs, 4.0), np.full_like(d.weights, 0.5),
                           np.full_like(d.rate, 1.5), d.alloc, d.chain, d.iteration, d.anchors)
    s = summarize(const)
    assert s["theta"]["mean"] == [[3.0], [3.0]] and s["theta"]["sd"] == [[0.0], [0.0]]
    assert s["sigma"]["mean"] == [2.0, 2.0]
    assert s["b0"] == {"mean": 1.5, "sd": 0.0}
    assert s["densities"]["theta"][0][0]["point_mass"] == 3.0
    assert table_block(s)["theta"][0] == ["3.000 (0.00)", "3.000 (0.00)"]


def test_summary_is_order_invariant():
    d = make_draws()
    perm = np.random.default_rng(1).permutation(d.size)
    e = PosteriorDraws(d.means[perm], d.covs[perm], d.weights[perm], d.rate[perm], d.alloc[perm], d.chain[perm],
                       d.iteration[perm], d.anchors)
    a, b = summarize(d, densities=False), summarize(e, densities=False)
    for key in ("theta", "sigma2", "sigma", "weights"):
        np.testing.assert_allclose(a[key]["mean"], b[key]["mean"], rtol=1e-12)
        np.testing.assert_allclose(a[key]["sd"], b[key]["sd"], rtol=1e-12)


def test_allocation_rows_sum_to_one():
    d = make_draws()
    names, table = allocation_table(d, ["x", "y", "x", "z"])
    assert names == ["x", "y", "z"]
    np.testing.assert_allclose(table.sum(axis=1), 1.0)
    with pytest.raises(ValidationError):
        allocation_table(d, ["x"])


def test_draws_csv_round_trip(tmp_path):
    d = make_draws()
    path = tmp_path / "draws.csv"
    write_draws_csv(d, path)
    header = path.read_text().splitlines()[1].split(",")
    assert header[:4] == ["chain", "iter", "theta_1", "theta_2"]
    assert header[-4:] == ["s_1", "s_2", "s_3", "s_4"]
    back = read_draws_csv(path, d.anchors, 1)
    np.testing.assert_array_equal(back.means, d.means)
    np.testing.assert_array_equal(back.covs, d.covs)
    np.testing.assert_array_equal(back.rate, d.rate)
    np.testing.assert_array_equal(back.alloc, d.alloc)


def test_joint_distribution_geweke():
    ok, zs = geweke_check(iterations=20_000, seed=3)
    assert ok, zs
