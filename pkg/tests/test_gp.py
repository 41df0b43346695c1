from __future__ import annotations

import math

import numpy as np
import pytest

from nnucb import gp, kernels, neural
from nnucb.errors import ArgumentError, NumericalError
from nnucb.gp import FeaturePosteriorState, PosteriorState
from nnucb.kernels import KernelSpec


def sphere(n, d, seed=0):
    return kernels.sample_sphere(np.random.default_rng(seed), n, d)


def ridge_predict(X, y, Xq, spec, lam):
    K = kernels.gram(X, spec)
    alpha = np.linalg.solve(K + lam * np.eye(len(X)), y)
    return kernels.cross_gram(Xq, X, spec) @ alpha


# ---------------------------------------------------------------- exact posterior

def test_empty_state_is_prior():
    s = PosteriorState(KernelSpec(), 0.5)
    assert s.posterior(sphere(1, 3)[0]) == (0.0, 1.0)


def test_one_observation_closed_form():
    x = sphere(1, 4)[0]
    s = PosteriorState(KernelSpec("ntk", 2), 1.0).extend(x, 3.0)
    mean, std = s.posterior(x)
    assert mean == pytest.approx(1.5, abs=1e-12)
    assert std == pytest.approx(math.sqrt(0.5), abs=1e-12)


@pytest.mark.parametrize("kind", ["ntk", "cntk"])
def test_posterior_mean_equals_ridge(kind):
    spec = KernelSpec(kind, 2)
    for inst in range(20):
        rng = np.random.default_rng(inst)
        X = sphere(10, 5, seed=inst)
        y = rng.normal(size=10)
        s2 = float(rng.uniform(0.05, 2.0))
        Xq = sphere(7, 5, seed=1000 + inst)
        mean, _ = PosteriorState.from_data(X, y, spec, s2).posterior_batch(Xq)
        assert np.max(np.abs(mean - ridge_predict(X, y, Xq, spec, s2))) <= 1e-10


def test_posterior_std_matches_direct_formula():
    spec = KernelSpec("ntk", 1)
    X, Xq = sphere(8, 3, 1), sphere(5, 3, 2)
    y = np.arange(8.0)
    s = PosteriorState.from_data(X, y, spec, 0.3)
    _, std = s.posterior_batch(Xq)
    K = kernels.gram(X, spec) + 0.3 * np.eye(8)
    k = kernels.cross_gram(X, Xq, spec)
    var = 1.0 - np.einsum("ij,ij->j", k, np.linalg.solve(K, k))
    np.testing.assert_allclose(std, np.sqrt(var), atol=1e-10)


def test_incremental_matches_batch():
    spec = KernelSpec("ntk", 2)
    X = sphere(10, 4, 3)
    y = np.random.default_rng(3).normal(size=10)
    s = PosteriorState(spec, 0.1)
    for x, v in zip(X, y):
        s = s.extend(x, v)
    b = PosteriorState.from_data(X, y, spec, 0.1)
    assert np.max(np.abs(s.chol - b.chol)) <= 1e-9
    np.testing.assert_allclose(s.chol @ s.chol.T, kernels.gram(X, spec) + 0.1 * np.eye(10), atol=1e-8)
    assert len(s.points) == len(s.rewards) == s.chol.shape[0] == 10


def test_extend_is_functional_unless_inplace():
    s = PosteriorState(KernelSpec(), 1.0)
    x = sphere(1, 3)[0]
    t = s.extend(x, 1.0)
    assert len(s) == 0 and len(t) == 1
    s.extend(x, 1.0, inplace=True)
    assert len(s) == 1


def test_duplicate_point_schur_complement():
    # bordering with an already observed x leaves sigma^2 + var_{t-1}(x)
    spec = KernelSpec("ntk", 1)
    X = sphere(5, 3, 4)
    s = PosteriorState.from_data(X, np.ones(5), spec, 0.2)
    _, std = s.posterior(X[2])
    t = s.extend(X[2], 1.0)
    assert t.last_schur == pytest.approx(0.2 + std ** 2, abs=1e-9)


def test_posterior_std_never_exceeds_prior():
    spec = KernelSpec("ntk", 3)
    s = PosteriorState.from_data(sphere(30, 3, 5), np.zeros(30), spec, 0.01)
    _, std = s.posterior_batch(sphere(200, 3, 6))
    assert np.all(std <= 1.0 + 1e-12)


def test_posterior_permutation_invariant():
    spec = KernelSpec("ntk", 2)
    X = sphere(12, 4, 7)
    y = np.random.default_rng(7).normal(size=12)
    perm = np.random.default_rng(8).permutation(12)
    Xq = sphere(6, 4, 9)
    a = PosteriorState.from_data(X, y, spec, 0.5).posterior_batch(Xq)
    b = PosteriorState.from_data(X[perm], y[perm], spec, 0.5).posterior_batch(Xq)
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    np.testing.assert_allclose(a[1], b[1], atol=1e-9)


def test_negative_variance_beyond_tolerance_raises():
    with pytest.raises(NumericalError):
        gp._clip_variance(np.array([0.1, -1e-6]))
    np.testing.assert_array_equal(gp._clip_variance(np.array([-1e-10, 0.5])), [0.0, 0.5])


def test_nonpositive_schur_raises():
    ch = gp._GrowingCholesky(1e-12)
    ch.append(np.zeros(0), 1.0, 0.0)
    with pytest.raises(NumericalError):
        ch.append(np.array([2.0]), 1.0, 0.0)


def test_state_validation():
    with pytest.raises(ArgumentError):
        PosteriorState(KernelSpec(), 0.0)
    s = PosteriorState(KernelSpec(), 1.0).extend(sphere(1, 3)[0], 0.0)
    with pytest.raises(ArgumentError):
        s.posterior(sphere(1, 4)[0])


# ---------------------------------------------------------------- feature posterior

def features(n, d=3, m=64, L=1, seed=0, data_seed=1):
    p = neural.gaussian_init(d, m, L, seed)
    X = sphere(n, d, data_seed)
    return p, X, neural.feature_batch(p, X).scaled(1 / math.sqrt(m * (L + 1)))


def test_feature_posterior_prior_is_kernel_diagonal():
    p, X, phi = features(10, m=4096)
    _, std = FeaturePosteriorState(0.3).posterior(phi)
    assert np.all(np.abs(std - 1.0) <= 0.05)


@pytest.mark.parametrize("mode", ["dual", "primal"])
def test_feature_posterior_equals_empirical_kernel_gp(mode):
    m, L = 32, 2
    p, X, phi = features(16, m=m, L=L, seed=5)
    y = np.random.default_rng(2).normal(size=12)
    fs = FeaturePosteriorState(0.4, mode)
    for i in range(12):
        fs.extend(phi.take([i]), y[i])
    mean, std = fs.posterior(phi.take(range(12, 16)))
    spec = KernelSpec("empirical_ntk", L, width=m, seed=5)
    ref = PosteriorState.from_data(X[:12], y, spec, 0.4)
    rmean, rstd = ref.posterior_batch(X[12:])
    np.testing.assert_allclose(std, rstd, atol=1e-8)
    np.testing.assert_allclose(mean, rmean, atol=1e-8)


def test_primal_z_hat_is_spd_and_consistent():
    _, _, phi = features(6, m=8)
    fs = FeaturePosteriorState(0.25, "primal")
    for i in range(6):
        fs.extend(phi.take([i]), float(i))
    D = phi.to_dense()
    np.testing.assert_allclose(fs.Z_hat, 0.25 * np.eye(D.shape[1]) + D.T @ D, atol=1e-12)
    np.testing.assert_allclose(fs.b, D.T @ np.arange(6.0), atol=1e-12)
    assert np.min(np.linalg.eigvalsh(fs.Z_hat)) >= 0.25 - 1e-9
    with pytest.raises(ArgumentError):
        FeaturePosteriorState(0.25).Z_hat


def test_diag_proxy_is_within_an_order_of_magnitude():
    _, _, phi = features(30, m=16, seed=3)
    exact, approx = FeaturePosteriorState(0.1), FeaturePosteriorState(0.1, "diag")
    for i in range(20):
        exact.extend(phi.take([i]), 0.0)
        approx.extend(phi.take([i]), 0.0)
    assert approx.approximate and not exact.approximate
    q = phi.take(range(20, 30))
    ratio = approx.posterior(q)[1] / exact.posterior(q)[1]
    assert np.all((ratio >= 0.1) & (ratio <= 10))


def test_trained_mean_overrides_ridge_mean():
    _, _, phi = features(3)
    fs = FeaturePosteriorState(1.0)
    fs.extend(phi.take([0]), 1.0)
    mean, std = gp.feature_posterior(fs, phi.take([1]), trained_mean=0.25)
    assert mean == 0.25 and std > 0


# ---------------------------------------------------------------- information gain

def test_info_gain_logdet_examples():
    assert gp.info_gain_logdet([[1.0]], 1.0) == pytest.approx(0.5 * math.log(2))
    assert gp.info_gain_logdet(np.zeros((4, 4)), 0.3) == 0.0
    T, s2 = 7, 0.5
    assert gp.info_gain_logdet(np.ones((T, T)), s2) == pytest.approx(0.5 * math.log(1 + T / s2))


def test_info_gain_increment_examples():
    assert gp.info_gain_increment(0.0, 1.0) == 0.0
    assert gp.info_gain_increment(1.0, 1.0) == pytest.approx(0.5 * math.log(2))


def test_chain_rule_identity():
    spec = KernelSpec("ntk", 2)
    for seed in range(10):
        X = sphere(50, 4, seed)
        s = PosteriorState(spec, 0.2)
        total = 0.0
        for x in X:
            total += gp.info_gain_increment(s.posterior(x)[1], 0.2)
            s.extend(x, 0.0, inplace=True)
        assert abs(total - gp.info_gain_logdet(kernels.gram(X, spec), 0.2)) <= 1e-8


def test_greedy_curve_first_step_and_subset_logdet():
    spec = KernelSpec("ntk", 2)
    pool = sphere(300, 3, 4)
    tr = gp.greedy_info_gain_curve(pool, spec, 0.5, 100)
    assert tr.cumulative[0] == pytest.approx(0.5 * math.log(1 + 1 / 0.5))
    assert len(set(tr.selected.tolist())) == 100
    ref = gp.info_gain_logdet(kernels.gram(pool[tr.selected], spec), 0.5)
    assert tr.cumulative[-1] == pytest.approx(ref, abs=1e-8)
    assert np.all(tr.per_step >= 0) and np.all(np.diff(tr.cumulative) >= 0)


def test_greedy_curve_picks_max_variance():
    spec = KernelSpec("ntk", 1)
    pool = sphere(40, 3, 1)
    tr = gp.greedy_info_gain_curve(pool, spec, 1.0, 5)
    s = PosteriorState(spec, 1.0)
    for t in range(5):
        _, std = s.posterior_batch(pool)
        std[tr.selected[:t]] = -1
        assert tr.selected[t] == int(np.argmax(std))
        s.extend(pool[tr.selected[t]], 0.0, inplace=True)


def test_greedy_curve_exhausted_pool():
    with pytest.raises(ArgumentError):
        gp.greedy_info_gain_curve(sphere(3, 3), KernelSpec(), 1.0, 4)
