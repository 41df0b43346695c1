from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from nnucb import envs, kernels, neural, policies
from nnucb.config import config_from_dict
from nnucb.errors import ArgumentError, TraceError
from nnucb.experiment import run_experiment
from nnucb.gp import PosteriorState
from nnucb.kernels import KernelSpec
from nnucb.policies import (BetaSchedule, KernelUCB, NeuralUCB, RandomPolicy, SupKernelUCB, SupNeuralUCB,
                            beta_value, sup_levels, sup_step, ucb_step)
from nnucb.report import verify_trace


def sphere(n, d, seed=0):
    return kernels.sample_sphere(np.random.default_rng(seed), n, d)


def make_env(d=3, A=4, s2=1.0, seed=0, kind="ntk"):
    r = envs.rkhs_env(d, 1.0, 10, KernelSpec(kind, 1), seed=seed)
    return envs.Environment(r, A, d, envs.NoiseModel("gaussian", math.sqrt(s2)), seed=seed + 50)


def play(policy, env, T):
    out = []
    for t in range(1, T + 1):
        c = env.next_context()
        dec = policy.select(c, t)
        obs = env.observe(dec.action)
        policy.update(c, dec, obs.reward)
        out.append((c, dec, obs.reward))
    return out


# ---------------------------------------------------------------- beta

def test_beta_examples():
    assert beta_value(BetaSchedule("const", 0.1, 10, 100), 7) == pytest.approx(2 * math.log(20000))
    assert beta_value(BetaSchedule("const", 0.1, 10, 100), 7) == pytest.approx(19.807, abs=1e-3)
    assert beta_value(BetaSchedule("gp", 0.1, 10), 1) == pytest.approx(10.2057, abs=1e-3)
    assert beta_value(BetaSchedule("fixed", value=0.3), 99) == 0.3


def test_beta_gp_is_increasing_in_t_and_decreasing_in_delta():
    s = BetaSchedule("gp", 0.1, 5)
    vals = [beta_value(s, t) for t in range(1, 50)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert beta_value(BetaSchedule("gp", 0.01, 5), 3) > beta_value(s, 3)


@pytest.mark.parametrize("kw", [{"mode": "gp", "delta": 0.0}, {"mode": "const", "delta": 1.0},
                                {"mode": "fixed"}, {"mode": "fixed", "value": -1.0}, {"mode": "eps"}])
def test_beta_schedule_validation(kw):
    with pytest.raises(ArgumentError):
        BetaSchedule(**kw)


def test_beta_rejects_t_zero():
    with pytest.raises(ArgumentError):
        beta_value(BetaSchedule(), 0)


# ---------------------------------------------------------------- kernel UCB step

def test_empty_history_picks_first_action():
    dec = ucb_step(PosteriorState(KernelSpec(), 0.5), sphere(4, 3), 2.0)
    assert dec.action == 0
    np.testing.assert_array_equal(dec.means, 0.0)
    np.testing.assert_array_equal(dec.stds, 1.0)


def test_beta_zero_is_greedy():
    X = sphere(15, 3, 1)
    s = PosteriorState.from_data(X, np.random.default_rng(1).normal(size=15), KernelSpec("ntk", 2), 0.2)
    ctx = sphere(6, 3, 2)
    dec = ucb_step(s, ctx, 0.0)
    assert dec.action == int(np.argmax(s.posterior_batch(ctx)[0]))


def test_hand_example_orthogonal_pair():
    ctx = np.eye(2)
    s = PosteriorState(KernelSpec("ntk", 1), 1.0).extend(ctx[0], 1.0)
    dec = ucb_step(s, ctx, 1.0)
    k = 1 / (2 * math.pi)
    np.testing.assert_allclose(dec.means, [0.5, k / 2], atol=1e-12)
    np.testing.assert_allclose(dec.stds, [math.sqrt(0.5), math.sqrt(1 - k * k / 2)], atol=1e-12)
    assert dec.ucb[0] == pytest.approx(0.5 + math.sqrt(0.5))
    assert dec.action == 0


def test_constant_reward_shift_shifts_ucb():
    X = sphere(10, 3, 3)
    y = np.random.default_rng(3).normal(size=10)
    ctx = sphere(5, 3, 4)
    spec = KernelSpec("ntk", 1)
    a = ucb_step(PosteriorState.from_data(X, y, spec, 0.3), ctx, 2.0)
    b = ucb_step(PosteriorState.from_data(X, y + 5.0, spec, 0.3), ctx, 2.0)
    # the mean moves by 5 * k(x)^T (K + s2 I)^{-1} 1, identically for both runs
    shift = PosteriorState.from_data(X, np.full(10, 5.0), spec, 0.3).posterior_batch(ctx)[0]
    np.testing.assert_allclose(b.ucb - a.ucb, shift, atol=1e-10)
    np.testing.assert_allclose(b.stds, a.stds, atol=1e-15)


def test_kernel_ucb_deterministic():
    runs = [[d.action for _, d, _ in play(KernelUCB(KernelSpec(), 1.0, BetaSchedule("gp", 0.1, 4)),
                                          make_env(), 30)] for _ in range(2)]
    assert runs[0] == runs[1]


def test_cntk_ucb_invariant_to_shifting_contexts():
    spec = KernelSpec("cntk", 1)
    env = make_env(d=5, kind="cntk")
    rng = np.random.default_rng(9)
    sched = BetaSchedule("gp", 0.1, 4)
    base, shifted = KernelUCB(spec, 1.0, sched), KernelUCB(spec, 1.0, sched)
    for t in range(1, 31):
        c = env.next_context()
        cs = np.stack([kernels.cyclic_shift(row, int(rng.integers(5))) for row in c])
        a, b = base.select(c, t), shifted.select(cs, t)
        assert a.action == b.action
        np.testing.assert_allclose(a.ucb, b.ucb, atol=1e-9)
        r = env.observe(a.action).reward
        base.update(c, a, r)
        shifted.update(cs, b, r)


def test_cntk_equals_ntk_for_one_dimensional_contexts():
    X = np.array([[1.0], [-1.0], [1.0]])
    for L in (1, 2):
        np.testing.assert_allclose(kernels.gram(X, KernelSpec("cntk", L)), kernels.gram(X, KernelSpec("ntk", L)),
                                   atol=1e-15)
    ctx = np.array([[1.0], [-1.0]])
    ys = [0.3, -0.2, 0.8]
    s1, s2 = PosteriorState(KernelSpec("cntk", 1), 0.5), PosteriorState(KernelSpec("ntk", 1), 0.5)
    for y in ys:
        a, b = ucb_step(s1, ctx, 1.0), ucb_step(s2, ctx, 1.0)
        assert a.action == b.action
        s1 = s1.extend(ctx[a.action], y)
        s2 = s2.extend(ctx[b.action], y)


# ---------------------------------------------------------------- Sup structure

def test_sup_levels_values():
    assert sup_levels(1) == 1
    assert sup_levels(2) == 1
    assert sup_levels(500) == 9
    assert sup_levels(1024) == 10
    assert sup_levels(500, "nn") == 18


def test_sup_first_step_explores_level_one():
    pol = SupKernelUCB(KernelSpec(), 1.0, BetaSchedule("fixed", value=1.0), 100)
    dec = pol.select(sphere(4, 3), 1)
    assert (dec.branch, dec.level, dec.action) == ("explore", 1, 0)
    assert dec.candidates == [[0, 1, 2, 3]]
    pol.update(sphere(4, 3), dec, 0.1)
    assert pol.levels.psi == [[1]] + [[] for _ in range(pol.S - 1)]


def test_sup_step_elimination_and_guard():
    ctx = sphere(3, 3)
    widths = {1: np.array([0.1, 0.1, 0.1]), 2: np.array([0.4, 0.4])}
    means = {1: np.array([1.0, 0.0, 0.95]), 2: np.array([1.0, 0.95])}

    def post(s, idx):
        return means[s][:len(idx)], widths[s][:len(idx)]

    dec = sup_step(ctx, 1.0, 1.0, 5, 0.01, post)
    # level 1: every width <= 1/2, drop action 1 (ucb 0.1 < 1.1 - 1); level 2: width 0.4 > 1/4
    assert dec.candidates == [[0, 1, 2], [0, 2]]
    assert (dec.branch, dec.level, dec.action) == ("explore", 2, 0)
    assert math.isnan(dec.ucb[1])
    with pytest.raises(TraceError):
        sup_step(ctx, 1.0, 1.0, 2, 0.0, lambda s, idx: (np.zeros(len(idx)), np.full(len(idx), 1e-6)))


def test_sup_exploit_branch_when_all_widths_tiny():
    ctx = sphere(3, 3)
    dec = sup_step(ctx, 1.0, 1.0, 4, 0.1, lambda s, idx: (np.array([0.0, 0.5, 0.2])[idx], np.full(len(idx), 0.05)))
    assert (dec.branch, dec.level, dec.action) == ("ucb", 1, 1)


def test_sup_kernel_uses_only_level_data():
    T = 150
    pol = SupKernelUCB(KernelSpec(), 1.0, BetaSchedule("fixed", value=1.0), T)
    hist = play(pol, make_env(s2=1.0, seed=4), T)
    assert max(d.level for _, d, _ in hist) >= 2
    assert sum(pol.levels.sizes()) + sum(d.branch == "ucb" for _, d, _ in hist) == T
    for s in range(1, pol.S + 1):
        idx = pol.levels.psi[s - 1]
        state = pol.states[s - 1]
        assert len(state) == len(idx)
        for j, t in enumerate(idx):
            c, d, y = hist[t - 1]
            np.testing.assert_array_equal(state.points[j], c[d.action])
            assert state.rewards[j] == y
    final = [set(p) for p in pol.levels.psi]
    for t, s, seen in pol.access_log:
        assert set(seen) <= final[s - 1] and all(i < t for i in seen)


def test_sup_random_explore_is_seeded():
    def actions(seed):
        pol = SupKernelUCB(KernelSpec(), 1.0, BetaSchedule("fixed", value=1.0), 40,
                           rng=np.random.default_rng(seed))
        return [d.action for _, d, _ in play(pol, make_env(), 40)]

    assert actions(5) == actions(5)
    assert actions(5) != actions(6)


def test_sup_runs_pass_verify_trace():
    for alg, extra in [("sup_ntk_ucb", {}), ("sup_nn_ucb", {"nn": {"width": 16, "steps": 5}})]:
        cfg = config_from_dict({"algorithm": alg, "T": 60, "noise_var": 1.0, "seed": 2,
                                "env": {"d": 3, "n_actions": 4}, "beta": {"mode": "fixed", "value": 1.0},
                                **extra})
        rep = verify_trace(run_experiment(cfg), cfg)
        assert rep.passed, rep.lines()


# ---------------------------------------------------------------- neural UCB

def nn_policy(m=32, L=1, arch="fc", d=3, steps=10, **kw):
    p = neural.symmetric_init(d, m, L, seed=1, arch=arch)
    cfg = neural.TrainConfig(steps=steps, noise_var=1.0, horizon=50, mode="warm")
    return NeuralUCB(p, 1.0, BetaSchedule("gp", 0.1, 4), cfg, **kw)


def test_neural_ucb_zero_mean_at_init():
    for arch in ("fc", "cnn2"):
        dec = nn_policy(arch=arch).select(sphere(4, 3), 1)
        assert np.max(np.abs(dec.means)) <= 1e-12
        assert np.all(dec.stds > 0)


def test_neural_ucb_deterministic_and_retrains():
    runs = []
    for _ in range(2):
        pol = nn_policy(retrain_every=3)
        runs.append([d.action for _, d, _ in play(pol, make_env(), 20)])
        assert pol.n_trainings == 6
    assert runs[0] == runs[1]
    with pytest.raises(ArgumentError):
        nn_policy(retrain_every=0)


def test_neural_ucb_std_is_empirical_kernel_posterior():
    pol = nn_policy(m=64, L=2)
    hist = play(pol, make_env(), 8)
    ctx = sphere(4, 3, 77)
    dec = pol.select(ctx, 9)
    feats = lambda X: neural.feature_batch(pol.params.with_weights(pol.params.init_snapshot),
                                           neural.duplicate_input(X)).to_dense() / 8.0
    Phi = feats(np.array([c[d.action] for c, d, _ in hist]))
    Q = feats(ctx)
    K = Phi @ Phi.T + np.eye(len(Phi))
    kq = Phi @ Q.T
    var = np.sum(Q * Q, axis=1) - np.einsum("ij,ij->j", kq, np.linalg.solve(K, kq))
    np.testing.assert_allclose(dec.stds, np.sqrt(var), atol=1e-9)


def test_sup_neural_first_step_and_training_scope():
    p = neural.symmetric_init(3, 16, 1, seed=0)
    cfg = neural.TrainConfig(steps=5, noise_var=1.0, horizon=40, mode="cold")
    pol = SupNeuralUCB(p, 1.0, BetaSchedule("fixed", value=1.0), 40, cfg)
    hist = play(pol, make_env(), 40)
    assert hist[0][1].branch == "explore" and hist[0][1].level == 1
    assert pol.levels.psi[0][0] == 1
    assert pol.train_log
    final = [p_ for p_ in pol.levels.psi]
    for s, idx in pol.train_log:
        assert list(idx) == final[s - 1][:len(idx)]
    for t, s, seen in pol.access_log:
        assert list(seen) == final[s - 1][:len(seen)] and all(i < t for i in seen)


# ---------------------------------------------------------------- agreement with the kernel policies

def agreement(arch, m, seed, T=50, d=4, A=5, s2=1.0, J=100):
    kind = "cntk" if arch == "cnn2" else "ntk"
    r = envs.rkhs_env(d, 2.0, 20, KernelSpec(kind, 1), seed=seed)
    env = envs.Environment(r, A, d, envs.NoiseModel("gaussian", s2), seed=seed + 100)
    sched = BetaSchedule("gp", 0.1, A, T)
    # g / sqrt(m) features of a depth-L net approximate (L + 1) times the normalized kernel
    ref = KernelUCB(KernelSpec(kind, 1, normalized=False), s2, sched)
    nn = NeuralUCB(neural.symmetric_init(d, m, 1, seed, arch=arch), s2, sched,
                   neural.TrainConfig(steps=J, noise_var=s2, horizon=T, mode="warm", loss_tol=0.0))
    hits = 0
    for t in range(1, T + 1):
        c = env.next_context()
        a, b = ref.select(c, t), nn.select(c, t)
        hits += a.action == b.action
        reward = env.observe(a.action).reward
        ref.update(c, a, reward)
        nn.update(c, a, reward)
    return hits / T


# Threshold 0.9 on the seed average, fixed after a pilot at m = 4096, J = 100:
#   fc   seeds 0..7: 0.88 0.92 0.98 0.84 0.92 0.90 0.94 0.92 (mean 0.9125)
#   cnn2 seeds 0..3: 0.98 1.00 0.98 0.96 (about a minute per seed)
# Single runs dip below 0.9 when two actions nearly tie in UCB.
AGREEMENT_SEEDS = {"fc": range(4), "cnn2": range(2)}


@pytest.mark.filterwarnings("ignore:training loss increased")
@pytest.mark.parametrize("arch", ["fc", pytest.param("cnn2", marks=pytest.mark.slow)])
def test_wide_network_tracks_kernel_policy(arch):
    scores = [agreement(arch, 4096, s) for s in AGREEMENT_SEEDS[arch]]
    assert np.mean(scores) >= 0.9, scores


# ---------------------------------------------------------------- random baseline

def test_random_policy_seeded_and_context_free():
    a = RandomPolicy(5, seed=3)
    b = RandomPolicy(5, seed=3)
    xs = [a.select(sphere(5, 3, t), t).action for t in range(1, 50)]
    ys = [b.select(sphere(5, 4, 100 + t), t).action for t in range(1, 50)]
    assert xs == ys
    assert policies.random_policy(sphere(5, 3), 8).action == policies.random_policy(sphere(5, 3, 1), 8).action


def test_random_policy_uniform_chi_square():
    pol = RandomPolicy(6, seed=0)
    ctx = sphere(6, 3)
    counts = np.bincount([pol.select(ctx, t).action for t in range(1, 10_001)], minlength=6)
    assert stats.chisquare(counts).pvalue > 1e-3
