"""Bandit policies: kernel UCB (NTK/CNTK), neural UCB (FC/CNN), their Sup
(elimination) variants, and a uniform-random baseline.

Every policy exposes ``select(context, t) -> StepDecision`` followed by
``update(context, decision, reward)``. Contexts are (n_actions, dim) arrays of
unit-norm rows; ``t`` counts from 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .errors import ArgumentError, TraceError
from .gp import FeaturePosteriorState, PosteriorState
from .kernels import KernelSpec
from .neural import NetworkParams, TrainConfig

# --------------------------------------------------------------------------
# exploration schedules


@dataclass(frozen=True)
class BetaSchedule:
    """``gp``: 2 log(|A| t^2 pi^2 / (6 delta)); ``const``: 2 log(2 T |A| / delta);
    ``fixed``: ``value``."""

    mode: str = "gp"
    delta: float = 0.1
    n_actions: int = 2
    horizon: int = 1
    value: float | None = None

    def __post_init__(self):
        if self.mode not in ("gp", "const", "fixed"):
            raise ArgumentError(f"unknown beta mode {self.mode!r}")
        if self.mode == "fixed":
            if self.value is None or self.value < 0:
                raise ArgumentError("fixed beta needs a nonnegative value")
        elif not 0 < self.delta < 1:
            raise ArgumentError(f"delta must lie in (0, 1), got {self.delta}")


def beta_value(sched: BetaSchedule, t: int) -> float:
    if t < 1:
        raise ArgumentError(f"t must be >= 1, got {t}")
    if sched.mode == "gp":
        return 2.0 * math.log(sched.n_actions * t * t * math.pi ** 2 / (6.0 * sched.delta))
    if sched.mode == "const":
        return 2.0 * math.log(2.0 * sched.horizon * sched.n_actions / sched.delta)
    return float(sched.value)


@dataclass
class StepDecision:
    action: int
    ucb: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    beta: float
    branch: str = "ucb"
    level: int | None = None
    candidates: list[list[int]] | None = None

    @property
    def ucb_max(self) -> float:
        return float(np.nanmax(self.ucb))

    @property
    def chosen_std(self) -> float:
        return float(self.stds[self.action])


def _argmax_ucb(means, stds, beta) -> tuple[int, np.ndarray]:
    ucb = means + math.sqrt(beta) * stds
    return int(np.argmax(ucb)), ucb


def ucb_step(state: PosteriorState, context, beta: float) -> StepDecision:
    means, stds = state.posterior_batch(context)
    a, ucb = _argmax_ucb(means, stds, beta)
    return StepDecision(a, ucb, means, stds, beta)


# --------------------------------------------------------------------------
# kernel UCB


class KernelUCB:
    """GP-UCB with an NTK or CNTK covariance (NTK-UCB / CNTK-UCB)."""

    def __init__(self, spec: KernelSpec, noise_var: float, schedule: BetaSchedule):
        self.spec = spec
        self.noise_var = noise_var
        self.schedule = schedule
        self.state = PosteriorState(spec, noise_var)

    def select(self, context, t: int) -> StepDecision:
        return ucb_step(self.state, context, beta_value(self.schedule, t))

    def update(self, context, decision: StepDecision, reward: float) -> None:
        self.state.extend(context[decision.action], reward, inplace=True)


# --------------------------------------------------------------------------
# Sup variants


@dataclass
class LevelSets:
    """Per-level index sets Psi^(s), s = 1..S (stored 0-based)."""

    S: int
    psi: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.psi:
            self.psi = [[] for _ in range(self.S)]

    def record(self, s: int, t: int) -> None:
        self.psi[s - 1].append(t)

    def sizes(self) -> list[int]:
        return [len(p) for p in self.psi]


def sup_levels(T: int, variant: str = "ntk") -> int:
    """S = ceil(log2 T) for the kernel variant, ceil(2 log2 T) for the neural one."""
    factor = 1.0 if variant == "ntk" else 2.0
    return max(1, math.ceil(factor * math.log2(T))) if T > 1 else 1


def sup_step(context, beta: float, sigma: float, S: int, ucb_threshold: float, level_posterior,
             rng: np.random.Generator | None = None) -> StepDecision:
    """One pass of the elimination loop.

    ``level_posterior(s, action_indices) -> (means, stds)`` must only use the
    observations recorded at level ``s``. With ``rng`` given, the exploration
    branch picks uniformly among qualifying actions instead of the lowest index.
    """
    n = len(context)
    active = np.arange(n)
    root_beta = math.sqrt(beta)
    visited = []
    s = 1
    while True:
        if s > S:
            raise TraceError(f"elimination loop ran past S={S} levels")
        visited.append(active.tolist())
        mu, sd = level_posterior(s, active)
        width = root_beta * sd
        ucb = mu + width
        means = np.full(n, np.nan)
        stds = np.full(n, np.nan)
        ucbs = np.full(n, np.nan)
        means[active], stds[active], ucbs[active] = mu, sd, ucb
        level_gap = sigma * 2.0 ** (-s)
        if np.all(width <= ucb_threshold):
            a = int(active[np.argmax(ucb)])
            return StepDecision(a, ucbs, means, stds, beta, "ucb", s, visited)
        if np.all(width <= level_gap):
            active = active[ucb >= np.max(ucb) - 2.0 * level_gap]
            s += 1
            continue
        qualifiers = active[width > level_gap]
        a = int(qualifiers[0] if rng is None else rng.choice(qualifiers))
        return StepDecision(a, ucbs, means, stds, beta, "explore", s, visited)


class SupKernelUCB:
    """SupNTK-UCB: GP posteriors per level, each built only from that level's Psi."""

    variant = "ntk"

    def __init__(self, spec: KernelSpec, noise_var: float, schedule: BetaSchedule, T: int,
                 rng: np.random.Generator | None = None):
        self.spec = spec
        self.noise_var = noise_var
        self.sigma = math.sqrt(noise_var)
        self.schedule = schedule
        self.T = T
        self.S = sup_levels(T, self.variant)
        self.levels = LevelSets(self.S)
        self.rng = rng
        self.states = [PosteriorState(spec, noise_var) for _ in range(self.S)]
        self.access_log: list[tuple[int, int, tuple[int, ...]]] = []
        self._t = 0

    @property
    def ucb_threshold(self) -> float:
        return self.sigma / math.sqrt(self.T)

    def _level_posterior(self, context):
        def post(s, idx):
            self.access_log.append((self._t, s, tuple(self.levels.psi[s - 1])))
            return self.states[s - 1].posterior_batch(context[idx])
        return post

    def select(self, context, t: int) -> StepDecision:
        self._t = t
        beta = beta_value(self.schedule, t)
        return sup_step(context, beta, self.sigma, self.S, self.ucb_threshold,
                        self._level_posterior(context), self.rng)

    def update(self, context, decision: StepDecision, reward: float) -> None:
        if decision.branch != "explore":
            return
        s = decision.level
        self.levels.record(s, self._t)
        self.states[s - 1].extend(context[decision.action], reward, inplace=True)


# --------------------------------------------------------------------------
# neural UCB


class NeuralUCB:
    """NN-UCB / CNN-UCB.

    Mean: the trained network f(x; theta_{t-1}). Std: feature posterior on
    g(x; theta0)/sqrt(m) with noise sigma^2, i.e. the GP posterior under the
    finite-width gradient kernel. Contexts are duplicated as [x, x]/sqrt(2) so
    the symmetric initialization outputs zero.
    """

    def __init__(self, params: NetworkParams, noise_var: float, schedule: BetaSchedule,
                 train_cfg: TrainConfig, retrain_every: int = 1, feature_mode: str = "dual",
                 duplicate: bool = True):
        if retrain_every < 1:
            raise ArgumentError("retrain_every must be >= 1")
        self.params = params
        self.noise_var = noise_var
        self.schedule = schedule
        self.cfg = train_cfg
        self.retrain_every = retrain_every
        self.duplicate = duplicate
        self.fstate = FeaturePosteriorState(noise_var, feature_mode)
        self._X: list[np.ndarray] = []
        self._y: list[float] = []
        self._feats = None
        self.n_trainings = 0

    def inputs(self, context) -> np.ndarray:
        return neural.duplicate_input(context) if self.duplicate else np.asarray(context, float)

    def features(self, X) -> neural.FeatureBatch:
        return neural.feature_batch(self.params, X).scaled(1.0 / math.sqrt(self.params.width))

    def select(self, context, t: int) -> StepDecision:
        X = self.inputs(context)
        self._feats = self.features(X)
        means = neural.forward(self.params, X)
        _, stds = self.fstate.posterior(self._feats)
        beta = beta_value(self.schedule, t)
        a, ucb = _argmax_ucb(means, stds, beta)
        return StepDecision(a, ucb, means, stds, beta)

    def update(self, context, decision: StepDecision, reward: float) -> None:
        a = decision.action
        self.fstate.extend(self._feats.take([a]), reward)
        self._X.append(self.inputs(context)[a])
        self._y.append(float(reward))
        if len(self._y) % self.retrain_every == 0:
            self.params = neural.train_nn(self.params, np.array(self._X), np.array(self._y), self.cfg)
            self.n_trainings += 1


class SupNeuralUCB:
    """SupNN-UCB: per level, a network trained from theta0 on that level's data only,
    and a feature posterior over the same data. Levels are retrained lazily,
    only after their Psi changed."""

    variant = "nn"

    def __init__(self, params: NetworkParams, noise_var: float, schedule: BetaSchedule, T: int,
                 train_cfg: TrainConfig, rng: np.random.Generator | None = None,
                 feature_mode: str = "dual", duplicate: bool = True):
        self.init = params
        self.noise_var = noise_var
        self.sigma = math.sqrt(noise_var)
        self.schedule = schedule
        self.T = T
        self.S = sup_levels(T, self.variant)
        self.levels = LevelSets(self.S)
        self.cfg = train_cfg
        self.rng = rng
        self.duplicate = duplicate
        self.fstates = [FeaturePosteriorState(noise_var, feature_mode) for _ in range(self.S)]
        self.nets: list[NetworkParams] = [params] * self.S
        self._dirty = [False] * self.S
        self._data: dict[int, tuple[np.ndarray, float]] = {}
        self.train_log: list[tuple[int, tuple[int, ...]]] = []
        self.access_log: list[tuple[int, int, tuple[int, ...]]] = []
        self._feats = None
        self._t = 0

    @property
    def ucb_threshold(self) -> float:
        return self.sigma / self.T ** 2

    def inputs(self, context) -> np.ndarray:
        return neural.duplicate_input(context) if self.duplicate else np.asarray(context, float)

    def _net(self, s: int) -> NetworkParams:
        if self._dirty[s - 1]:
            idx = tuple(self.levels.psi[s - 1])
            X = np.array([self._data[i][0] for i in idx])
            y = np.array([self._data[i][1] for i in idx])
            self.nets[s - 1] = neural.train_nn(self.init, X, y, self.cfg)
            self.train_log.append((s, idx))
            self._dirty[s - 1] = False
        return self.nets[s - 1]

    def select(self, context, t: int) -> StepDecision:
        self._t = t
        X = self.inputs(context)
        self._X = X
        self._feats = neural.feature_batch(self.init, X).scaled(1.0 / math.sqrt(self.init.width))

        def post(s, idx):
            self.access_log.append((t, s, tuple(self.levels.psi[s - 1])))
            means = neural.forward(self._net(s), X[idx])
            _, stds = self.fstates[s - 1].posterior(self._feats.take(idx))
            return means, stds

        return sup_step(context, beta_value(self.schedule, t), self.sigma, self.S,
                        self.ucb_threshold, post, self.rng)

    def update(self, context, decision: StepDecision, reward: float) -> None:
        if decision.branch != "explore":
            return
        s, a = decision.level, decision.action
        self.levels.record(s, self._t)
        self._data[self._t] = (self._X[a], float(reward))
        self.fstates[s - 1].extend(self._feats.take([a]), reward)
        self._dirty[s - 1] = True


# --------------------------------------------------------------------------


class RandomPolicy:
    def __init__(self, n_actions: int, seed: int = 0):
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)

    def select(self, context, t: int) -> StepDecision:
        n = len(context)
        a = int(self.rng.integers(n))
        zeros = np.zeros(n)
        return StepDecision(a, zeros, zeros, zeros, 0.0)

    def update(self, context, decision, reward) -> None:
        pass


def random_policy(context, seed: int) -> StepDecision:
    return RandomPolicy(len(context), seed).select(context, 1)
