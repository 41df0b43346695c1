"""The bandit loop: build env and policy from a config, run T steps, log each."""
from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np

from . import envs, neural
from .config import (KERNEL_ALGOS, NEURAL_ALGOS, SUP_ALGOS, RunConfig, config_to_dict,
                     substream_seed)
from .errors import DataError, ExperimentAborted, NNUCBError
from .gp import FeaturePosteriorState, PosteriorState
from .kernels import KernelSpec
from .policies import (BetaSchedule, KernelUCB, NeuralUCB, RandomPolicy, SupKernelUCB,
                       SupNeuralUCB)
from .report import StepLog, emit_csv, emit_plotdata


def kernel_spec(cfg: RunConfig) -> KernelSpec:
    return KernelSpec(cfg.kernel.kind, cfg.kernel.depth, normalized=cfg.kernel.normalized)


def _load_pool(path) -> np.ndarray:
    try:
        pool = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read point pool {path}: {exc}") from exc
    return pool


def _classification_data(cfg: RunConfig):
    classes = list(cfg.env.digits_classes)
    if cfg.env.images is None:
        return envs.load_digits_classes(classes)
    images = envs.load_idx(cfg.env.images)
    labels = envs.load_idx(cfg.env.labels)
    if images.ndim != 2 or labels.ndim != 1:
        raise DataError("env.images must hold images and env.labels labels")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    mask = np.isin(labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    return images[mask], np.array([remap[c] for c in labels[mask]], dtype=int)


def build_env(cfg: RunConfig) -> envs.Environment:
    env_seed = substream_seed(cfg.seed, "env")
    noise_seed = substream_seed(cfg.seed, "noise")
    e = cfg.env
    if e.kind == "classification":
        images, labels = _classification_data(cfg)
        env = envs.classification_env(images, labels, len(e.digits_classes), env_seed)
        env.noise_rng = np.random.default_rng(noise_seed)
        return env
    spec = kernel_spec(cfg)
    if e.kind == "rkhs":
        reward = envs.rkhs_env(e.d, e.B, e.n_centers, spec, env_seed)
    else:
        reward = envs.gp_sample_env(spec, env_seed)
    scale = cfg.noise_var if e.noise.scale is None else e.noise.scale
    pool = None if e.pool is None else _load_pool(e.pool)
    env = envs.Environment(reward, e.n_actions, e.d, envs.NoiseModel(e.noise.kind, scale),
                           env_seed, pool=pool)
    env.noise_rng = np.random.default_rng(noise_seed)
    return env


def train_config(cfg: RunConfig) -> neural.TrainConfig:
    n = cfg.nn
    return neural.TrainConfig(steps=n.steps, noise_var=cfg.noise_var, eta_mode=n.eta_mode,
                              eta=n.eta, eta_constant=n.eta_constant, horizon=cfg.T,
                              mode=n.train_mode, loss_tol=n.loss_tol)


def build_policy(cfg: RunConfig, env: envs.Environment):
    policy_seed = substream_seed(cfg.seed, "policy")
    b = cfg.beta
    sched = BetaSchedule(b.mode, b.delta, env.n_actions, cfg.T, b.value)
    rng = np.random.default_rng(policy_seed) if cfg.random_explore else None
    alg = cfg.algorithm
    if alg == "random":
        return RandomPolicy(env.n_actions, policy_seed)
    if alg in KERNEL_ALGOS:
        spec = kernel_spec(cfg)
        if alg == "sup_ntk_ucb":
            return SupKernelUCB(spec, cfg.noise_var, sched, cfg.T, rng)
        return KernelUCB(spec, cfg.noise_var, sched)
    params = neural.symmetric_init(env.dim, cfg.nn.width, cfg.nn.depth,
                                   substream_seed(cfg.seed, "init"), arch=cfg.nn.arch)
    if alg == "sup_nn_ucb":
        return SupNeuralUCB(params, cfg.noise_var, sched, cfg.T, train_config(cfg), rng,
                            feature_mode=cfg.nn.feature_mode)
    return NeuralUCB(params, cfg.noise_var, sched, train_config(cfg), cfg.nn.retrain_every,
                     feature_mode=cfg.nn.feature_mode)


class InfoGainTracker:
    """Empirical information gain of the chosen points, by the chain rule
    0.5 * sum log(1 + var_{t-1}(x_t) / sigma^2), which telescopes to
    0.5 * log det(I + K / sigma^2).

    Kernel and random policies use the run's kernel; neural policies use the
    gradient features g(x; theta0)/sqrt(m) of the policy's initial network.
    ``mode = diag`` swaps the feature posterior for its diagonal proxy.
    """

    def __init__(self, cfg: RunConfig, policy):
        self.noise_var = cfg.noise_var
        self.mode = cfg.info_gain
        self.policy = policy
        self.neural = cfg.algorithm in NEURAL_ALGOS
        self._reuse = (isinstance(policy, NeuralUCB)
                       and (policy.fstate.mode == "diag") == (self.mode == "diag"))
        if self.mode == "off" or self._reuse:
            return
        if self.neural:
            self.init = policy.init if isinstance(policy, SupNeuralUCB) else policy.params
            self.fstate = FeaturePosteriorState(cfg.noise_var, "diag" if self.mode == "diag" else "dual")
        else:
            self.state = PosteriorState(kernel_spec(cfg), cfg.noise_var)

    def step(self, context, decision) -> float:
        if self.mode == "off":
            return 0.0
        a = decision.action
        if self._reuse:
            var = decision.stds[a] ** 2
        elif self.neural:
            x = neural.duplicate_input(context[a:a + 1])
            phi = neural.feature_batch(self.init, x).scaled(1.0 / math.sqrt(self.init.width))
            var = float(self.fstate.posterior(phi)[1][0]) ** 2
            self.fstate.extend(phi, 0.0)
        else:
            var = self.state.posterior(context[a])[1] ** 2
            self.state.extend(context[a], 0.0, inplace=True)
        return 0.5 * math.log1p(var / self.noise_var)


def run_experiment(cfg: RunConfig, progress=None) -> list[StepLog]:
    """Run ``cfg.T`` steps. On a library error the partial log is written to
    ``cfg.output.csv`` (if set) and :class:`ExperimentAborted` is raised."""
    cfg.validate()
    env = build_env(cfg)
    policy = build_policy(cfg, env)
    tracker = InfoGainTracker(cfg, policy)
    log: list[StepLog] = []
    cum_regret = cum_info = 0.0
    t = 0
    try:
        for t in range(1, cfg.T + 1):
            start = time.perf_counter() if cfg.timing else None
            context = env.next_context()
            decision = policy.select(context, t)
            inc = tracker.step(context, decision)
            outcome = env.observe(decision.action)
            policy.update(context, decision, outcome.reward)
            cum_regret += outcome.instant_regret
            cum_info += inc
            levels = getattr(policy, "levels", None)
            log.append(StepLog(
                t=t,
                chosen_action=decision.action,
                reward=outcome.reward,
                instant_regret=outcome.instant_regret,
                cum_regret=cum_regret,
                ucb_max=decision.ucb_max,
                post_std_chosen=decision.chosen_std,
                info_gain_increment=inc,
                info_gain_cum=cum_info,
                sup_level=decision.level,
                psi_sizes=tuple(levels.sizes()) if levels is not None else None,
                branch=decision.branch,
                candidates=(tuple(tuple(c) for c in decision.candidates)
                            if decision.candidates is not None else None),
                beta=decision.beta,
                wall_ms=(time.perf_counter() - start) * 1e3 if start is not None else None,
            ))
            if progress is not None:
                progress(t, log[-1])
    except (NNUCBError, np.linalg.LinAlgError) as exc:
        if cfg.output.csv:
            emit_csv(log, cfg.output.csv)
        raise ExperimentAborted(t, exc, log) from exc
    write_outputs(cfg, log)
    return log


def run_metadata(cfg: RunConfig) -> dict:
    return {
        "config": config_to_dict(cfg),
        "seeds": {name: substream_seed(cfg.seed, name) for name in ("env", "policy", "init", "noise")},
        "inputs": "classification pixels scaled to [0, 1], then each action vector normalized "
                  "to unit length" if cfg.env.kind == "classification" else "unit sphere",
    }


def write_outputs(cfg: RunConfig, log) -> None:
    out = cfg.output
    if out.csv:
        emit_csv(log, out.csv)
        meta = Path(str(out.csv) + ".meta.json")
        meta.write_text(json.dumps(run_metadata(cfg), indent=2, sort_keys=True) + "\n")
    if out.plotdata:
        emit_plotdata(log, out.plotdata, out.plot_points)
