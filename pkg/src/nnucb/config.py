"""Run configuration: a JSON document mapped onto nested dataclasses.

Every key is optional (defaults below); unknown keys are rejected so typos do
not silently fall back to defaults. Example::

    {
      "algorithm": "ntk_ucb",
      "T": 2000,
      "noise_var": 0.01,
      "seed": 0,
      "kernel": {"kind": "ntk", "depth": 1},
      "env": {"kind": "rkhs", "d": 5, "n_actions": 5, "B": 2.0},
      "beta": {"mode": "gp", "delta": 0.1}
    }
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

ALGORITHMS = ("ntk_ucb", "cntk_ucb", "sup_ntk_ucb", "nn_ucb", "cnn_ucb", "sup_nn_ucb", "random")
KERNEL_ALGOS = ("ntk_ucb", "cntk_ucb", "sup_ntk_ucb")
NEURAL_ALGOS = ("nn_ucb", "cnn_ucb", "sup_nn_ucb")
SUP_ALGOS = ("sup_ntk_ucb", "sup_nn_ucb")

# Master-seed sub-streams: SeedSequence(seed, spawn_key=(index,)).
STREAMS = {"env": 0, "policy": 1, "init": 2, "noise": 3}


def substream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(STREAMS[name],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class KernelConfig:
    kind: str = "ntk"        # ntk | cntk
    depth: int = 1
    normalized: bool = True


@dataclass
class NoiseConfig:
    kind: str = "gaussian"   # gaussian | uniform | none
    scale: float | None = None   # gaussian: variance; uniform: half-width; None -> noise_var


@dataclass
class EnvConfig:
    kind: str = "rkhs"       # rkhs | gp_sample | classification
    d: int = 5
    n_actions: int = 5
    B: float = 1.0
    n_centers: int = 20
    pool: str | None = None          # CSV of unit vectors to draw contexts from
    images: str | None = None        # IDX image file (classification)
    labels: str | None = None        # IDX label file (classification)
    digits_classes: list[int] = field(default_factory=lambda: [0, 1])
    noise: NoiseConfig = field(default_factory=NoiseConfig)


@dataclass
class BetaConfig:
    mode: str = "gp"         # gp | const | fixed
    delta: float = 0.1
    value: float | None = None


@dataclass
class NNConfig:
    width: int = 64
    depth: int = 1
    arch: str = "fc"         # fc | cnn2
    steps: int = 100
    eta_mode: str = "theorem"
    eta: float | None = None
    eta_constant: float = 0.5
    train_mode: str = "cold"
    loss_tol: float = 1e-3
    retrain_every: int = 1
    feature_mode: str = "dual"


@dataclass
class OutputConfig:
    csv: str | None = None
    plotdata: str | None = None
    plot_points: int = 200


@dataclass
class RunConfig:
    algorithm: str = "ntk_ucb"
    T: int = 100
    noise_var: float = 0.01
    seed: int = 0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    beta: BetaConfig = field(default_factory=BetaConfig)
    nn: NNConfig = field(default_factory=NNConfig)
    random_explore: bool = False
    info_gain: str = "exact"         # exact | diag | off
    timing: bool = False
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.noise_var <= 0:
            raise ConfigError("noise_var must be positive")
        if self.kernel.kind not in ("ntk", "cntk"):
            raise ConfigError(f"kernel.kind must be ntk or cntk, got {self.kernel.kind!r}")
        if self.algorithm == "cntk_ucb" and self.kernel.kind != "cntk":
            raise ConfigError("cntk_ucb requires kernel.kind = cntk")
        if self.algorithm == "ntk_ucb" and self.kernel.kind != "ntk":
            raise ConfigError("ntk_ucb requires kernel.kind = ntk")
        if self.nn.arch not in ("fc", "cnn2"):
            raise ConfigError(f"nn.arch must be fc or cnn2, got {self.nn.arch!r}")
        if self.algorithm == "cnn_ucb" and self.nn.arch != "cnn2":
            raise ConfigError("cnn_ucb requires nn.arch = cnn2")
        if self.algorithm == "nn_ucb" and self.nn.arch != "fc":
            raise ConfigError("nn_ucb requires nn.arch = fc")
        if self.nn.arch == "cnn2" and self.nn.depth != 1:
            raise ConfigError("cnn2 networks have exactly one hidden layer")
        if self.env.kind not in ("rkhs", "gp_sample", "classification"):
            raise ConfigError(f"unknown env.kind {self.env.kind!r}")
        if self.env.kind != "classification" and self.env.n_actions < 2:
            raise ConfigError("env.n_actions must be >= 2")
        if (self.env.images is None) != (self.env.labels is None):
            raise ConfigError("env.images and env.labels must be given together")
        if self.info_gain not in ("exact", "diag", "off"):
            raise ConfigError(f"info_gain must be exact, diag or off, got {self.info_gain!r}")
        return self


_NESTED = {
    (RunConfig, "kernel"): KernelConfig,
    (RunConfig, "env"): EnvConfig,
    (RunConfig, "beta"): BetaConfig,
    (RunConfig, "nn"): NNConfig,
    (RunConfig, "output"): OutputConfig,
    (EnvConfig, "noise"): NoiseConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        path = f"{where}.{key}" if where else key
        kwargs[key] = _build(sub, value, path) if sub else value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    try:
        return _build(RunConfig, data, "").validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
