"""Bandit environments: reward functions, context streams, noise and IDX loading."""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ArgumentError, DataError, FormatError, NumericalError
from .gp import PosteriorState
from .kernels import KernelSpec, sample_sphere

GP_JITTER = 1e-10
SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class NoiseModel:
    """``gaussian`` with variance ``scale``, ``uniform`` on [-scale, scale], or ``none``."""

    kind: str = "gaussian"
    scale: float = 0.01

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "none"):
            raise ArgumentError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and self.scale < 0:
            raise ArgumentError("noise scale must be nonnegative")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "gaussian":
            return float(rng.normal(0.0, math.sqrt(self.scale)))
        if self.kind == "uniform":
            return float(rng.uniform(-self.scale, self.scale))
        return 0.0


@dataclass
class StepOutcome:
    reward: float
    true_value: float
    best_value: float
    instant_regret: float


class RKHSReward:
    """f(x) = sum_i alpha_i k(c_i, x) with ||f||_k = sqrt(alpha^T K alpha) = B."""

    def __init__(self, centers, alpha, spec: KernelSpec):
        self.centers = kernels.check_points(centers, "centers")
        self.alpha = np.asarray(alpha, dtype=float)
        self.spec = spec

    @property
    def rkhs_norm(self) -> float:
        K = kernels.gram(self.centers, self.spec)
        return math.sqrt(max(float(self.alpha @ K @ self.alpha), 0.0))

    def values(self, X) -> np.ndarray:
        return kernels.cross_gram(X, self.centers, self.spec) @ self.alpha


class GPSampleReward:
    """A GP sample path drawn lazily: each new point is sampled from its
    conditional given every point sampled so far. Values are cached by the
    exact bytes of the query point."""

    def __init__(self, spec: KernelSpec, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self._state = PosteriorState(spec, GP_JITTER)
        self._cache: dict[bytes, float] = {}

    def _one(self, x: np.ndarray) -> float:
        key = x.tobytes()
        if key in self._cache:
            return self._cache[key]
        mean, std = self._state.posterior(x)
        val = float(mean + std * self.rng.standard_normal())
        self._state.extend(x, val, inplace=True)
        self._cache[key] = val
        return val

    def values(self, X) -> np.ndarray:
        X = kernels.check_points(X)
        return np.array([self._one(x) for x in X])


class ClassificationReward:
    """Reward 1 for the true class of the current image, 0 otherwise."""

    def __init__(self, labels, n_classes: int):
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            bad = labels[(labels < 0) | (labels >= n_classes)][0]
            raise DataError(f"label {bad} outside [0, {n_classes})")
        self.labels = labels
        self.n_classes = n_classes


def rkhs_env(d: int, B: float, n_centers: int, spec: KernelSpec, seed: int = 0) -> RKHSReward:
    """Random finite kernel expansion rescaled to RKHS norm exactly B."""
    if n_centers < 1:
        raise ArgumentError("n_centers must be >= 1")
    rng = np.random.default_rng(seed)
    centers = sample_sphere(rng, n_centers, d)
    alpha = rng.standard_normal(n_centers)
    K = kernels.gram(centers, spec)
    if np.linalg.eigvalsh(K)[0] <= SINGULAR_TOL:
        warnings.warn("kernel matrix of the centers is singular (duplicate centers?); "
                      "regularizing the rescale", RuntimeWarning)
        K = K + SINGULAR_TOL * np.eye(n_centers)
    sq = float(alpha @ K @ alpha)
    return RKHSReward(centers, alpha * (B / math.sqrt(sq)), spec)


def gp_sample_env(spec: KernelSpec, seed: int = 0) -> GPSampleReward:
    return GPSampleReward(spec, seed)


def block_context(image: np.ndarray, n_classes: int) -> np.ndarray:
    """Action a's vector holds the image in coordinates [a d, (a+1) d), zeros elsewhere,
    normalized to unit length."""
    z = np.asarray(image, dtype=float).ravel()
    norm = np.linalg.norm(z)
    if norm == 0:
        raise DataError("cannot embed an all-zero image on the sphere")
    d = z.size
    out = np.zeros((n_classes, n_classes * d))
    for a in range(n_classes):
        out[a, a * d:(a + 1) * d] = z / norm
    return out


class Environment:
    """Context stream plus reward oracle; one consumer at a time.

    Contexts are (n_actions, dim) arrays with unit-norm rows.
    """

    def __init__(self, reward, n_actions: int, dim: int, noise: NoiseModel, seed: int = 0,
                 pool=None, images=None):
        if n_actions < 2:
            raise ArgumentError("need at least two actions")
        self.reward = reward
        self.n_actions = n_actions
        self.dim = dim
        self.noise = noise
        self.ctx_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        self.noise_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        self.pool = None if pool is None else kernels.check_points(pool, "pool")
        self.images = images
        self._ctx = None
        self._label = None

    def next_context(self) -> np.ndarray:
        if isinstance(self.reward, ClassificationReward):
            i = int(self.ctx_rng.integers(len(self.reward.labels)))
            self._label = int(self.reward.labels[i])
            self._ctx = block_context(self.images[i], self.reward.n_classes)
        elif self.pool is not None:
            idx = self.ctx_rng.choice(self.pool.shape[0], self.n_actions, replace=False)
            self._ctx = self.pool[idx]
        else:
            self._ctx = sample_sphere(self.ctx_rng, self.n_actions, self.dim)
        return self._ctx

    def true_values(self, context) -> np.ndarray:
        if isinstance(self.reward, ClassificationReward):
            out = np.zeros(len(context))
            out[self._label] = 1.0
            return out
        return self.reward.values(context)

    def observe(self, action: int) -> StepOutcome:
        if self._ctx is None:
            raise ArgumentError("observe called before next_context")
        return observe(self, self._ctx, action, self.noise_rng)


def observe(env: Environment, context, action: int, rng: np.random.Generator) -> StepOutcome:
    """Noisy reward for the chosen action and its regret against the best action."""
    vals = env.true_values(context)
    noise = 0.0 if isinstance(env.reward, ClassificationReward) else env.noise.sample(rng)
    best = float(np.max(vals))
    f = float(vals[action])
    return StepOutcome(f + noise, f, best, max(best - f, 0.0))


def classification_env(images, labels, n_classes: int, seed: int = 0) -> Environment:
    images = np.asarray(images, dtype=float).reshape(len(images), -1)
    reward = ClassificationReward(labels, n_classes)
    if len(reward.labels) != images.shape[0]:
        raise DataError(f"{images.shape[0]} images but {len(reward.labels)} labels")
    return Environment(reward, n_classes, n_classes * images.shape[1], NoiseModel("none", 0.0),
                       seed, images=images)


# --------------------------------------------------------------------------
# IDX files (big-endian): u32 magic 0x00000803 images / 0x00000801 labels,
# then one u32 per dimension, then unsigned bytes.

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def load_idx(path):
    """Parse an IDX file. Images come back flattened and scaled to [0, 1];
    labels as an int array."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{path}: bad magic at offset 0: expected 0x{IDX_IMAGES:08x} or "
                          f"0x{IDX_LABELS:08x}, found 0x{magic:08x}")
    ndim = 3 if magic == IDX_IMAGES else 1
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated dimension sizes at offset {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise FormatError(f"{path}: truncated payload at offset {len(data)}, "
                          f"expected {header + count} bytes")
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=header)
    if magic == IDX_LABELS:
        return raw.astype(int)
    return raw.reshape(dims[0], dims[1] * dims[2]).astype(float) / 255.0


def write_idx(path, array, labels: bool = False) -> None:
    """Write uint8 data as IDX (used to build fixtures)."""
    arr = np.asarray(array, dtype=np.uint8)
    if labels:
        head = struct.pack(">II", IDX_LABELS, arr.shape[0])
    else:
        head = struct.pack(">IIII", IDX_IMAGES, *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def load_digits_classes(classes=(0, 1)):
    """The 8x8 digits bundled with scikit-learn, restricted to ``classes`` and
    relabelled 0..len(classes)-1; pixels scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    ds = load_digits()
    mask = np.isin(ds.target, classes)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in ds.target[mask]])
    return ds.data[mask] / 16.0, labels
