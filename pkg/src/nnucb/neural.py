"""Fully-connected and 2-layer convolutional ReLU networks, written out by hand.

Network (``L`` hidden layers of width ``m``, no biases)::

    z_1     = W_1 x
    z_l     = sqrt(2/m) W_l relu(z_{l-1})      1 < l <= L
    f(x)    = sqrt(2)   W_{L+1} relu(z_L)

The 2-layer CNN is the ``L = 1`` network averaged over all cyclic shifts of the
input. Gradients are flattened layer-major (W_1 first, output row last) and
row-major within each layer.

The ReLU derivative at exactly 0 is taken to be 0.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import blas

from .errors import ArgumentError, DomainError, FormatError, TrainingDivergence

ARCHS = ("fc", "cnn2")


@dataclass
class NetworkParams:
    arch: str
    weights: list[np.ndarray]
    init_snapshot: list[np.ndarray]
    input_dim: int

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ArgumentError(f"unknown architecture {self.arch!r}")
        if self.arch == "cnn2" and len(self.weights) != 2:
            raise ArgumentError("cnn2 has exactly one hidden layer")
        m = self.weights[0].shape[0]
        expected = [(m, self.input_dim)] + [(m, m)] * (len(self.weights) - 2) + [(1, m)]
        for i, (W, shape) in enumerate(zip(self.weights, expected)):
            if W.shape != shape:
                raise ArgumentError(f"layer {i + 1} has shape {W.shape}, expected {shape}")

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def n_params(self) -> int:
        return sum(W.size for W in self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([W.ravel() for W in self.weights])

    def with_weights(self, weights: list[np.ndarray]) -> "NetworkParams":
        return replace(self, weights=weights)


def _scales(m: int, L: int) -> list[float]:
    return [1.0] + [math.sqrt(2.0 / m)] * (L - 1) + [math.sqrt(2.0)]


def gaussian_init(input_dim: int, m: int, L: int, seed: int, arch: str = "fc") -> NetworkParams:
    """i.i.d. standard-normal weights."""
    if arch == "cnn2" and L != 1:
        raise ArgumentError("cnn2 has exactly one hidden layer")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((m, input_dim))]
    weights += [rng.standard_normal((m, m)) for _ in range(L - 1)]
    weights.append(rng.standard_normal((1, m)))
    return NetworkParams(arch, weights, [W.copy() for W in weights], input_dim)


def symmetric_init(d: int, m: int, L: int, seed: int, arch: str = "fc") -> NetworkParams:
    """Block-duplicated initialization whose output is zero on duplicated inputs.

    Hidden layers are ``sqrt(2) * blockdiag(W, W)`` and the output row is
    ``(w, -w)``; inputs must be ``[x, x] / sqrt(2)`` (see :func:`duplicate_input`).
    The sqrt(2) factor keeps every pre-activation at unit variance, so the
    gradient kernel has the same infinite-width limit as :func:`gaussian_init`.
    """
    if m % 2:
        raise ArgumentError(f"symmetric init needs an even width, got {m}")
    if arch == "cnn2" and L != 1:
        raise ArgumentError("cnn2 has exactly one hidden layer")
    rng = np.random.default_rng(seed)
    h = m // 2
    r2 = math.sqrt(2.0)

    def block(W):
        out = np.zeros((2 * W.shape[0], 2 * W.shape[1]))
        out[: W.shape[0], : W.shape[1]] = W
        out[W.shape[0]:, W.shape[1]:] = W
        return r2 * out

    weights = [block(rng.standard_normal((h, d)))]
    weights += [block(rng.standard_normal((h, h))) for _ in range(L - 1)]
    w = rng.standard_normal(h)
    weights.append(np.concatenate([w, -w])[None, :])
    return NetworkParams(arch, weights, [W.copy() for W in weights], 2 * d)


def duplicate_input(X) -> np.ndarray:
    """x -> [x, x] / sqrt(2); preserves norms and inner products."""
    X = np.asarray(X, dtype=float)
    return np.concatenate([X, X], axis=-1) / math.sqrt(2.0)


def _as_batch(params: NetworkParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    X2 = np.atleast_2d(X)
    if X2.ndim != 2 or X2.shape[1] != params.input_dim:
        raise DomainError(f"input dimension {X2.shape[-1]} does not match network input {params.input_dim}")
    return X2


def _shift_stack(X: np.ndarray) -> np.ndarray:
    """(n, D) -> (n * D, D): every cyclic shift of every row, row-major by point.

    Each point's shifts start from its lexicographically smallest rotation, so
    a shifted input yields the bit-identical stack and shift-averages are
    exactly invariant (no summation-order drift).
    """
    n, D = X.shape
    idx = (np.arange(D)[:, None] + np.arange(D)[None, :]) % D
    rots = X[:, idx]
    out = np.empty_like(rots)
    for i in range(n):
        start = np.lexsort(rots[i].T[::-1])[0]
        out[i] = np.roll(rots[i], -start, axis=0)
    return out.reshape(n * D, D)


def _fc_forward(weights, X):
    L = len(weights) - 1
    sc = _scales(weights[0].shape[0], L)
    acts = [X]
    pres = []
    a = X
    for l in range(L):
        z = sc[l] * (a @ weights[l].T)
        pres.append(z)
        a = np.maximum(z, 0.0)
        acts.append(a)
    out = sc[L] * (a @ weights[L].T)
    return out[:, 0], pres, acts


def _fc_backward(weights, pres, acts, seed_grad):
    """Per-layer gradient factors (scaled delta_l, a_{l-1}) for every row.

    ``seed_grad`` is d(objective)/d(output) per row; the gradient of W_l
    summed over rows is ``delta_l.T @ a_{l-1}``.
    """
    L = len(weights) - 1
    sc = _scales(weights[0].shape[0], L)
    delta = seed_grad[:, None]
    factors = [None] * (L + 1)
    factors[L] = (sc[L] * delta, acts[L])
    back = sc[L] * (delta @ weights[L])
    for l in range(L - 1, -1, -1):
        delta = back * (pres[l] > 0)
        factors[l] = (sc[l] * delta, acts[l])
        if l:
            back = sc[l] * (delta @ weights[l])
    return factors


def forward(params: NetworkParams, X, weights=None) -> np.ndarray:
    """Network output; accepts one input or an (n, D) batch."""
    W = params.weights if weights is None else weights
    X2 = _as_batch(params, X)
    if params.arch == "fc":
        out = _fc_forward(W, X2)[0]
    else:
        D = X2.shape[1]
        out = _fc_forward(W, _shift_stack(X2))[0].reshape(-1, D).mean(axis=1)
    return out if np.ndim(X) == 2 else out[0]


def forward_fc(params: NetworkParams, x) -> float:
    if params.arch != "fc":
        raise ArgumentError("forward_fc needs an fc network")
    return float(forward(params, x))


def forward_cnn2(params: NetworkParams, x) -> float:
    if params.arch != "cnn2":
        raise ArgumentError("forward_cnn2 needs a cnn2 network")
    return float(forward(params, x))


class FeatureBatch:
    """Gradient vectors g(x) for a batch of inputs, possibly kept factorized.

    Fully-connected gradients are stored as per-layer factor pairs so that
    inner products cost O(width) per pair instead of O(#params):
    <g(x), g(y)> = sum_l <delta_l(x), delta_l(y)> <a_{l-1}(x), a_{l-1}(y)>.
    Convolutional gradients are stored densely.
    """

    def __init__(self, factors=None, dense=None):
        if (factors is None) == (dense is None):
            raise ArgumentError("give exactly one of factors / dense")
        self._factors = factors
        self._dense = dense
        self.n = dense.shape[0] if dense is not None else factors[0][0].shape[0]
        self._cap = self.n

    @property
    def factorized(self) -> bool:
        return self._factors is not None

    def _views(self):
        if self._dense is not None:
            return self._dense[: self.n]
        return [(d[: self.n], a[: self.n]) for d, a in self._factors]

    def inner(self, other: "FeatureBatch") -> np.ndarray:
        if self.factorized != other.factorized:
            return self.to_dense() @ other.to_dense().T
        if not self.factorized:
            return self._views() @ other._views().T
        out = 0.0
        for (d1, a1), (d2, a2) in zip(self._views(), other._views()):
            out = out + (d1 @ d2.T) * (a1 @ a2.T)
        return np.asarray(out)

    def sq_norms(self) -> np.ndarray:
        if not self.factorized:
            v = self._views()
            return np.einsum("ij,ij->i", v, v)
        out = np.zeros(self.n)
        for d, a in self._views():
            out += np.einsum("ij,ij->i", d, d) * np.einsum("ij,ij->i", a, a)
        return out

    def to_dense(self) -> np.ndarray:
        if not self.factorized:
            return self._views()
        parts = [np.einsum("ni,nj->nij", d, a).reshape(self.n, -1) for d, a in self._views()]
        return np.concatenate(parts, axis=1)

    def take(self, idx) -> "FeatureBatch":
        idx = np.asarray(idx, dtype=int)
        if not self.factorized:
            return FeatureBatch(dense=self._views()[idx].copy())
        return FeatureBatch(factors=[(d[idx].copy(), a[idx].copy()) for d, a in self._views()])

    def scaled(self, c: float) -> "FeatureBatch":
        if not self.factorized:
            return FeatureBatch(dense=self._views() * c)
        return FeatureBatch(factors=[(d * c, a.copy()) for d, a in self._views()])

    def append(self, other: "FeatureBatch") -> None:
        """Grow in place (amortized doubling)."""
        if other.factorized != self.factorized:
            raise ArgumentError("cannot mix factorized and dense features")
        need = self.n + other.n
        if need > self._cap:
            cap = max(need, 2 * self._cap, 8)
            if self.factorized:
                self._factors = [(_grow(d, cap), _grow(a, cap)) for d, a in self._factors]
            else:
                self._dense = _grow(self._dense, cap)
            self._cap = cap
        if self.factorized:
            for (d, a), (d2, a2) in zip(self._factors, other._views()):
                d[self.n: need] = d2
                a[self.n: need] = a2
        else:
            self._dense[self.n: need] = other._views()
        self.n = need


def _grow(arr: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((cap,) + arr.shape[1:])
    out[: min(arr.shape[0], cap)] = arr[:cap]
    return out


def feature_batch(params: NetworkParams, X, at_init: bool = True) -> FeatureBatch:
    """Unscaled gradients g(x; theta) for each row of X (theta0 by default)."""
    W = params.init_snapshot if at_init else params.weights
    X2 = _as_batch(params, X)
    n = X2.shape[0]
    if params.arch == "fc":
        _, pres, acts = _fc_forward(W, X2)
        return FeatureBatch(factors=_fc_backward(W, pres, acts, np.ones(n)))
    D = X2.shape[1]
    Xs = _shift_stack(X2)
    _, pres, acts = _fc_forward(W, Xs)
    factors = _fc_backward(W, pres, acts, np.full(n * D, 1.0 / D))
    dense = [np.einsum("nsi,nsj->nij", d.reshape(n, D, -1), a.reshape(n, D, -1)).reshape(n, -1)
             for d, a in factors]
    return FeatureBatch(dense=np.concatenate(dense, axis=1))


def grad(params: NetworkParams, x) -> np.ndarray:
    """Flat gradient of the output with respect to all weights at the current theta."""
    fb = feature_batch(params, np.atleast_2d(np.asarray(x, dtype=float)), at_init=False)
    return fb.to_dense()[0]


def grad_fc(params: NetworkParams, x) -> np.ndarray:
    if params.arch != "fc":
        raise ArgumentError("grad_fc needs an fc network")
    return grad(params, x)


def grad_cnn2(params: NetworkParams, x) -> np.ndarray:
    if params.arch != "cnn2":
        raise ArgumentError("grad_cnn2 needs a cnn2 network")
    return grad(params, x)


def empirical_features(params: NetworkParams, x, normalized: bool = True) -> np.ndarray:
    """g(x; theta0) / sqrt(m (L+1)) (or / sqrt(m) with ``normalized=False``)."""
    g = feature_batch(params, np.atleast_2d(np.asarray(x, dtype=float))).to_dense()[0]
    scale = params.width * (params.depth + 1 if normalized else 1)
    return g / math.sqrt(scale)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Gradient-descent settings.

    eta_mode:
      ``theorem``  eta = C / (L m T + m sigma^2) with T = ``horizon``
      ``adaptive`` same formula with T replaced by the current data count
      ``fixed``    eta = ``eta``
    mode ``cold`` restarts from theta0 every call; ``warm`` continues from the
    current weights and stops early once mean loss <= ``loss_tol``.
    """

    steps: int = 100
    noise_var: float = 1.0
    eta_mode: str = "theorem"
    eta: float | None = None
    eta_constant: float = 0.5
    horizon: int = 1
    mode: str = "cold"
    loss_tol: float = 1e-3

    def __post_init__(self):
        if self.steps < 0:
            raise ArgumentError("steps must be >= 0")
        if self.noise_var <= 0:
            raise ArgumentError("noise_var must be positive")
        if self.eta_mode not in ("theorem", "adaptive", "fixed"):
            raise ArgumentError(f"unknown eta_mode {self.eta_mode!r}")
        if self.eta_mode == "fixed" and (self.eta is None or self.eta <= 0):
            raise ArgumentError("fixed eta_mode needs a positive eta")
        if self.mode not in ("cold", "warm"):
            raise ArgumentError(f"unknown training mode {self.mode!r}")


def learning_rate(cfg: TrainConfig, params: NetworkParams, n_data: int) -> float:
    if cfg.eta_mode == "fixed":
        return float(cfg.eta)
    T = cfg.horizon if cfg.eta_mode == "theorem" else max(n_data, 1)
    m, L = params.width, params.depth
    return cfg.eta_constant / (L * m * T + m * cfg.noise_var)


def _residual_and_factors(params: NetworkParams, W, X, y):
    """Residuals f - y and the gradient factors of sum (f - y)^2."""
    if params.arch == "fc":
        out, pres, acts = _fc_forward(W, X)
        resid = out - y
        return resid, _fc_backward(W, pres, acts, 2.0 * resid)
    D = X.shape[1]
    Xs = _shift_stack(X)
    outs, pres, acts = _fc_forward(W, Xs)
    resid = outs.reshape(-1, D).mean(axis=1) - y
    return resid, _fc_backward(W, pres, acts, np.repeat(2.0 * resid / D, D))


def _objective(resid, diffs, reg: float) -> float:
    return float(resid @ resid) + reg * sum(float(np.vdot(dl, dl)) for dl in diffs)


def _sub_outer(D: np.ndarray, delta: np.ndarray, a: np.ndarray, eta: float, decay: float = 1.0) -> None:
    """D <- decay * D - eta * delta.T @ a, in place and without a full-size temporary."""
    if delta.shape[0] == 0:
        D *= decay
        return
    # D is C-ordered, so D.T is Fortran-ordered and gemm can write into it
    out = blas.dgemm(-eta, a, delta, beta=decay, c=D.T, trans_a=True, overwrite_c=True)
    if not np.shares_memory(out, D):
        D[...] = out.T


LOSS_RISE_TOL = 1e-9


def training_loss(params: NetworkParams, X, y, noise_var: float) -> float:
    X2 = _as_batch(params, X)
    resid, _ = _residual_and_factors(params, params.weights, X2, np.asarray(y, dtype=float))
    diffs = [Wl - W0 for Wl, W0 in zip(params.weights, params.init_snapshot)]
    return _objective(resid, diffs, params.width * noise_var)


def train_nn(params: NetworkParams, X, y, cfg: TrainConfig, history: list | None = None) -> NetworkParams:
    """Full-batch gradient descent on sum (f - y)^2 + m sigma^2 ||theta - theta0||^2.

    Returns a new :class:`NetworkParams` sharing the init snapshot. If
    ``history`` is a list, per-step losses are appended to it.
    """
    if cfg.steps == 0:
        return params
    X2 = _as_batch(params, X)
    y = np.asarray(y, dtype=float)
    if X2.shape[0] != y.shape[0]:
        raise ArgumentError("inputs and targets differ in length")
    n = X2.shape[0]
    if n == 0 and cfg.mode == "cold":
        raise ArgumentError("cold-start training needs data")
    reg = params.width * cfg.noise_var
    eta = learning_rate(cfg, params, n)
    W0 = params.init_snapshot
    start = W0 if cfg.mode == "cold" else params.weights
    W = [np.array(w, dtype=float, order="C") for w in start]
    # theta - theta0, updated in place: diff <- (1 - 2 eta reg) diff - eta * grad of the squared error
    diffs = [Wl - W0l for Wl, W0l in zip(W, W0)]
    decay = 1.0 - 2.0 * eta * reg
    prev = math.inf
    warned = False
    for j in range(cfg.steps):
        resid, factors = _residual_and_factors(params, W, X2, y)
        loss = _objective(resid, diffs, reg)
        if not math.isfinite(loss):
            raise TrainingDivergence(j, loss)
        if history is not None:
            history.append(loss)
        if cfg.eta_mode == "theorem" and not warned and loss > prev * (1 + LOSS_RISE_TOL):
            # reported once per call; late oscillations near the optimum are common
            warnings.warn(f"training loss increased at step {j}: {prev!r} -> {loss!r}", RuntimeWarning)
            warned = True
        prev = loss
        if cfg.mode == "warm" and loss / max(n, 1) <= cfg.loss_tol:
            break
        for Wl, W0l, dl, (delta, a) in zip(W, W0, diffs, factors):
            _sub_outer(dl, delta, a, eta, decay)
            np.add(W0l, dl, out=Wl)
    resid, _ = _residual_and_factors(params, W, X2, y)
    final = _objective(resid, diffs, reg)
    if not math.isfinite(final):
        raise TrainingDivergence(cfg.steps, final)
    return params.with_weights(W)


def ridge_optimum(params: NetworkParams, X, y, noise_var: float) -> np.ndarray:
    """theta0 + Z^{-1} G^T y / m with Z = sigma^2 I + G^T G / m (rows of G are g(x_i; theta0)).

    The minimizer of the training loss once f is replaced by its first-order
    model around theta0. Solved in the dual (n x n) form.
    """
    G = feature_batch(params, X).to_dense()
    y = np.asarray(y, dtype=float)
    m = params.width
    alpha = np.linalg.solve(G @ G.T + m * noise_var * np.eye(G.shape[0]), y)
    return np.concatenate([W.ravel() for W in params.init_snapshot]) + G.T @ alpha


def linearized_gd(params: NetworkParams, X, y, cfg: TrainConfig) -> list[np.ndarray]:
    """Gradient descent on sum (<g_i, theta - theta0> - y_i)^2 + m sigma^2 ||theta - theta0||^2.

    Same step size rule as :func:`train_nn`; returns every iterate theta_0..theta_J
    as flat vectors.
    """
    G = feature_batch(params, X).to_dense()
    y = np.asarray(y, dtype=float)
    reg = params.width * cfg.noise_var
    eta = learning_rate(cfg, params, G.shape[0])
    theta0 = np.concatenate([W.ravel() for W in params.init_snapshot])
    delta = np.zeros_like(theta0)
    iterates = [theta0.copy()]
    for _ in range(cfg.steps):
        delta = delta - eta * (2.0 * G.T @ (G @ delta - y) + 2.0 * reg * delta)
        iterates.append(theta0 + delta)
    return iterates


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"NNUCBW01"
#   u8        arch tag (0 = fc, 1 = cnn2)
#   u32 x 3   input_dim, width, depth
#   then twice (current weights, then init snapshot), for each of depth+1 layers:
#   u32 x 2   rows, cols
#   f64 * rows*cols, row-major

MAGIC = b"NNUCBW01"


def save_checkpoint(params: NetworkParams, path) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<BIII", ARCHS.index(params.arch), params.input_dim, params.width, params.depth)
    for group in (params.weights, params.init_snapshot):
        for W in group:
            buf += struct.pack("<II", *W.shape)
            buf += np.ascontiguousarray(W, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> NetworkParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r} at offset 0, expected {MAGIC!r}")
    off = 8
    try:
        tag, input_dim, _width, depth = struct.unpack_from("<BIII", data, off)
        off += struct.calcsize("<BIII")
        groups = []
        for _ in range(2):
            layers = []
            for _ in range(depth + 1):
                rows, cols = struct.unpack_from("<II", data, off)
                off += 8
                nbytes = 8 * rows * cols
                if off + nbytes > len(data):
                    raise FormatError(f"{path}: truncated layer data at offset {off}")
                layers.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
                              .reshape(rows, cols).astype(float))
                off += nbytes
            groups.append(layers)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header at offset {off}") from exc
    if tag >= len(ARCHS):
        raise FormatError(f"{path}: unknown arch tag {tag} at offset 8")
    return NetworkParams(ARCHS[tag], groups[0], groups[1], input_dim)
