"""Gaussian-process posteriors, feature-space posteriors and information gain."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .errors import ArgumentError, NumericalError
from .kernels import KernelSpec
from .neural import FeatureBatch

NEG_VAR_TOL = 1e-8


def _clip_variance(var: np.ndarray) -> np.ndarray:
    worst = np.min(var) if var.size else 0.0
    if worst < -NEG_VAR_TOL:
        raise NumericalError(f"posterior variance {worst!r} is negative beyond roundoff")
    return np.maximum(var, 0.0)


class _GrowingCholesky:
    """Lower Cholesky factor of (K + noise I) grown one bordered row at a time.

    Also keeps v = L^{-1} y so the posterior mean needs one triangular solve.
    """

    def __init__(self, noise_var: float, capacity: int = 16):
        self.noise_var = noise_var
        self.n = 0
        self._L = np.zeros((capacity, capacity))
        self._v = np.zeros(capacity)
        self._y = np.zeros(capacity)

    def copy(self) -> "_GrowingCholesky":
        out = _GrowingCholesky(self.noise_var, max(self._L.shape[0], 1))
        out.n = self.n
        out._L = self._L.copy()
        out._v = self._v.copy()
        out._y = self._y.copy()
        return out

    @property
    def L(self) -> np.ndarray:
        return self._L[: self.n, : self.n]

    @property
    def v(self) -> np.ndarray:
        return self._v[: self.n]

    @property
    def y(self) -> np.ndarray:
        return self._y[: self.n]

    def solve(self, B: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros((0,) + B.shape[1:])
        return solve_triangular(self.L, B, lower=True, check_finite=False)

    def _reserve(self, need: int) -> None:
        cap = self._L.shape[0]
        if need <= cap:
            return
        cap = max(need, 2 * cap)
        L = np.zeros((cap, cap))
        L[: self.n, : self.n] = self.L
        self._L = L
        self._v = np.resize(self._v, cap)
        self._y = np.resize(self._y, cap)

    def append(self, cross: np.ndarray, prior_var: float, y: float) -> float:
        """Border the factor with one new observation; returns the Schur complement."""
        row = self.solve(cross)
        schur = prior_var + self.noise_var - float(row @ row)
        if not schur > 0:
            raise NumericalError(f"Schur complement {schur!r} is not positive")
        self._reserve(self.n + 1)
        n = self.n
        diag = math.sqrt(schur)
        self._L[n, :n] = row
        self._L[n, n] = diag
        self._v[n] = (y - float(row @ self.v)) / diag
        self._y[n] = y
        self.n += 1
        return schur

    def predict(self, cross: np.ndarray, prior_var: np.ndarray):
        """cross: (n, q) prior covariances with the history; returns (means, stds)."""
        if self.n == 0:
            return np.zeros(cross.shape[1]), np.sqrt(_clip_variance(np.asarray(prior_var, float)))
        A = self.solve(cross)
        mean = A.T @ self.v
        var = prior_var - np.einsum("ij,ij->j", A, A)
        return mean, np.sqrt(_clip_variance(var))


class PosteriorState:
    """Exact GP posterior over a growing observation history."""

    def __init__(self, spec: KernelSpec, noise_var: float, dim: int | None = None):
        if noise_var <= 0:
            raise ArgumentError(f"noise variance must be positive, got {noise_var}")
        self.spec = spec
        self.noise_var = float(noise_var)
        self.dim = dim
        self._chol = _GrowingCholesky(self.noise_var)
        self._X = np.zeros((0, dim or 0))

    @classmethod
    def from_data(cls, points, rewards, spec: KernelSpec, noise_var: float) -> "PosteriorState":
        """Batch construction with one full Cholesky factorization."""
        X = kernels.check_points(points)
        y = np.asarray(rewards, dtype=float)
        if y.shape != (X.shape[0],):
            raise ArgumentError("points and rewards differ in length")
        state = cls(spec, noise_var, X.shape[1])
        K = kernels.gram(X, spec) + noise_var * np.eye(X.shape[0])
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Cholesky failed: {exc}") from exc
        ch = state._chol
        ch._reserve(X.shape[0])
        ch._L[: X.shape[0], : X.shape[0]] = L
        ch.n = X.shape[0]
        ch._y[: ch.n] = y
        ch._v[: ch.n] = solve_triangular(L, y, lower=True)
        state._X = X.copy()
        return state

    def __len__(self) -> int:
        return self._chol.n

    @property
    def points(self) -> np.ndarray:
        return self._X[: len(self)]

    @property
    def rewards(self) -> np.ndarray:
        return self._chol.y

    @property
    def chol(self) -> np.ndarray:
        return self._chol.L

    def copy(self) -> "PosteriorState":
        out = PosteriorState(self.spec, self.noise_var, self.dim)
        out._chol = self._chol.copy()
        out._X = self._X.copy()
        return out

    def _check_dim(self, X: np.ndarray) -> None:
        if self.dim is None:
            self.dim = X.shape[1]
            self._X = np.zeros((0, self.dim))
        elif X.shape[1] != self.dim:
            raise ArgumentError(f"point dimension {X.shape[1]} != state dimension {self.dim}")

    def posterior_batch(self, X):
        X = kernels.check_points(X)
        self._check_dim(X)
        prior = kernels.kernel_diag(X, self.spec)
        if len(self) == 0:
            return self._chol.predict(np.zeros((0, X.shape[0])), prior)
        cross = kernels.cross_gram(self.points, X, self.spec)
        return self._chol.predict(cross, prior)

    def posterior(self, x) -> tuple[float, float]:
        mean, std = self.posterior_batch(np.atleast_2d(kernels.check_unit(x)))
        return float(mean[0]), float(std[0])

    def extend(self, x, y: float, inplace: bool = False) -> "PosteriorState":
        """Append one observation via a bordered Cholesky row."""
        x = np.atleast_2d(kernels.check_unit(x))
        self._check_dim(x)
        state = self if inplace else self.copy()
        cross = (kernels.cross_gram(state.points, x, state.spec)[:, 0]
                 if len(state) else np.zeros(0))
        prior = float(kernels.kernel_diag(x, state.spec)[0])
        state.last_schur = state._chol.append(cross, prior, float(y))
        if state._X.shape[0] < len(state):
            grown = np.zeros((max(2 * state._X.shape[0], 8), x.shape[1]))
            grown[: len(state) - 1] = state._X[: len(state) - 1]
            state._X = grown
        state._X[len(state) - 1] = x[0]
        return state


def posterior(state: PosteriorState, x) -> tuple[float, float]:
    return state.posterior(x)


def extend(state: PosteriorState, x, y: float) -> PosteriorState:
    return state.extend(x, y)


# --------------------------------------------------------------------------
# feature-space posterior


def _as_features(phi) -> FeatureBatch:
    if isinstance(phi, FeatureBatch):
        return phi
    arr = np.atleast_2d(np.asarray(phi, dtype=float))
    return FeatureBatch(dense=arr.copy())


class FeaturePosteriorState:
    """Posterior for a linear model on explicit (or factorized) features.

    With features phi and Z = noise I + sum phi phi^T, the reported std is
    sqrt(noise * phi^T Z^{-1} phi), which equals the GP posterior std under the
    kernel <phi(x), phi(y)>; the mean (when no trained network output is
    supplied) is the ridge prediction phi^T Z^{-1} sum phi y.

    ``mode``: ``dual`` (t x t Cholesky, default), ``primal`` (p x p matrix,
    explicit features only) or ``diag`` (diagonal of Z as a cheap proxy;
    approximate).
    """

    def __init__(self, noise_var: float, mode: str = "dual"):
        if noise_var <= 0:
            raise ArgumentError(f"noise variance must be positive, got {noise_var}")
        if mode not in ("dual", "primal", "diag"):
            raise ArgumentError(f"unknown feature posterior mode {mode!r}")
        self.noise_var = float(noise_var)
        self.mode = mode
        self.approximate = mode == "diag"
        self._hist: FeatureBatch | None = None
        self._chol = _GrowingCholesky(self.noise_var)
        self._Z = None
        self._b = None
        self.n = 0

    @property
    def Z_hat(self) -> np.ndarray:
        if self.mode != "primal":
            raise ArgumentError("Z_hat is only materialized in primal mode")
        return self._Z

    @property
    def b(self) -> np.ndarray:
        return self._b

    def extend(self, phi, y: float) -> None:
        fb = _as_features(phi)
        if fb.n != 1:
            raise ArgumentError("extend takes one feature vector")
        if self.mode == "dual":
            cross = self._hist.inner(fb)[:, 0] if self._hist is not None else np.zeros(0)
            self._chol.append(cross, float(fb.sq_norms()[0]), float(y))
        else:
            v = fb.to_dense()[0]
            if self._b is None:
                self._b = np.zeros_like(v)
                self._Z = (np.full_like(v, self.noise_var) if self.mode == "diag"
                           else self.noise_var * np.eye(v.size))
            self._Z += v * v if self.mode == "diag" else np.outer(v, v)
            self._b += y * v
        if self._hist is None:
            self._hist = fb.take(np.arange(1))
        else:
            self._hist.append(fb)
        self.n += 1

    def posterior(self, phi, trained_mean=None):
        """Means and stds for every row of ``phi``."""
        fb = _as_features(phi)
        if self.mode == "dual":
            prior = fb.sq_norms()
            cross = self._hist.inner(fb) if self._hist is not None else np.zeros((0, fb.n))
            mean, std = self._chol.predict(cross, prior)
        else:
            P = fb.to_dense()
            if self._Z is None:
                mean = np.zeros(fb.n)
                std = np.sqrt(np.einsum("ij,ij->i", P, P))
            elif self.mode == "diag":
                mean = P @ (self._b / self._Z)
                std = np.sqrt(self.noise_var * np.einsum("ij,ij->i", P, P / self._Z))
            else:
                try:
                    c = np.linalg.cholesky(self._Z)
                except np.linalg.LinAlgError as exc:
                    raise NumericalError(f"Z_hat is singular: {exc}") from exc
                A = solve_triangular(c, P.T, lower=True)
                mean = A.T @ solve_triangular(c, self._b, lower=True)
                std = np.sqrt(self.noise_var * np.einsum("ij,ij->j", A, A))
        if trained_mean is not None:
            mean = np.broadcast_to(np.asarray(trained_mean, dtype=float), mean.shape).copy()
        return mean, std


def feature_posterior(state: FeaturePosteriorState, phi, trained_mean=None) -> tuple[float, float]:
    mean, std = state.posterior(phi, None if trained_mean is None else [trained_mean])
    return float(mean[0]), float(std[0])


# --------------------------------------------------------------------------
# information gain


@dataclass
class InfoGainTrace:
    per_step: np.ndarray
    cumulative: np.ndarray
    selected: np.ndarray


def info_gain_logdet(K, noise_var: float) -> float:
    """0.5 * log det(I + K / noise)."""
    K = np.asarray(K, dtype=float)
    if K.size == 0:
        return 0.0
    try:
        c = np.linalg.cholesky(np.eye(K.shape[0]) + K / noise_var)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky failed in log-det: {exc}") from exc
    return float(np.sum(np.log(np.diag(c))))


def info_gain_increment(prev_std, noise_var: float):
    """0.5 * log(1 + prev_std^2 / noise): the chain-rule term for one new observation."""
    out = 0.5 * np.log1p(np.square(prev_std) / noise_var)
    return float(out) if np.ndim(out) == 0 else out


def greedy_info_gain_curve(pool, spec: KernelSpec, noise_var: float, T: int) -> InfoGainTrace:
    """Pick T pool points one by one, each time the one with the largest posterior std.

    Selection is without replacement, ties go to the lowest index. Pool
    variances are downdated in O(t * |pool|) per step.
    """
    X = kernels.check_points(pool, "pool")
    n = X.shape[0]
    if T > n:
        raise ArgumentError(f"pool of {n} points is exhausted before T={T}")
    var = kernels.kernel_diag(X, spec).astype(float)
    A = np.zeros((T, n))
    chol = _GrowingCholesky(noise_var, T)
    available = np.ones(n, dtype=bool)
    per_step = np.zeros(T)
    selected = np.zeros(T, dtype=int)
    for t in range(T):
        cand = np.where(available, var, -np.inf)
        i = int(np.argmax(cand))
        std = math.sqrt(max(var[i], 0.0))
        per_step[t] = info_gain_increment(std, noise_var)
        selected[t] = i
        available[i] = False
        k_row = kernels.cross_gram(X[i:i + 1], X, spec)[0]
        cross = k_row[selected[:t]]
        schur = chol.append(cross, float(kernels.kernel_diag(X[i:i + 1], spec)[0]), 0.0)
        row = chol.L[t, :t]
        A[t] = (k_row - row @ A[:t]) / math.sqrt(schur)
        var = var - A[t] ** 2
    return InfoGainTrace(per_step, np.cumsum(per_step), selected)
