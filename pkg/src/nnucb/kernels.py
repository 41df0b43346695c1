"""Exact NTK / CNTK kernels for ReLU networks on the unit sphere.

The fully-connected NTK is evaluated with the arc-cosine recursion

    Sigma^0 = Theta^0 = u = <x, y>
    Sigma^l = kappa_1(Sigma^{l-1})
    Theta^l = Theta^{l-1} * kappa_0(Sigma^{l-1}) + Sigma^l

which is the infinite-width limit of <g(x), g(y)> / m for the network in
:mod:`nnucb.neural` (first layer unscaled, sqrt(2/m) hidden scaling, sqrt(2)
output). ``Theta^L`` has diagonal ``L + 1``; normalized kernels divide by it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, DomainError, NumericalError

UNIT_TOL = 1e-9

KINDS = ("ntk", "cntk", "empirical_ntk", "empirical_cntk")


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel to evaluate.

    ``width`` and ``seed`` only matter for the empirical kinds, whose Gram is
    built from gradient features of one fixed randomly initialized network.
    """

    kind: str = "ntk"
    depth: int = 1
    width: int | None = None
    normalized: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.depth < 1:
            raise ArgumentError(f"depth must be >= 1, got {self.depth}")
        if self.kind.startswith("empirical"):
            if self.width is None or self.width < 1:
                raise ArgumentError("empirical kernels need a positive width")
            if self.kind == "empirical_cntk" and self.depth != 1:
                raise ArgumentError("the convolutional network is only defined with one hidden layer")

    @property
    def is_empirical(self) -> bool:
        return self.kind.startswith("empirical")

    @property
    def diag_value(self) -> float:
        return 1.0 if self.normalized else float(self.depth + 1)


def check_unit(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError(f"{name} must be a vector, got shape {x.shape}")
    if x.shape[0] < 1:
        raise DomainError(f"{name} is empty")
    n = np.linalg.norm(x)
    if abs(n - 1.0) > UNIT_TOL:
        raise DomainError(f"{name} must have unit norm, got {n!r}")
    return x


def check_points(X, name: str = "points") -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError(f"{name} must be a nonempty (n, d) array")
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise DomainError(f"{name}[{bad[0]}] has norm {norms[bad[0]]!r}, expected 1")
    return X


def kappa0(u):
    u = np.clip(u, -1.0, 1.0)
    return (np.pi - np.arccos(u)) / np.pi


def kappa1(u):
    u = np.clip(u, -1.0, 1.0)
    return (np.sqrt(np.maximum(1.0 - u * u, 0.0)) + u * (np.pi - np.arccos(u))) / np.pi


def ntk_from_cosine(u, depth: int, normalized: bool = True):
    """NTK as a function of the cosine between two unit inputs (vectorized)."""
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    sigma = u
    theta = u
    for _ in range(depth):
        dot = kappa0(sigma)
        sigma = kappa1(sigma)
        theta = theta * dot + sigma
    if normalized:
        theta = theta / (depth + 1)
    return theta


NEAR_ONE = 1e-6


def cosines(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Pairwise <x, y> for unit rows, with nearly (anti)parallel pairs recomputed
    as (|x+y|^2 - |x-y|^2) / (|x+y|^2 + |x-y|^2).

    arccos has unbounded slope at +-1, so the plain dot product's roundoff
    would show up as ~1e-8 errors in k(x, x); the difference form is exact for
    identical or opposite points.
    """
    U = X @ Y.T
    near = np.abs(U) > 1.0 - NEAR_ONE
    if np.any(near):
        i, j = np.nonzero(near)
        a = np.sum((X[i] - Y[j]) ** 2, axis=1)
        b = np.sum((X[i] + Y[j]) ** 2, axis=1)
        U[i, j] = (b - a) / (b + a)
    return U


def ntk_eval(x, y, depth: int = 1, normalized: bool = True) -> float:
    x = check_unit(x, "x")
    y = check_unit(y, "y")
    if x.shape != y.shape:
        raise DomainError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return float(ntk_from_cosine(cosines(x[None], y[None])[0, 0], depth, normalized))


def cyclic_shift(x, l: int) -> np.ndarray:
    """c_l . x = (x_{l+1}, ..., x_d, x_1, ..., x_l); works along the last axis."""
    return np.roll(np.asarray(x), -l, axis=-1)


def cntk_eval(x, y, depth: int = 1, normalized: bool = True) -> float:
    x = check_unit(x, "x")
    y = check_unit(y, "y")
    if x.shape != y.shape:
        raise DomainError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    d = x.shape[0]
    shifts = np.stack([cyclic_shift(y, l) for l in range(d)])
    return float(np.mean(ntk_from_cosine(cosines(x[None], shifts)[0], depth, normalized)))


def _exact_cross(X: np.ndarray, Y: np.ndarray, spec: KernelSpec) -> np.ndarray:
    if spec.kind == "ntk":
        return ntk_from_cosine(cosines(X, Y), spec.depth, spec.normalized)
    d = X.shape[1]
    out = np.zeros((X.shape[0], Y.shape[0]))
    for l in range(d):
        out += ntk_from_cosine(cosines(X, cyclic_shift(Y, l)), spec.depth, spec.normalized)
    return out / d


@lru_cache(maxsize=16)
def _empirical_network(kind: str, input_dim: int, width: int, depth: int, seed: int):
    from . import neural

    arch = "cnn2" if kind == "empirical_cntk" else "fc"
    return neural.gaussian_init(input_dim, width, depth, seed, arch=arch)


def _empirical_cross(X: np.ndarray, Y: np.ndarray | None, spec: KernelSpec) -> np.ndarray:
    from . import neural

    params = _empirical_network(spec.kind, X.shape[1], spec.width, spec.depth, spec.seed)
    fx = neural.feature_batch(params, X)
    fy = fx if Y is None else neural.feature_batch(params, Y)
    K = fx.inner(fy) / params.width
    if spec.normalized:
        K = K / (params.depth + 1)
    return K


def cross_gram(X, Y, spec: KernelSpec) -> np.ndarray:
    """Kernel matrix between two point sets (rows are unit vectors)."""
    X = check_points(X, "X")
    Y = check_points(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise DomainError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.is_empirical:
        return _empirical_cross(X, Y, spec)
    return _exact_cross(X, Y, spec)


def kernel_diag(X, spec: KernelSpec) -> np.ndarray:
    X = check_points(X, "X")
    if spec.is_empirical:
        from . import neural

        params = _empirical_network(spec.kind, X.shape[1], spec.width, spec.depth, spec.seed)
        d = neural.feature_batch(params, X).sq_norms() / params.width
        return d / (params.depth + 1) if spec.normalized else d
    if spec.kind == "cntk":
        # shift average of k(x, c_l x); equals 1 only for shift-invariant x
        d = X.shape[1]
        out = np.full(X.shape[0], spec.diag_value)
        for l in range(1, d):
            u = np.array([cosines(x[None], cyclic_shift(x, l)[None])[0, 0] for x in X])
            out += ntk_from_cosine(u, spec.depth, spec.normalized)
        return out / d
    return np.full(X.shape[0], spec.diag_value)


def gram(points, spec: KernelSpec) -> np.ndarray:
    """Symmetric kernel matrix of ``points``.

    Exact kinds fill entries from the closed form; the result is exactly
    symmetric because the recursion depends on <x, y> only (CNTK: because the
    shift average is symmetrized below, which is exact up to roundoff in the
    average itself).
    """
    X = check_points(points)
    if spec.is_empirical:
        K = _empirical_cross(X, None, spec)
    else:
        K = _exact_cross(X, X, spec)
    return 0.5 * (K + K.T)


# --------------------------------------------------------------------------
# Mercer-spectrum utilities


def harmonic_multiplicity(d: int, k: int) -> int:
    """Number of linearly independent degree-k spherical harmonics on S^{d-1}."""
    if d < 2:
        raise ArgumentError(f"dimension must be >= 2, got {d}")
    if k < 0:
        raise ArgumentError(f"degree must be >= 0, got {k}")
    if k == 0:
        return 1
    num = (2 * k + d - 2) * math.comb(k + d - 3, d - 2)
    if num % k:
        raise NumericalError(f"non-integer multiplicity for d={d}, k={k}")
    return num // k


def gegenbauer(k: int, d: int, t):
    """Gegenbauer (Legendre) polynomial of degree k in dimension d, with Q_k(1) = 1."""
    t = np.asarray(t, dtype=float)
    q_prev = np.ones_like(t)
    if k == 0:
        return q_prev
    q = t.copy()
    for j in range(1, k):
        q_prev, q = q, ((2 * j + d - 2) * t * q - j * q_prev) / (j + d - 2)
    return q


def sample_sphere(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def cntk_multiplicity_ratio(d: int, k: int, n_probe: int = 10000, seed: int = 0,
                            return_stderr: bool = False):
    """Monte-Carlo estimate of (1/d) sum_l Q_k(<x, c_l x>) over uniform x.

    This is the ratio between the shift-invariant and full degree-k harmonic
    multiplicities.
    """
    if d < 3:
        raise ArgumentError(f"dimension must be >= 3, got {d}")
    if n_probe < 1:
        raise ArgumentError("n_probe must be positive")
    if k == 0:
        return (1.0, 0.0) if return_stderr else 1.0
    X = sample_sphere(np.random.default_rng(seed), n_probe, d)
    vals = np.zeros(n_probe)
    for l in range(d):
        vals += gegenbauer(k, d, np.sum(X * cyclic_shift(X, l), axis=1))
    vals /= d
    mean = float(vals.mean())
    if return_stderr:
        return mean, float(vals.std(ddof=1) / math.sqrt(n_probe)) if n_probe > 1 else 0.0
    return mean


def spectrum_estimate(d: int, n: int, spec: KernelSpec, seed: int = 0) -> list[tuple[int, float]]:
    """Eigenvalues of Gram/n on n uniform sphere samples, largest first, ranks from 1."""
    if n < 50:
        raise ArgumentError(f"need at least 50 samples, got {n}")
    X = sample_sphere(np.random.default_rng(seed), n, d)
    try:
        eig = np.linalg.eigvalsh(gram(X, spec) / n)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolve failed: {exc}") from exc
    eig = eig[::-1]
    return [(i + 1, float(v)) for i, v in enumerate(eig)]


def spectrum_slope(spectrum, lo: int = 5, hi: int = 100) -> float:
    """Least-squares slope of log(eigenvalue) against log(rank) over [lo, hi]."""
    ranks = np.array([r for r, _ in spectrum if lo <= r <= hi], dtype=float)
    vals = np.array([v for r, v in spectrum if lo <= r <= hi])
    if ranks.size < 2 or np.any(vals <= 0):
        raise NumericalError("spectrum window has fewer than two positive eigenvalues")
    return float(np.polyfit(np.log(ranks), np.log(vals), 1)[0])
