"""Exact Gaussian-process regression with incremental Cholesky updates.

A :class:`GPState` is an immutable value. Updating it returns a new state;
states derived from one another share an append-only buffer so that an
update costs ``O(n^2)`` rather than a full copy. Branching from an old state
(updating it twice) transparently copies the shared prefix.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, NumericalError
from .kernels import KernelSpec, kernel_matrix

__all__ = [
    "GPConfig",
    "GPState",
    "ProbeCache",
    "empty_state",
    "gp_update",
    "gp_predict",
    "predict",
    "posterior_covariance",
    "gp_sample_on_grid",
    "information_gain",
    "factor_from_scratch",
    "save_snapshot",
    "load_snapshot",
]

REFACTOR_EVERY = 256
JITTER = 1e-10
SNAPSHOT_VERSION = 1

_lineages = itertools.count()


@dataclass(frozen=True)
class GPConfig:
    """Kernel, known noise variance, and a constant prior mean.

    The posterior update is applied to ``y - prior_mean``; a constant
    offset lets responses such as glucose levels sit far from zero.
    """

    kernel: KernelSpec
    noise_variance: float
    prior_mean: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.noise_variance) or self.noise_variance <= 0:
            raise ValueError("noise variance must be positive")

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "noise_variance": self.noise_variance,
            "prior_mean": self.prior_mean,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GPConfig":
        return cls(KernelSpec(**data["kernel"]), float(data["noise_variance"]), float(data.get("prior_mean", 0.0)))


class _Buffer:
    """Append-only storage for one lineage of GP states."""

    def __init__(self, dim: int, capacity: int = 64):
        self.lineage = next(_lineages)
        self.length = 0
        self.X = np.empty((capacity, dim))
        self.y = np.empty(capacity)
        self.L = np.zeros((capacity, capacity))
        self.w = np.empty(capacity)  # L^{-1} (y - prior_mean)
        self.prevar = np.empty(capacity)  # sigma^2_{i-1}(x_i), selection order

    @property
    def capacity(self) -> int:
        return self.y.shape[0]

    def reserve(self, n: int):
        if n <= self.capacity:
            return
        cap = max(n, 2 * self.capacity)
        old = self.capacity
        X = np.empty((cap, self.X.shape[1]))
        X[:old] = self.X
        L = np.zeros((cap, cap))
        L[:old, :old] = self.L
        self.X, self.L = X, L
        for name in ("y", "w", "prevar"):
            arr = np.empty(cap)
            arr[:old] = getattr(self, name)
            setattr(self, name, arr)

    def fork(self, n: int) -> "_Buffer":
        buf = _Buffer(self.X.shape[1], max(64, 2 * n))
        buf.X[:n] = self.X[:n]
        buf.y[:n] = self.y[:n]
        buf.L[:n, :n] = self.L[:n, :n]
        buf.w[:n] = self.w[:n]
        buf.prevar[:n] = self.prevar[:n]
        buf.length = n
        return buf


@dataclass(frozen=True)
class GPState:
    """Posterior after ``n`` observations.

    ``factor`` is the lower Cholesky factor of ``K_n + noise * I``.
    """

    config: GPConfig
    n: int
    _buf: _Buffer = field(repr=False, compare=False)
    since_refactor: int = 0
    max_drift: float = 0.0

    @property
    def lineage(self) -> int:
        return self._buf.lineage

    @property
    def dim(self) -> int:
        return self.config.kernel.ndim

    @property
    def inputs(self) -> np.ndarray:
        out = self._buf.X[: self.n].copy()
        out.flags.writeable = False
        return out

    @property
    def outcomes(self) -> np.ndarray:
        out = self._buf.y[: self.n].copy()
        out.flags.writeable = False
        return out

    @property
    def factor(self) -> np.ndarray:
        out = self._buf.L[: self.n, : self.n].copy()
        out.flags.writeable = False
        return out

    @property
    def selection_variances(self) -> np.ndarray:
        """Predictive variance at each observed input just before it was added."""
        return self._buf.prevar[: self.n].copy()

    # internal views, no copies
    def _L(self):
        return self._buf.L[: self.n, : self.n]

    def _X(self):
        return self._buf.X[: self.n]

    def _w(self):
        return self._buf.w[: self.n]


def empty_state(config: GPConfig) -> GPState:
    return GPState(config, 0, _Buffer(config.kernel.ndim))


def _check_point(config: GPConfig, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (config.kernel.ndim,):
        raise DimensionError(f"point has shape {x.shape}, expected ({config.kernel.ndim},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("input point must be finite")
    return x


def factor_from_scratch(config: GPConfig, X) -> np.ndarray:
    """Cholesky factor of ``K + noise * I``, with one jittered retry."""
    X = np.asarray(X, dtype=float)
    K = kernel_matrix(config.kernel, X, X)
    K[np.diag_indices_from(K)] += config.noise_variance
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        K[np.diag_indices_from(K)] += JITTER * config.kernel.variance
        try:
            return np.linalg.cholesky(K)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("kernel matrix is not positive definite after jitter") from exc


def _refactor(state: GPState) -> GPState:
    n = state.n
    old = state._L()
    L = factor_from_scratch(state.config, state._X())
    drift = float(np.linalg.norm(L - old) / max(np.linalg.norm(L), 1e-300))
    buf = _Buffer(state.dim, max(64, 2 * n))
    buf.X[:n] = state._X()
    buf.y[:n] = state._buf.y[:n]
    buf.L[:n, :n] = L
    buf.w[:n] = solve_triangular(L, buf.y[:n] - state.config.prior_mean, lower=True)
    buf.prevar[:n] = state._buf.prevar[:n]
    buf.length = n
    return GPState(state.config, n, buf, 0, max(state.max_drift, drift))


def gp_update(state: GPState, x, y: float) -> GPState:
    """Condition on one more observation ``y`` at ``x``."""
    cfg = state.config
    x = _check_point(cfg, x)
    y = float(y)
    if not np.isfinite(y):
        raise ValueError(f"observation must be finite, got {y}")
    n = state.n
    buf = state._buf
    if buf.length != n:
        buf = buf.fork(n)
    buf.reserve(n + 1)

    kvec = kernel_matrix(cfg.kernel, buf.X[:n], x[None, :])[:, 0] if n else np.empty(0)
    kxx = cfg.kernel.variance
    row = solve_triangular(buf.L[:n, :n], kvec, lower=True) if n else np.empty(0)
    pivot = kxx + cfg.noise_variance - row @ row
    if not pivot > 0:
        pivot += JITTER * kxx
        if not pivot > 0:
            raise NumericalError(f"Cholesky extension broke down (pivot {pivot:.3e})")
    diag = np.sqrt(pivot)

    buf.X[n] = x
    buf.y[n] = y
    buf.L[n, :n] = row
    buf.L[n, n] = diag
    buf.w[n] = (y - cfg.prior_mean - row @ buf.w[:n]) / diag
    buf.prevar[n] = max(pivot - cfg.noise_variance, 0.0)
    buf.length = n + 1

    new = GPState(cfg, n + 1, buf, state.since_refactor + 1, state.max_drift)
    if new.since_refactor >= REFACTOR_EVERY:
        new = _refactor(new)
    return new


def _variance_tol(state: GPState) -> float:
    return 1e-12 * state.config.kernel.variance * max(1, state.n)


def _finish_variance(state: GPState, var: np.ndarray) -> np.ndarray:
    if np.any(var < -_variance_tol(state)):
        raise NumericalError(f"posterior variance {var.min():.3e} is negative beyond tolerance")
    return np.clip(var, 0.0, None)


def predict(state: GPState, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at each row of ``X``."""
    cfg = state.config
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size % cfg.kernel.ndim == 0:
        X = X.reshape(-1, cfg.kernel.ndim)
    if X.ndim != 2 or X.shape[1] != cfg.kernel.ndim:
        raise DimensionError(f"expected points of dimension {cfg.kernel.ndim}")
    prior = np.full(X.shape[0], cfg.kernel.variance)
    if state.n == 0:
        return np.full(X.shape[0], cfg.prior_mean), prior
    V = solve_triangular(state._L(), kernel_matrix(cfg.kernel, state._X(), X), lower=True)
    mean = cfg.prior_mean + V.T @ state._w()
    var = prior - np.einsum("ij,ij->j", V, V)
    return mean, _finish_variance(state, var)


def gp_predict(state: GPState, x) -> tuple[float, float]:
    """Posterior mean and variance at a single point."""
    x = _check_point(state.config, x)
    mean, var = predict(state, x[None, :])
    return float(mean[0]), float(var[0])


def posterior_covariance(state: GPState, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean vector and joint covariance matrix at the rows of ``X``."""
    cfg = state.config
    X = np.asarray(X, dtype=float).reshape(-1, cfg.kernel.ndim)
    K = kernel_matrix(cfg.kernel, X, X)
    if state.n == 0:
        return np.full(X.shape[0], cfg.prior_mean), K
    V = solve_triangular(state._L(), kernel_matrix(cfg.kernel, state._X(), X), lower=True)
    return cfg.prior_mean + V.T @ state._w(), K - V.T @ V


class ProbeCache:
    """Incrementally maintained posterior at a fixed set of probe points.

    Holds ``V = L^{-1} K(A_n, P)``; syncing with a state of the same lineage
    only solves for the rows added since the last sync.
    """

    def __init__(self, config: GPConfig, probes):
        self.config = config
        self.probes = np.asarray(probes, dtype=float).reshape(-1, config.kernel.ndim)
        self.prior_var = np.full(self.probes.shape[0], config.kernel.variance)
        self._lineage = None
        self._V = np.empty((0, self.probes.shape[0]))

    def _sync(self, state: GPState) -> np.ndarray:
        n = state.n
        have = self._V.shape[0]
        if self._lineage != state.lineage:
            have = 0
            self._V = np.empty((0, self.probes.shape[0]))
            self._lineage = state.lineage
        if n > have:
            L = state._L()
            Knew = kernel_matrix(self.config.kernel, state._X()[have:n], self.probes)
            if have:
                Knew -= L[have:n, :have] @ self._V
            block = solve_triangular(L[have:n, have:n], Knew, lower=True)
            self._V = np.vstack([self._V, block])
        return self._V[:n]

    def predict(self, state: GPState) -> tuple[np.ndarray, np.ndarray]:
        if state.n == 0:
            return np.full(self.prior_var.shape, state.config.prior_mean), self.prior_var.copy()
        V = self._sync(state)
        mean = state.config.prior_mean + V.T @ state._w()
        var = self.prior_var - np.einsum("ij,ij->j", V, V)
        return mean, _finish_variance(state, var)

    def covariance(self, state: GPState, index=None) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and covariance at a subset of the probes."""
        idx = slice(None) if index is None else np.asarray(index)
        P = self.probes[idx]
        K = kernel_matrix(self.config.kernel, P, P)
        if state.n == 0:
            return np.full(P.shape[0], state.config.prior_mean), K
        V = self._sync(state)[:, idx]
        return state.config.prior_mean + V.T @ state._w(), K - V.T @ V


def _sample_from(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(np.max(np.abs(evals))), 1e-300)
    if evals.min() < -1e-9 * scale * max(1, cov.shape[0]):
        raise NumericalError(f"posterior covariance has eigenvalue {evals.min():.3e}")
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return mean + root @ rng.standard_normal(mean.shape[0])


def gp_sample_on_grid(state: GPState, points, seed, cache: ProbeCache | None = None, index=None) -> np.ndarray:
    """One joint posterior sample at ``points`` (or at ``cache`` probes).

    The covariance is factorized by a symmetric eigendecomposition, which
    tolerates the near-singular matrices produced by fine dose grids.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if cache is not None:
        mean, cov = cache.covariance(state, index)
    else:
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            raise ValueError("need at least one point to sample")
        mean, cov = posterior_covariance(state, pts)
    return _sample_from(mean, cov, rng)


def information_gain(state: GPState, variances=None) -> float:
    """``0.5 * sum(log(1 + var / noise))`` over predictive variances at selection time."""
    v = state.selection_variances if variances is None else np.asarray(variances, dtype=float)
    if v.size == 0:
        return 0.0
    return float(0.5 * np.sum(np.log1p(v / state.config.noise_variance)))


def to_snapshot(state: GPState) -> dict:
    return {
        "version": SNAPSHOT_VERSION,
        "config": state.config.to_dict(),
        "inputs": state._X().tolist(),
        "outcomes": state._buf.y[: state.n].tolist(),
    }


def from_snapshot(data: dict) -> GPState:
    if data.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {data.get('version')!r}")
    state = empty_state(GPConfig.from_dict(data["config"]))
    for x, y in zip(data["inputs"], data["outcomes"]):
        state = gp_update(state, x, y)
    return state


def save_snapshot(state: GPState, path) -> None:
    Path(path).write_text(json.dumps(to_snapshot(state)))


def load_snapshot(path) -> GPState:
    return from_snapshot(json.loads(Path(path).read_text()))
