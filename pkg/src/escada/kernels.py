"""Kernels, the kernel-induced metric, and dose metrics.

Inputs are points of the joint context-dose space laid out as
``[context..., dose]``; the dose is always the last coordinate. Both kernel
families are products of one-dimensional stationary factors, so at a fixed
context the kernel metric depends on the doses only through ``|d1 - d2|``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericalError, SaturationError

__all__ = [
    "KernelSpec",
    "LipschitzCertificate",
    "DoseMetric",
    "KernelDoseMetric",
    "AbsoluteDoseMetric",
    "kernel_eval",
    "kernel_matrix",
    "kernel_metric",
    "inverse_dose_metric",
]

FAMILIES = ("squared-exponential", "laplacian")
_RADICAND_TOL = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Stationary product kernel with per-dimension lengthscales.

    Parameters
    ----------
    family : {"squared-exponential", "laplacian"}
    lengthscales : sequence of float
        One positive lengthscale per input dimension (dose last).
    variance : float
        Signal variance, equal to ``k(x, x)``.
    """

    family: str
    lengthscales: tuple
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not ls or any(not np.isfinite(v) or v <= 0 for v in ls):
            raise ValueError("lengthscales must be positive and finite")
        if not np.isfinite(self.variance) or self.variance <= 0:
            raise ValueError("signal variance must be positive")
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def ndim(self) -> int:
        return len(self.lengthscales)

    @property
    def dose_lengthscale(self) -> float:
        return self.lengthscales[-1]

    def profile(self, u):
        """Correlation as a function of the scaled distance ``u >= 0``."""
        u = np.asarray(u, dtype=float)
        if self.family == "squared-exponential":
            return np.exp(-0.5 * u * u)
        return np.exp(-u)

    def decorrelation(self, u):
        """``1 - profile(u)``, accurate for small ``u``."""
        u = np.asarray(u, dtype=float)
        if self.family == "squared-exponential":
            return -np.expm1(-0.5 * u * u)
        return -np.expm1(-u)

    def to_dict(self) -> dict:
        return {"family": self.family, "lengthscales": list(self.lengthscales), "variance": self.variance}


def _as_points(spec: KernelSpec, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.shape[0] == spec.ndim else arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != spec.ndim:
        raise DimensionError(
            f"points have dimension {arr.shape[-1]}, kernel expects {spec.ndim}"
        )
    return arr


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    """Cross-covariance matrix ``[k(a_i, b_j)]``."""
    a = _as_points(spec, a)
    b = _as_points(spec, b)
    ls = np.asarray(spec.lengthscales)
    diff = (a[:, None, :] - b[None, :, :]) / ls
    if spec.family == "squared-exponential":
        return spec.variance * np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))
    return spec.variance * np.exp(-np.abs(diff).sum(axis=-1))


def kernel_eval(spec: KernelSpec, x, x_prime) -> float:
    """Evaluate ``k(x, x')`` for two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != (spec.ndim,) or x_prime.shape != (spec.ndim,):
        raise DimensionError(
            f"expected points of dimension {spec.ndim}, got {x.shape} and {x_prime.shape}"
        )
    return float(kernel_matrix(spec, x[None, :], x_prime[None, :])[0, 0])


def _metric_from_radicand(rad):
    rad = np.asarray(rad, dtype=float)
    if np.any(rad < -_RADICAND_TOL):
        raise NumericalError(f"negative metric radicand {rad.min():.3e}; kernel is not valid")
    return np.sqrt(np.clip(rad, 0.0, None))


def kernel_metric(spec: KernelSpec, x, x_prime) -> float:
    """Kernel-induced distance ``sqrt(k(x,x) - 2k(x,x') + k(x',x'))``."""
    kxx = kernel_eval(spec, x, x)
    kyy = kernel_eval(spec, x_prime, x_prime)
    kxy = kernel_eval(spec, x, x_prime)
    return float(_metric_from_radicand(kxx - 2.0 * kxy + kyy))


def inverse_dose_metric(spec: KernelSpec, context, rho: float) -> float:
    """Dose distance ``|d1 - d2|`` whose kernel metric at ``context`` equals ``rho``.

    Raises
    ------
    SaturationError
        If ``rho`` is at or above ``sqrt(2 * variance)``, the supremum of the
        metric; callers treat the radius as unbounded.
    """
    if context is not None and len(np.atleast_1d(context)) != spec.ndim - 1:
        raise DimensionError(f"context must have dimension {spec.ndim - 1}")
    rho = float(rho)
    if rho < 0:
        raise ValueError("metric radius must be nonnegative")
    sup = np.sqrt(2.0 * spec.variance)
    if rho >= sup:
        raise SaturationError(f"radius {rho} is not below the metric supremum {sup}")
    log_corr = np.log1p(-rho * rho / (2.0 * spec.variance))
    if spec.family == "squared-exponential":
        u = np.sqrt(max(-2.0 * log_corr, 0.0))
    else:
        u = max(-log_corr, 0.0)
    return float(u * spec.dose_lengthscale)


@dataclass(frozen=True)
class DoseMetric:
    """Distance between doses at a fixed context, as a function of ``|d1 - d2|``.

    Subclasses provide the forward map ``K`` and its inverse. ``radius``
    returns ``inf`` where the inverse saturates.
    """

    def forward(self, r):
        raise NotImplementedError

    def radius(self, rho):
        raise NotImplementedError

    @property
    def supremum(self) -> float:
        return float("inf")

    def distance(self, d1, d2):
        return self.forward(np.abs(np.asarray(d1, dtype=float) - np.asarray(d2, dtype=float)))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class AbsoluteDoseMetric(DoseMetric):
    """``q(d1, d2) = scale * |d1 - d2|``, for environments certified in dose units."""

    scale: float = 1.0

    def forward(self, r):
        return self.scale * np.asarray(r, dtype=float)

    def radius(self, rho):
        return np.asarray(rho, dtype=float) / self.scale

    def to_dict(self) -> dict:
        return {"kind": "absolute", "scale": self.scale}


@dataclass(frozen=True)
class KernelDoseMetric(DoseMetric):
    """The kernel metric restricted to a fixed context."""

    kernel: KernelSpec

    def forward(self, r):
        r = np.asarray(r, dtype=float)
        gap = self.kernel.decorrelation(r / self.kernel.dose_lengthscale)
        return _metric_from_radicand(2.0 * self.kernel.variance * gap)

    def radius(self, rho):
        rho = np.asarray(rho, dtype=float)
        out = np.full(rho.shape, np.inf)
        ok = rho < self.supremum
        log_corr = np.log1p(-rho[ok] ** 2 / (2.0 * self.kernel.variance))
        if self.kernel.family == "squared-exponential":
            u = np.sqrt(np.clip(-2.0 * log_corr, 0.0, None))
        else:
            u = np.clip(-log_corr, 0.0, None)
        out[ok] = u * self.kernel.dose_lengthscale
        return out if out.ndim else float(out)

    @property
    def supremum(self) -> float:
        return float(np.sqrt(2.0 * self.kernel.variance))

    def to_dict(self) -> dict:
        return {"kind": "kernel", "kernel": self.kernel.to_dict()}


@dataclass(frozen=True)
class LipschitzCertificate:
    """``|f(z, d) - f(z, d')| <= L * metric(d, d')`` at every context."""

    L: float
    metric: DoseMetric

    def __post_init__(self):
        if not np.isfinite(self.L) or self.L < 0:
            raise ValueError("Lipschitz constant must be finite and nonnegative")
        object.__setattr__(self, "L", float(self.L))


def metric_from_dict(data: dict, kernel: KernelSpec | None = None) -> DoseMetric:
    kind = data.get("kind")
    if kind == "absolute":
        return AbsoluteDoseMetric(float(data.get("scale", 1.0)))
    if kind == "kernel":
        spec = kernel if "kernel" not in data else KernelSpec(**data["kernel"])
        if spec is None:
            raise ValueError("kernel metric needs a kernel")
        return KernelDoseMetric(spec)
    raise ValueError(f"unknown metric kind {kind!r}")


def points(contexts: Sequence[float] | np.ndarray, doses) -> np.ndarray:
    """Stack a single context with many doses into joint input points."""
    doses = np.atleast_1d(np.asarray(doses, dtype=float))
    ctx = np.atleast_1d(np.asarray(contexts, dtype=float))
    return np.column_stack([np.broadcast_to(ctx, (doses.size, ctx.size)), doses])
