"""Confidence-width schedules, dose discretizations and confidence bounds."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import SaturationError
from .gp import GPState, ProbeCache, information_gain, predict
from .kernels import DoseMetric, LipschitzCertificate, points

__all__ = [
    "BetaSchedule",
    "DoseGrid",
    "EvalGrid",
    "BoundsTable",
    "build_dose_grid",
    "build_eval_grid",
    "compute_bounds",
]


@dataclass(frozen=True)
class BetaSchedule:
    """Multiplier ``beta_n^{1/2}`` on the posterior standard deviation.

    ``fixed`` mode returns a constant. ``theoretical`` mode uses
    ``beta_n = 2 L^2 + 300 * gamma_n * log(n / delta)^3`` with ``gamma_n``
    replaced by ``inflation`` times the information gain actually achieved
    so far; the true maximum over designs is not computed.
    """

    mode: str = "fixed"
    sqrt_beta: float = 3.0
    delta: float = 0.05
    L: float = 1.0
    inflation: float = 2.0

    def __post_init__(self):
        if self.mode not in ("fixed", "theoretical"):
            raise ValueError(f"unknown beta mode {self.mode!r}")
        if self.mode == "fixed" and not self.sqrt_beta > 0:
            raise ValueError("fixed sqrt(beta) must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.L < 0 or self.inflation < 0:
            raise ValueError("L and inflation must be nonnegative")

    def beta(self, n: int, info_gain: float = 0.0) -> float:
        if self.mode == "fixed":
            return self.sqrt_beta**2
        if n < 1:
            raise ValueError("round index starts at 1")
        gamma = self.inflation * max(info_gain, 0.0)
        return 2.0 * self.L**2 + 300.0 * gamma * math.log(n / self.delta) ** 3

    def root(self, n: int, info_gain: float = 0.0) -> float:
        return math.sqrt(self.beta(n, info_gain))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "sqrt_beta": self.sqrt_beta,
            "delta": self.delta,
            "L": self.L,
            "inflation": self.inflation,
        }


@dataclass(frozen=True)
class DoseGrid:
    """Anchor doses ``0 = d_1 < ... < d_k <= max_dose`` one metric step apart."""

    context: tuple
    doses: np.ndarray
    lam: float
    step_radius: float  # lam / (2L), in metric units
    max_dose: float

    def __len__(self):
        return self.doses.size

    def nearest(self, doses) -> np.ndarray:
        """Index of the nearest anchor; ties go to the smaller dose."""
        doses = np.asarray(doses, dtype=float)
        hi = np.clip(np.searchsorted(self.doses, doses, side="left"), 0, self.doses.size - 1)
        lo = np.clip(hi - 1, 0, self.doses.size - 1)
        pick_lo = np.abs(doses - self.doses[lo]) <= np.abs(self.doses[hi] - doses)
        return np.where(pick_lo, lo, hi)


@dataclass(frozen=True)
class EvalGrid:
    """Finite stand-in for the continuous dose interval; contains every anchor."""

    grid: DoseGrid
    doses: np.ndarray
    anchor: np.ndarray  # index into grid.doses of the nearest anchor
    is_anchor: np.ndarray
    resolution: int

    @property
    def context(self) -> tuple:
        return self.grid.context

    @property
    def cell(self) -> float:
        if self.doses.size < 2:
            return 0.0
        return float(np.max(np.diff(self.doses)))

    def __len__(self):
        return self.doses.size

    def inputs(self) -> np.ndarray:
        return points(self.context, self.doses)


def build_dose_grid(
    metric: DoseMetric,
    L: float,
    context,
    max_dose: float,
    lam: float,
    epsilon: float | None = None,
) -> DoseGrid:
    """Discretize ``[0, max_dose]`` with anchors a metric distance ``lam / (2L)`` apart."""
    if not lam > 0 or not L > 0:
        raise ValueError("lam and L must be positive")
    if max_dose < 0:
        raise ValueError("max_dose must be nonnegative")
    if epsilon is not None and not lam < epsilon:
        warnings.warn(
            f"discretization lam={lam} is not below epsilon={epsilon}; "
            "convergence of the safe set to the reachable set is not guaranteed",
            stacklevel=2,
        )
    rho = lam / (2.0 * L)
    if rho >= metric.supremum:
        raise SaturationError(f"grid step {rho} reaches the metric supremum {metric.supremum}")
    step = float(metric.radius(rho))
    if not step > 0 or not np.isfinite(step):
        raise SaturationError(f"degenerate grid step {step}")
    count = int(math.floor(max_dose / step + 1e-9)) + 1
    doses = np.minimum(np.arange(count) * step, max_dose)
    ctx = tuple(float(c) for c in np.atleast_1d(context)) if context is not None else ()
    return DoseGrid(ctx, doses, float(lam), rho, float(max_dose))


def build_eval_grid(grid: DoseGrid, resolution: int = 4) -> EvalGrid:
    """Subdivide every anchor gap (and the tail up to ``max_dose``) ``resolution`` times."""
    resolution = int(resolution)
    if resolution < 1:
        raise ValueError("resolution must be a positive integer")
    anchors = grid.doses
    step = float(anchors[1] - anchors[0]) if anchors.size > 1 else grid.max_dose
    tol = 1e-9 * max(step, 1e-3)
    fine = (anchors[:, None] + np.arange(resolution)[None, :] * (step / resolution)).ravel()
    cand = np.concatenate([fine, [grid.max_dose]])
    cand = cand[cand <= grid.max_dose + tol]
    near = np.abs(cand - anchors[grid.nearest(cand)]) <= tol
    doses = np.unique(np.concatenate([cand[~near], anchors]))
    doses = doses[np.concatenate([[True], np.diff(doses) > tol])]
    anchor = grid.nearest(doses)
    is_anchor = doses == anchors[anchor]
    return EvalGrid(grid, doses, anchor, is_anchor, resolution)


@dataclass(frozen=True)
class BoundsTable:
    """Raw and Lipschitz-tightened confidence bounds over an evaluation grid."""

    context: tuple
    doses: np.ndarray
    anchor: np.ndarray
    is_anchor: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower_raw: np.ndarray
    upper_raw: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sqrt_beta: float
    n: int

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, value: float) -> np.ndarray:
        return (self.lower <= value) & (value <= self.upper)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dose", "is_anchor", "mean", "sd", "lower_raw", "upper_raw", "lower", "upper", "width"])
            for row in zip(self.doses, self.is_anchor, self.mean, self.sd, self.lower_raw,
                           self.upper_raw, self.lower, self.upper, self.width):
                writer.writerow([repr(float(row[0])), int(row[1])] + [repr(float(v)) for v in row[2:]])


def tighten(lower_raw, upper_raw, doses, anchor_doses, anchor, cert: LipschitzCertificate):
    """Lipschitz-tightened bounds from each dose's nearest anchor."""
    gap = cert.L * cert.metric.distance(doses, anchor_doses[anchor])
    # anchors are themselves eval points; locate their raw bounds
    pos = np.searchsorted(doses, anchor_doses)
    lower = np.maximum(lower_raw, lower_raw[pos][anchor] - gap)
    upper = np.minimum(upper_raw, upper_raw[pos][anchor] + gap)
    return lower, upper


def compute_bounds(
    gp: GPState,
    schedule: BetaSchedule,
    eval_grid: EvalGrid,
    n: int,
    cert: LipschitzCertificate,
    cache: ProbeCache | None = None,
    info_gain: float | None = None,
) -> BoundsTable:
    """Confidence bounds for round ``n`` (which uses the posterior after ``n - 1`` observations)."""
    if n < 1:
        raise ValueError("round index starts at 1")
    if cache is not None:
        mean, var = cache.predict(gp)
    else:
        mean, var = predict(gp, eval_grid.inputs())
    if info_gain is None and schedule.mode == "theoretical":
        info_gain = information_gain(gp)
    root = schedule.root(n, info_gain or 0.0)
    sd = np.sqrt(var)
    lo, hi = mean - root * sd, mean + root * sd
    lower, upper = tighten(lo, hi, eval_grid.doses, eval_grid.grid.doses, eval_grid.anchor, cert)
    return BoundsTable(
        eval_grid.context, eval_grid.doses, eval_grid.anchor, eval_grid.is_anchor,
        mean, sd, lo, hi, lower, upper, root, n,
    )
