"""Interval safe sets, their expansion, and true-function reachability oracles.

Because the dose metric at a fixed context is a monotone function of
``|d - d'|``, the set of doses certified from a single safe dose is a closed
interval around it, so safe sets are kept as sorted disjoint intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .bounds import BoundsTable
from .kernels import LipschitzCertificate

__all__ = [
    "SafeSet",
    "ReachabilityClosure",
    "SafePathReport",
    "normalize_intervals",
    "expand_safe_set",
    "reachability_closure",
    "safe_path",
    "certification_radius",
]

_TOUCH = 1e-12


def normalize_intervals(intervals: Iterable, low: float = -np.inf, high: float = np.inf) -> tuple:
    """Clip to ``[low, high]``, sort, and merge overlapping or touching intervals."""
    items = sorted(
        (max(float(a), low), min(float(b), high)) for a, b in intervals
    )
    merged: list = []
    for a, b in items:
        if a > b:
            continue
        if merged and a <= merged[-1][1] + _TOUCH:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return tuple(merged)


@dataclass(frozen=True)
class SafeSet:
    """Doses certified safe at one context, as closed intervals within ``[0, max_dose]``."""

    context: tuple
    intervals: tuple
    max_dose: float
    round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "intervals", normalize_intervals(self.intervals, 0.0, self.max_dose))
        if not self.intervals:
            raise ValueError("safe set must be nonempty")

    @classmethod
    def singleton(cls, context, dose: float, max_dose: float) -> "SafeSet":
        ctx = tuple(float(c) for c in np.atleast_1d(context))
        return cls(ctx, ((dose, dose),), max_dose, 0)

    def contains(self, doses, tol: float = 1e-12):
        doses = np.asarray(doses, dtype=float)
        out = np.zeros(doses.shape, dtype=bool)
        for a, b in self.intervals:
            out |= (doses >= a - tol) & (doses <= b + tol)
        return out

    def __contains__(self, dose) -> bool:
        return bool(self.contains(float(dose)))

    @property
    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    @property
    def hull(self) -> tuple:
        return self.intervals[0][0], self.intervals[-1][1]

    def union(self, intervals: Iterable, round: int | None = None) -> "SafeSet":
        return SafeSet(
            self.context,
            self.intervals + tuple(intervals),
            self.max_dose,
            self.round if round is None else round,
        )

    def issubset(self, other: "SafeSet | Iterable", tol: float = 0.0) -> bool:
        """Every interval lies inside some interval of ``other``, up to ``tol``."""
        theirs = other.intervals if isinstance(other, SafeSet) else tuple(other)
        return all(
            any(c - tol <= a and b <= e + tol for c, e in theirs)
            for a, b in self.intervals
        )

    def to_list(self) -> list:
        return [[a, b] for a, b in self.intervals]


def certification_radius(slack, cert: LipschitzCertificate):
    """Dose radius reachable from a point with the given safety slack.

    Points with negative slack certify nothing (``nan``); zero slack
    certifies only the point itself.
    """
    slack = np.asarray(slack, dtype=float)
    out = np.full(slack.shape, np.nan)
    ok = slack >= 0
    if cert.L == 0:
        out[ok] = np.inf
    else:
        out[ok] = cert.metric.radius(slack[ok] / cert.L)
    return out


def expand_safe_set(
    prev: SafeSet,
    bounds: BoundsTable,
    cert: LipschitzCertificate,
    t_min: float,
    t_max: float,
) -> SafeSet:
    """Grow ``prev`` by every dose whose safety follows from a safe evaluation-grid dose.

    A dose ``d'`` is added when some ``d`` in ``prev`` has
    ``lower(d) - L q(d, d') >= t_min`` and ``upper(d) + L q(d, d') <= t_max``.
    Only evaluation-grid doses inside ``prev`` are scanned.
    """
    inside = prev.contains(bounds.doses)
    d = bounds.doses[inside]
    slack = np.minimum(bounds.lower[inside] - t_min, t_max - bounds.upper[inside])
    radius = certification_radius(slack, cert)
    grow = radius > 0
    new = [(c - r, c + r) for c, r in zip(d[grow], radius[grow])]
    return prev.union(new, round=bounds.n)


@dataclass(frozen=True)
class ReachabilityClosure:
    """Fixpoint of the epsilon-reachability operator on a finite dose grid."""

    context: tuple
    epsilon: float
    doses: np.ndarray
    mask: np.ndarray = field(repr=False)
    iterations: int

    @property
    def intervals(self) -> tuple:
        out = []
        idx = np.flatnonzero(self.mask)
        if idx.size == 0:
            return ()
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate([[idx[0]], idx[breaks + 1]])
        ends = np.concatenate([idx[breaks], [idx[-1]]])
        for s, e in zip(starts, ends):
            out.append((float(self.doses[s]), float(self.doses[e])))
        return tuple(out)

    def contains(self, dose: float, tol: float = 0.0) -> bool:
        return any(a - tol <= dose <= b + tol for a, b in self.intervals)


def reachability_closure(
    response: Callable[[np.ndarray], np.ndarray],
    initial: Iterable[float],
    epsilon: float,
    cert: LipschitzCertificate,
    t_min: float,
    t_max: float,
    doses,
    max_iterations: int = 100_000,
) -> ReachabilityClosure:
    """Iterate the epsilon-reachability operator on the true response to a fixpoint.

    Parameters
    ----------
    response : callable
        Noiseless response ``f(z, .)`` at a fixed context, vectorized over doses.
    initial : iterable of float
        Initial safe doses; they are inserted into the grid if absent.
    doses : array_like
        Grid on which the closure is represented.
    """
    initial = np.atleast_1d(np.asarray(list(initial), dtype=float))
    grid = np.union1d(np.asarray(doses, dtype=float), initial)
    f = np.asarray(response(grid), dtype=float)
    slack = np.minimum(f - epsilon - t_min, t_max - epsilon - f)
    radius = certification_radius(slack, cert)

    mask = np.isin(grid, initial)
    frontier = mask.copy()
    iterations = 0
    while frontier.any() and iterations < max_iterations:
        src = frontier & (radius > 0)
        added = np.zeros_like(mask)
        if src.any():
            lo = np.searchsorted(grid, grid[src] - radius[src], side="left")
            hi = np.searchsorted(grid, grid[src] + radius[src], side="right")
            marks = np.zeros(grid.size + 1, dtype=np.int64)
            np.add.at(marks, lo, 1)
            np.add.at(marks, hi, -1)
            added = np.cumsum(marks[:-1]) > 0
        frontier = added & ~mask
        mask |= added
        iterations += 1
    ctx = ()
    return ReachabilityClosure(ctx, float(epsilon), grid, mask, iterations)


@dataclass(frozen=True)
class SafePathReport:
    d1: float
    d2: float
    margin: float

    @property
    def exists(self) -> bool:
        return self.margin > 0


def safe_path(
    response: Callable[[np.ndarray], np.ndarray],
    d1: float,
    d2: float,
    t_min: float,
    t_max: float,
    epsilon: float,
    resolution: int = 10_000,
) -> SafePathReport:
    """Smallest distance (minus ``epsilon``) from the band edges along ``[d1, d2]``."""
    if d1 > d2:
        d1, d2 = d2, d1
    grid = np.linspace(d1, d2, max(int(resolution), 2)) if d2 > d1 else np.array([d1])
    f = np.asarray(response(grid), dtype=float)
    eta = float(min(np.min(t_max - epsilon - f), np.min(f - t_min - epsilon)))
    return SafePathReport(float(d1), float(d2), eta)
