"""Dose recommendation policies.

The selection rules are plain functions of a bounds table (or GP state) and
an admissible mask over the evaluation grid. The ``*Agent`` classes wrap
them with the per-run state a bandit loop needs: the GP posterior, probe
caches per context, and safe sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import BetaSchedule, BoundsTable, EvalGrid, compute_bounds
from .calculator import CalculatorParams, calculator_dose
from .environment import ProblemSpec
from .errors import DegenerateSetError
from .gp import GPConfig, GPState, ProbeCache, empty_state, gp_sample_on_grid, gp_update
from .kernels import LipschitzCertificate, points
from .safe_sets import SafeSet, expand_safe_set

__all__ = [
    "Recommendation",
    "CalculatorParams",
    "calculator_dose",
    "REWARDS",
    "taco_select",
    "cell_slack",
    "escada_step",
    "thompson_select",
    "gp_ucb_select",
    "random_safe_select",
    "RunSetup",
    "Agent",
    "TacoAgent",
    "ThompsonAgent",
    "GPUCBAgent",
    "CalculatorAgent",
    "RandomSafeAgent",
    "make_agent",
    "POLICY_NAMES",
]

_BRANCH_TEXT = {
    "target-feasible": "target lies inside the confidence interval of {k} dose(s); "
                       "recommending the one whose predicted response is closest to the target",
    "width-exploration": "no admissible dose is plausibly on target; "
                         "recommending the grid dose with the widest confidence interval",
    "sampled": "recommending the dose whose sampled response is closest to the target",
    "ucb-argmax": "recommending the dose with the highest optimistic pseudo-reward",
    "calculator": "recommending the rule-based calculator dose",
    "random-safe": "recommending a uniformly drawn dose from the safe set",
    "recovery": "every dose in the safe set is confidently unsafe; "
                "stepping to the nearest dose not confidently unsafe",
}


@dataclass(frozen=True)
class Recommendation:
    dose: float
    branch: str
    candidates: int = 0
    score: float = float("nan")
    index: int = -1
    diagnostics: dict = field(default_factory=dict)

    def explain(self) -> str:
        return _BRANCH_TEXT[self.branch].format(k=self.candidates)


def _first_min(values: np.ndarray, mask: np.ndarray) -> int:
    """Index of the smallest value among ``mask``; ties go to the lowest index (smallest dose)."""
    idx = np.flatnonzero(mask)
    return int(idx[np.argmin(values[idx])])


def taco_select(bounds: BoundsTable, admissible, target: float, cell_slack: float = 0.0) -> Recommendation:
    """Target-based confident acquisition over the admissible evaluation-grid doses.

    ``cell_slack`` widens the target test by the largest change of the
    response across half an evaluation cell, so a grid dose counts as
    feasible when some dose in its cell may hit the target. With the
    default of zero the test is ``lower <= target <= upper``.
    """
    admissible = np.asarray(admissible, dtype=bool)
    if not admissible.any():
        raise DegenerateSetError("admissible dose set is empty")
    feasible = admissible & (bounds.lower - cell_slack <= target) & (target <= bounds.upper + cell_slack)
    if feasible.any():
        gap = np.abs(bounds.mean - target)
        i = _first_min(gap, feasible)
        return Recommendation(float(bounds.doses[i]), "target-feasible", int(feasible.sum()),
                              float(gap[i]), i, _diag(bounds, i))
    grid_doses = admissible & bounds.is_anchor
    if not grid_doses.any():
        raise DegenerateSetError("no admissible dose lies on the dose grid")
    width = bounds.width
    i = _first_min(-width, grid_doses)
    return Recommendation(float(bounds.doses[i]), "width-exploration", 0, float(width[i]), i, _diag(bounds, i))


def _diag(bounds: BoundsTable, i: int) -> dict:
    return {
        "mean": float(bounds.mean[i]),
        "lower": float(bounds.lower[i]),
        "upper": float(bounds.upper[i]),
        "sqrt_beta": float(bounds.sqrt_beta),
    }


def _recovery(bounds: BoundsTable, safe: SafeSet, unsafe: np.ndarray, target: float) -> Recommendation:
    lo, hi = safe.hull
    d = bounds.doses
    cand = np.zeros(d.shape, dtype=bool)
    left = np.flatnonzero((d < lo) & ~unsafe)
    right = np.flatnonzero((d > hi) & ~unsafe)
    if left.size:
        cand[left[-1]] = True
    if right.size:
        cand[right[0]] = True
    if not cand.any():
        cand = ~unsafe if (~unsafe).any() else np.ones(d.shape, dtype=bool)
    gap = np.abs(bounds.mean - target)
    i = _first_min(gap, cand)
    return Recommendation(float(d[i]), "recovery", int(cand.sum()), float(gap[i]), i, _diag(bounds, i))


def safe_admissible(bounds: BoundsTable, safe: SafeSet, problem: ProblemSpec):
    """Expand-then-filter step shared by the safe policies.

    Returns ``(safe_set, admissible_mask, unsafe_mask)``. When every safe-set
    dose is confidently unsafe (only possible if the initial set was unsafe
    or the confidence bounds failed), doses whose own tightened interval
    lies inside the band are added to the safe set.
    """
    unsafe = (bounds.upper < problem.t_min) | (bounds.lower > problem.t_max)
    admissible = safe.contains(bounds.doses) & ~unsafe
    if not admissible.any():
        certified = (bounds.lower >= problem.t_min) & (bounds.upper <= problem.t_max)
        if certified.any():
            safe = safe.union([(x, x) for x in bounds.doses[certified]])
            admissible = safe.contains(bounds.doses) & ~unsafe
    return safe, admissible, unsafe


def cell_slack(eval_grid: EvalGrid, cert: LipschitzCertificate) -> float:
    """Bound on ``|f(d) - f(d')|`` for ``d'`` within half an evaluation cell of ``d``."""
    return float(cert.L * cert.metric.forward(0.5 * eval_grid.cell))


def escada_step(
    gp: GPState,
    schedule: BetaSchedule,
    safe_set: SafeSet,
    eval_grid: EvalGrid,
    problem: ProblemSpec,
    cert: LipschitzCertificate,
    n: int,
    cache: ProbeCache | None = None,
):
    """Expand the safe set for this round, then run TACO restricted to it.

    Returns ``(recommendation, safe_set, bounds)``.
    """
    bounds = compute_bounds(gp, schedule, eval_grid, n, cert, cache=cache)
    safe = expand_safe_set(safe_set, bounds, cert, problem.t_min, problem.t_max)
    safe, admissible, unsafe = safe_admissible(bounds, safe, problem)
    if not admissible.any():
        return _recovery(bounds, safe, unsafe, problem.target), safe, bounds
    try:
        rec = taco_select(bounds, admissible, problem.target, cell_slack(eval_grid, cert))
    except DegenerateSetError:
        # off-grid certified doses only
        i = _first_min(-bounds.width, admissible)
        rec = Recommendation(float(bounds.doses[i]), "width-exploration", 0, float(bounds.width[i]), i,
                             _diag(bounds, i))
    return rec, safe, bounds


def thompson_select(
    gp: GPState,
    admissible,
    eval_grid: EvalGrid,
    target: float,
    seed,
    cache: ProbeCache | None = None,
) -> Recommendation:
    """Draw one posterior function on the admissible grid doses; pick the dose closest to target."""
    admissible = np.asarray(admissible, dtype=bool)
    idx = np.flatnonzero(admissible)
    if idx.size == 0:
        raise DegenerateSetError("admissible dose set is empty")
    if cache is not None:
        sample = gp_sample_on_grid(gp, None, seed, cache=cache, index=idx)
    else:
        sample = gp_sample_on_grid(gp, eval_grid.inputs()[idx], seed)
    gap = np.abs(sample - target)
    j = int(np.argmin(gap))
    i = int(idx[j])
    return Recommendation(float(eval_grid.doses[i]), "sampled", int(idx.size), float(gap[j]), i,
                          {"sample": float(sample[j])})


REWARDS = {
    "r1": lambda y, t: -np.log(np.abs(y - t) + 1.0),
    "r2": lambda y, t: 1.0 - np.exp(np.abs(y - t) / 20.0),
    "r3": lambda y, t: -np.abs(y - t),
}


def gp_ucb_select(
    reward_gp: GPState,
    admissible,
    eval_grid: EvalGrid,
    schedule: BetaSchedule,
    n: int,
    cache: ProbeCache | None = None,
) -> Recommendation:
    """Classical upper-confidence-bound maximization of a pseudo-reward surface."""
    admissible = np.asarray(admissible, dtype=bool)
    if not admissible.any():
        raise DegenerateSetError("admissible dose set is empty")
    if cache is not None:
        mean, var = cache.predict(reward_gp)
    else:
        from .gp import predict

        mean, var = predict(reward_gp, eval_grid.inputs())
    root = schedule.root(n, _info(reward_gp) if schedule.mode == "theoretical" else 0.0)
    ucb = mean + root * np.sqrt(var)
    i = _first_min(-ucb, admissible)
    return Recommendation(float(eval_grid.doses[i]), "ucb-argmax", int(admissible.sum()), float(ucb[i]), i,
                          {"mean": float(mean[i]), "sqrt_beta": root})


def _info(gp: GPState) -> float:
    from .gp import information_gain

    return information_gain(gp)


def random_safe_select(safe_set: SafeSet, doses, seed) -> Recommendation:
    """Uniform draw among the evaluation-grid doses inside ``safe_set``."""
    doses = np.asarray(doses, dtype=float)
    inside = np.flatnonzero(safe_set.contains(doses))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if inside.size == 0:
        lo, hi = safe_set.hull
        dose = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        return Recommendation(dose, "random-safe", 1)
    i = int(inside[rng.integers(inside.size)])
    return Recommendation(float(doses[i]), "random-safe", int(inside.size), index=i)


# ----------------------------------------------------------------------------
# Stateful agents used by the experiment runner


@dataclass
class RunSetup:
    """Everything a policy needs to know about one bandit run."""

    problem: ProblemSpec
    gp_config: GPConfig
    schedule: BetaSchedule
    cert: LipschitzCertificate
    contexts: list
    grids: list  # EvalGrid per context
    initial: list | None = None  # SafeSet per context
    calculators: list | None = None  # (tuned, untuned) CalculatorParams per context
    reward_configs: dict | None = None  # reward name -> GPConfig


class Agent:
    name = "agent"
    safe = False

    def __init__(self, setup: RunSetup, seed: int = 0):
        self.setup = setup
        self.seed = int(seed)
        self.gp = empty_state(setup.gp_config)
        self.caches = [ProbeCache(setup.gp_config, g.inputs()) for g in setup.grids]
        self.safe_sets = list(setup.initial) if setup.initial is not None else None
        self.last_bounds = None

    def _rng(self, n: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(n,)))

    def recommend(self, ctx: int, n: int) -> Recommendation:
        raise NotImplementedError

    def update(self, ctx: int, dose: float, y: float) -> float:
        """Condition on an observation; returns the information-gain increment."""
        x = points(self.setup.contexts[ctx], [dose])[0]
        self.gp = gp_update(self.gp, x, y)
        v = self.gp.selection_variances[-1]
        return 0.5 * math.log1p(v / self.setup.gp_config.noise_variance)

    def safe_set(self, ctx: int):
        return None if self.safe_sets is None else self.safe_sets[ctx]

    def _bounds(self, ctx: int, n: int) -> BoundsTable:
        s = self.setup
        self.last_bounds = compute_bounds(self.gp, s.schedule, s.grids[ctx], n, s.cert, cache=self.caches[ctx])
        return self.last_bounds


class TacoAgent(Agent):
    """TACO, or ESCADA when ``safe`` (TACO restricted to the expanding safe set)."""

    def __init__(self, setup: RunSetup, seed: int = 0, safe: bool = False):
        self.safe = safe
        self.name = "ESCADA" if safe else "TACO"
        super().__init__(setup, seed)
        if safe and self.safe_sets is None:
            raise ValueError("ESCADA needs initial safe sets")

    def recommend(self, ctx: int, n: int) -> Recommendation:
        s = self.setup
        if self.safe:
            rec, self.safe_sets[ctx], self.last_bounds = escada_step(
                self.gp, s.schedule, self.safe_sets[ctx], s.grids[ctx], s.problem, s.cert, n,
                cache=self.caches[ctx])
            return rec
        bounds = self._bounds(ctx, n)
        return taco_select(bounds, np.ones(bounds.doses.shape, dtype=bool), s.problem.target,
                           cell_slack(s.grids[ctx], s.cert))


class ThompsonAgent(Agent):
    """Thompson sampling, or its safe variant restricted to the expanding safe set."""

    def __init__(self, setup: RunSetup, seed: int = 0, safe: bool = False):
        self.safe = safe
        self.name = "STS" if safe else "TS"
        super().__init__(setup, seed)
        if safe and self.safe_sets is None:
            raise ValueError("STS needs initial safe sets")

    def recommend(self, ctx: int, n: int) -> Recommendation:
        s = self.setup
        grid = s.grids[ctx]
        if self.safe:
            bounds = self._bounds(ctx, n)
            safe = expand_safe_set(self.safe_sets[ctx], bounds, s.cert, s.problem.t_min, s.problem.t_max)
            safe, admissible, unsafe = safe_admissible(bounds, safe, s.problem)
            self.safe_sets[ctx] = safe
            if not admissible.any():
                return _recovery(bounds, safe, unsafe, s.problem.target)
        else:
            admissible = np.ones(len(grid), dtype=bool)
        return thompson_select(self.gp, admissible, grid, s.problem.target, self._rng(n), cache=self.caches[ctx])


class GPUCBAgent(Agent):
    """GP-UCB on a pseudo-reward of the noisy observations; unconstrained."""

    def __init__(self, setup: RunSetup, seed: int = 0, reward: str = "r3"):
        if reward not in REWARDS:
            raise ValueError(f"unknown reward {reward!r}")
        self.reward = reward
        self.name = f"GP-UCB-{reward[1:]}"
        super().__init__(setup, seed)
        cfg = (setup.reward_configs or {}).get(reward)
        if cfg is None:
            raise ValueError(f"no GP configuration for reward {reward}")
        self.reward_config = cfg
        self.reward_gp = empty_state(cfg)
        self.reward_caches = [ProbeCache(cfg, g.inputs()) for g in setup.grids]

    def recommend(self, ctx: int, n: int) -> Recommendation:
        grid = self.setup.grids[ctx]
        return gp_ucb_select(self.reward_gp, np.ones(len(grid), dtype=bool), grid, self.setup.schedule, n,
                             cache=self.reward_caches[ctx])

    def update(self, ctx: int, dose: float, y: float) -> float:
        x = points(self.setup.contexts[ctx], [dose])[0]
        r = float(REWARDS[self.reward](y, self.setup.problem.target))
        self.reward_gp = gp_update(self.reward_gp, x, r)
        return super().update(ctx, dose, y)


class CalculatorAgent(Agent):
    """Rule-based calculator, tuned or untuned."""

    def __init__(self, setup: RunSetup, seed: int = 0, tuned: bool = False):
        self.tuned = tuned
        self.name = "Tuned-Calc" if tuned else "Calc"
        super().__init__(setup, seed)
        if setup.calculators is None:
            raise ValueError("calculator policy needs calculator parameters")

    def recommend(self, ctx: int, n: int) -> Recommendation:
        tuned, untuned = self.setup.calculators[ctx]
        cho, fasting = self.setup.contexts[ctx]
        dose = calculator_dose(tuned if self.tuned else untuned, cho, fasting)
        return Recommendation(min(dose, self.setup.problem.max_dose), "calculator", 1)


class RandomSafeAgent(Agent):
    """Uniform draws from the expanding safe set (baseline)."""

    safe = True

    def __init__(self, setup: RunSetup, seed: int = 0):
        self.name = "Random-Safe"
        super().__init__(setup, seed)
        if self.safe_sets is None:
            raise ValueError("random-safe policy needs initial safe sets")

    def recommend(self, ctx: int, n: int) -> Recommendation:
        s = self.setup
        bounds = self._bounds(ctx, n)
        safe = expand_safe_set(self.safe_sets[ctx], bounds, s.cert, s.problem.t_min, s.problem.t_max)
        safe, _, _ = safe_admissible(bounds, safe, s.problem)
        self.safe_sets[ctx] = safe
        return random_safe_select(safe, s.grids[ctx].doses, self._rng(n))


POLICY_NAMES = ("ESCADA", "TACO", "STS", "TS", "GP-UCB-1", "GP-UCB-2", "GP-UCB-3", "Calc", "Tuned-Calc",
                "Random-Safe")


def make_agent(name: str, setup: RunSetup, seed: int) -> Agent:
    if name == "ESCADA":
        return TacoAgent(setup, seed, safe=True)
    if name == "TACO":
        return TacoAgent(setup, seed, safe=False)
    if name == "STS":
        return ThompsonAgent(setup, seed, safe=True)
    if name == "TS":
        return ThompsonAgent(setup, seed, safe=False)
    if name.startswith("GP-UCB-"):
        return GPUCBAgent(setup, seed, reward="r" + name.rsplit("-", 1)[1])
    if name == "Calc":
        return CalculatorAgent(setup, seed, tuned=False)
    if name == "Tuned-Calc":
        return CalculatorAgent(setup, seed, tuned=True)
    if name == "Random-Safe":
        return RandomSafeAgent(setup, seed)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
