"""Synthetic leveling environments with known ground truth.

Three response families stand in for a physiological simulator:

``linear-CF``
    ``f = G_M + CHO * CF / ICR + offset - CF * d``, clipped to ``[0, ceiling]``.
``saturating``
    The linear response passed through a softplus floor, so the insulin
    effect flattens out as the response approaches ``floor``.
``gp-sampled``
    ``f = target + sum_i a_i k(x_i, .)`` built from a joint GP draw at random
    anchors. It lies in the kernel's RKHS with an exactly known norm, which
    is a valid Lipschitz constant under the kernel metric.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import DoseGrid
from .calculator import CalculatorParams, calculator_dose
from .errors import DomainError, EscadaError
from .kernels import AbsoluteDoseMetric, KernelDoseMetric, KernelSpec, LipschitzCertificate, kernel_matrix
from .safe_sets import SafeSet

__all__ = [
    "ProblemSpec",
    "MealEvent",
    "ResponseModel",
    "LinearCFResponse",
    "SaturatingResponse",
    "GPSampledResponse",
    "LipschitzAudit",
    "true_response",
    "observe",
    "sample_meal_events",
    "audit_lipschitz",
    "initial_safe_set",
    "make_patients",
]

CHO_RANGE = (20.0, 80.0)
FASTING_RANGE = (100.0, 150.0)


@dataclass(frozen=True)
class ProblemSpec:
    """Dose domain ``[0, max_dose]``, response range ``[0, ceiling]`` and the safety band."""

    max_dose: float = 15.0
    ceiling: float = 600.0
    target: float = 112.5
    t_min: float = 70.0
    t_max: float = 180.0
    alpha: float = 20.0
    epsilon: float = 10.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list:
        out = []
        chain = [0.0, self.t_min, self.t_min + self.alpha, self.target,
                 self.t_max - self.alpha, self.t_max, self.ceiling]
        strict = [False, True, True, True, True, False]
        for (a, b), s in zip(zip(chain, chain[1:]), strict):
            if (s and not a < b) or (not s and not a <= b):
                out.append("need 0 <= t_min < t_min+alpha < target < t_max-alpha < t_max <= ceiling")
                break
        if not self.alpha > self.epsilon:
            out.append("alpha must exceed epsilon for a safe path to the target to exist")
        if not self.epsilon > 0:
            out.append("epsilon must be positive")
        if self.max_dose < 0:
            out.append("max_dose must be nonnegative")
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class MealEvent:
    """Carbohydrate intake (g) and fasting glucose (mg/dl)."""

    cho: float
    fasting: float

    @property
    def context(self) -> tuple:
        return (self.cho, self.fasting)


def sample_meal_events(count: int, seed, cho_range=CHO_RANGE, fasting_range=FASTING_RANGE) -> list:
    """I.i.d. uniform meal events."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    cho = rng.uniform(*cho_range, size=count)
    fasting = rng.uniform(*fasting_range, size=count)
    return [MealEvent(float(c), float(g)) for c, g in zip(cho, fasting)]


@dataclass(frozen=True)
class ResponseModel:
    """Base class: a patient's noiseless dose response plus noise level and certificate."""

    problem: ProblemSpec
    noise_sd: float
    patient_id: int = 0

    family = "abstract"

    def _raw(self, context, doses: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def response(self, context, doses) -> np.ndarray:
        doses = np.asarray(doses, dtype=float)
        tol = 1e-9 * max(1.0, self.problem.max_dose)
        if np.any(doses < -tol) or np.any(doses > self.problem.max_dose + tol):
            raise DomainError(f"dose outside [0, {self.problem.max_dose}]")
        return np.clip(self._raw(tuple(context), doses), 0.0, self.problem.ceiling)

    @property
    def certificate(self) -> LipschitzCertificate:
        raise NotImplementedError

    @property
    def tuned_calculator(self) -> CalculatorParams:
        raise NotImplementedError

    @property
    def untuned_calculator(self) -> CalculatorParams:
        raise NotImplementedError

    def optimal_dose(self, context) -> float:
        grid = np.linspace(0.0, self.problem.max_dose, 20001)
        f = self.response(context, grid)
        return float(grid[np.argmin(np.abs(f - self.problem.target))])

    def describe(self) -> dict:
        return {"family": self.family, "patient_id": self.patient_id, "noise_sd": self.noise_sd}


@dataclass(frozen=True)
class LinearCFResponse(ResponseModel):
    """Response falling by ``cf`` per unit of insulin."""

    cf: float = 30.0
    icr: float = 12.0
    offset: float = 10.0
    lipschitz_margin: float = 1.5
    calc_icr_factor: float = 1.0
    calc_cf_factor: float = 1.0

    family = "linear-CF"

    def baseline(self, context) -> float:
        cho, fasting = context
        return fasting + cho * self.cf / self.icr + self.offset

    def _raw(self, context, doses):
        return self.baseline(context) - self.cf * doses

    def optimal_dose(self, context) -> float:
        return float(np.clip((self.baseline(context) - self.problem.target) / self.cf, 0.0, self.problem.max_dose))

    @property
    def certificate(self) -> LipschitzCertificate:
        return LipschitzCertificate(self.lipschitz_margin * self.cf, AbsoluteDoseMetric())

    @property
    def tuned_calculator(self) -> CalculatorParams:
        return CalculatorParams(self.icr, self.cf, self.problem.target - self.offset)

    @property
    def untuned_calculator(self) -> CalculatorParams:
        return CalculatorParams(self.icr * self.calc_icr_factor, self.cf * self.calc_cf_factor, self.problem.target)

    def describe(self) -> dict:
        out = super().describe()
        out.update(cf=self.cf, icr=self.icr, offset=self.offset, L=self.certificate.L)
        return out


@dataclass(frozen=True)
class SaturatingResponse(LinearCFResponse):
    """Linear response smoothly floored at ``floor`` by a softplus of width ``softness``."""

    floor: float = 40.0
    softness: float = 10.0

    family = "saturating"

    def _raw(self, context, doses):
        lin = super()._raw(context, doses)
        return self.floor + self.softness * np.logaddexp(0.0, (lin - self.floor) / self.softness)

    def optimal_dose(self, context) -> float:
        excess = (self.problem.target - self.floor) / self.softness
        lin_star = self.floor + self.softness * (excess + np.log1p(-np.exp(-excess)))
        d = (self.baseline(context) - lin_star) / self.cf
        return float(np.clip(d, 0.0, self.problem.max_dose))

    def describe(self) -> dict:
        out = super().describe()
        out.update(floor=self.floor, softness=self.softness)
        return out


@dataclass(frozen=True)
class GPSampledResponse(ResponseModel):
    """Kernel expansion around the target, drawn from the policies' own GP prior."""

    kernel: KernelSpec = None
    anchors: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)
    calculator: CalculatorParams = CalculatorParams(12.0, 30.0, 112.5)

    family = "gp-sampled"

    @classmethod
    def draw(cls, problem: ProblemSpec, kernel: KernelSpec, noise_sd: float, seed: int,
             n_anchors: int = 40, fixed_context=None, patient_id: int = 0,
             cache_dir=None) -> "GPSampledResponse":
        """Sample a truth; with ``cache_dir`` the draw is stored on disk keyed by its inputs."""
        key = None
        if cache_dir is not None:
            h = hashlib.sha256(repr((problem.to_dict(), kernel.to_dict(), seed, n_anchors,
                                     fixed_context)).encode()).hexdigest()[:16]
            key = Path(cache_dir) / f"gp_truth_{h}.npz"
            if key.exists():
                data = np.load(key)
                return cls(problem, noise_sd, patient_id, kernel, data["anchors"], data["weights"])
        rng = np.random.default_rng(seed)
        if fixed_context is None:
            ctx = np.column_stack([rng.uniform(*CHO_RANGE, n_anchors), rng.uniform(*FASTING_RANGE, n_anchors)])
        else:
            ctx = np.tile(np.asarray(fixed_context, dtype=float), (n_anchors, 1))
        anchors = np.column_stack([ctx, rng.uniform(0.0, problem.max_dose, n_anchors)])
        K = kernel_matrix(kernel, anchors, anchors)
        values = np.linalg.cholesky(K + 1e-8 * kernel.variance * np.eye(n_anchors)) @ rng.standard_normal(n_anchors)
        weights = np.linalg.solve(K + 1e-2 * kernel.variance * np.eye(n_anchors), values)
        if key is not None:
            key.parent.mkdir(parents=True, exist_ok=True)
            np.savez(key, anchors=anchors, weights=weights)
        return cls(problem, noise_sd, patient_id, kernel, anchors, weights)

    def _raw(self, context, doses):
        x = np.column_stack([np.broadcast_to(np.asarray(context, float), (doses.size, 2)), doses.ravel()])
        vals = self.problem.target + kernel_matrix(self.kernel, x, self.anchors) @ self.weights
        return vals.reshape(doses.shape)

    @property
    def rkhs_norm(self) -> float:
        K = kernel_matrix(self.kernel, self.anchors, self.anchors)
        return float(np.sqrt(max(self.weights @ K @ self.weights, 0.0)))

    @property
    def certificate(self) -> LipschitzCertificate:
        return LipschitzCertificate(self.rkhs_norm * (1 + 1e-9), KernelDoseMetric(self.kernel))

    @property
    def tuned_calculator(self) -> CalculatorParams:
        return self.calculator

    @property
    def untuned_calculator(self) -> CalculatorParams:
        return self.calculator

    def describe(self) -> dict:
        out = super().describe()
        out.update(rkhs_norm=self.rkhs_norm, anchors=int(self.anchors.shape[0]))
        return out


def true_response(model: ResponseModel, z: MealEvent, d: float) -> float:
    """Noiseless response at one meal event and dose."""
    return float(model.response(_ctx(z), np.array([d]))[0])


def observe(model: ResponseModel, z: MealEvent, d: float, seed) -> float:
    """Noisy response ``f(z, d) + N(0, noise_sd^2)``; ``seed`` fixes the draw."""
    truth = true_response(model, z, d)
    if model.noise_sd == 0:
        return truth
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return truth + model.noise_sd * float(rng.standard_normal())


def _ctx(z) -> tuple:
    return z.context if isinstance(z, MealEvent) else tuple(z)


@dataclass(frozen=True)
class LipschitzAudit:
    passed: bool
    worst_ratio: float  # max |f(x) - f(x')| / q(x, x')
    L: float

    @property
    def excess(self) -> float:
        """``worst_ratio / L``; above 1 means the certificate is violated."""
        return self.worst_ratio / self.L if self.L > 0 else (np.inf if self.worst_ratio > 0 else 0.0)


def audit_lipschitz(model: ResponseModel, cert: LipschitzCertificate | None = None,
                    sample_count: int = 2000, seed=0) -> LipschitzAudit:
    """Empirical check of ``|f(z,d) - f(z,d')| <= L q(d, d')`` on random same-context pairs.

    Half of the pairs are close together, to catch steep local slopes.
    """
    if sample_count < 1000:
        raise ValueError("audit needs at least 1000 pairs")
    cert = model.certificate if cert is None else cert
    rng = np.random.default_rng(seed)
    events = sample_meal_events(sample_count, rng)
    top = model.problem.max_dose
    d1 = rng.uniform(0.0, top, sample_count)
    far = rng.uniform(0.0, top, sample_count)
    near = np.clip(d1 + rng.normal(0.0, 0.01 * max(top, 1e-9), sample_count), 0.0, top)
    d2 = np.where(np.arange(sample_count) % 2 == 0, far, near)
    worst = 0.0
    for ev, a, b in zip(events, d1, d2):
        q = float(cert.metric.distance(a, b))
        if q <= 1e-12:
            continue
        fa, fb = model.response(ev.context, np.array([a, b]))
        worst = max(worst, abs(fa - fb) / q)
    return LipschitzAudit(worst <= cert.L * (1 + 1e-9) + 1e-12, worst, cert.L)


def initial_safe_set(model: ResponseModel, z: MealEvent, mode: str, grid: DoseGrid,
                     fixed_dose: float | None = None) -> SafeSet:
    """Singleton initial safe set on the dose grid.

    ``calculator`` and ``tuned-calculator`` snap the calculator's dose to the
    nearest grid anchor and may be truly unsafe. ``oracle`` picks the truly
    safe anchor nearest to the untuned calculator's suggestion. ``fixed``
    snaps ``fixed_dose``.
    """
    p = model.problem
    ctx = _ctx(z)
    cho, fasting = ctx
    if mode == "calculator":
        dose = calculator_dose(model.untuned_calculator, cho, fasting)
    elif mode == "tuned-calculator":
        dose = calculator_dose(model.tuned_calculator, cho, fasting)
    elif mode == "fixed":
        if fixed_dose is None:
            raise ValueError("fixed mode needs fixed_dose")
        dose = fixed_dose
    elif mode == "oracle":
        hint = calculator_dose(model.untuned_calculator, cho, fasting)
        f = model.response(ctx, grid.doses)
        safe = (f >= p.t_min) & (f <= p.t_max)
        if not safe.any():
            raise EscadaError("no truly safe dose on the grid for this context")
        idx = np.flatnonzero(safe)
        dose = grid.doses[idx[np.argmin(np.abs(grid.doses[idx] - hint))]]
    else:
        raise ValueError(f"unknown initial safe set mode {mode!r}")
    dose = min(max(float(dose), 0.0), p.max_dose)
    anchor = float(grid.doses[grid.nearest(dose)])
    return SafeSet.singleton(ctx, anchor, p.max_dose)


def make_patients(problem: ProblemSpec, family: str, count: int, seed, noise_sd: float,
                  cf_range=(15.0, 40.0), icr_range=(8.0, 20.0), offset_range=(0.0, 25.0),
                  calc_mismatch=(0.7, 1.4), lipschitz_margin: float = 1.5,
                  kernel: KernelSpec | None = None, gp_anchors: int = 40,
                  cache_dir=None, fixed_context=None, **family_kwargs) -> list:
    """Heterogeneous patients with parameters drawn from the configured ranges."""
    rng = np.random.default_rng(seed)
    out = []
    for pid in range(count):
        if family == "gp-sampled":
            if kernel is None:
                raise ValueError("gp-sampled patients need the policies' kernel")
            out.append(GPSampledResponse.draw(problem, kernel, noise_sd, int(rng.integers(2**31)),
                                              n_anchors=gp_anchors, fixed_context=fixed_context,
                                              patient_id=pid, cache_dir=cache_dir))
            continue
        params = dict(
            cf=float(rng.uniform(*cf_range)),
            icr=float(rng.uniform(*icr_range)),
            offset=float(rng.uniform(*offset_range)),
            lipschitz_margin=lipschitz_margin,
            calc_icr_factor=float(rng.uniform(*calc_mismatch)),
            calc_cf_factor=float(rng.uniform(*calc_mismatch)),
        )
        cls = {"linear-CF": LinearCFResponse, "saturating": SaturatingResponse}.get(family)
        if cls is None:
            raise ValueError(f"unknown response family {family!r}")
        out.append(cls(problem, noise_sd, pid, **params, **family_kwargs))
    return out
