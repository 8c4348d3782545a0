"""Independent reference computations checked against the fast implementations.

Each check returns an :class:`OracleResult` with the worst discrepancy seen.
The GP functions are looked up on the module at call time so a patched
implementation is exercised as well.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import gp as gpmod
from .environment import LinearCFResponse, ProblemSpec, SaturatingResponse
from .kernels import AbsoluteDoseMetric, KernelDoseMetric, KernelSpec, kernel_matrix
from .safe_sets import reachability_closure, safe_path

__all__ = ["OracleResult", "OracleReport", "run_oracle_checks", "dense_posterior"]


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<30} worst={self.worst:.3e}  tol={self.tolerance:.1e}  {self.detail}"


@dataclass
class OracleReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"{'all passed' if self.passed else 'FAILURES'} in {self.seconds:.1f}s")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "seconds": self.seconds,
            "results": [
                {"name": r.name, "passed": bool(r.passed), "worst": float(r.worst),
                 "tolerance": float(r.tolerance), "detail": r.detail}
                for r in self.results
            ],
        }


def dense_posterior(config: gpmod.GPConfig, X, y, Xs):
    """Posterior mean and variance by direct solves against ``K + noise * I``."""
    X = np.asarray(X, float)
    K = kernel_matrix(config.kernel, X, X) + config.noise_variance * np.eye(len(X))
    Ks = kernel_matrix(config.kernel, X, Xs)
    alpha = np.linalg.solve(K, np.asarray(y, float) - config.prior_mean)
    mean = config.prior_mean + Ks.T @ alpha
    var = config.kernel.variance - np.sum(Ks * np.linalg.solve(K, Ks), axis=0)
    return mean, var


def _random_config(rng) -> gpmod.GPConfig:
    fam = ("squared-exponential", "laplacian")[rng.integers(2)]
    ls = tuple(rng.uniform(0.5, 3.0, 3))
    kern = KernelSpec(fam, ls, float(rng.uniform(0.5, 4.0)))
    return gpmod.GPConfig(kern, float(rng.uniform(0.05, 0.5)), float(rng.normal()))


def check_dense_inversion(trajectories: int = 100, length: int = 40, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trajectories):
        cfg = _random_config(rng)
        X = rng.uniform(0, 5, (length, 3))
        y = rng.normal(size=length) * np.sqrt(cfg.kernel.variance) + cfg.prior_mean
        Xs = rng.uniform(0, 5, (25, 3))
        s = gpmod.empty_state(cfg)
        cache = gpmod.ProbeCache(cfg, Xs)
        for i in range(length):
            s = gpmod.gp_update(s, X[i], y[i])
            if i % 8 == 7 or i == length - 1:
                m_ref, v_ref = dense_posterior(cfg, X[: i + 1], y[: i + 1], Xs)
                for m, v in (gpmod.predict(s, Xs), cache.predict(s)):
                    scale_m = max(np.max(np.abs(m_ref)), 1.0)
                    worst = max(worst, float(np.max(np.abs(m - m_ref)) / scale_m))
                    worst = max(worst, float(np.max(np.abs(v - v_ref)) / cfg.kernel.variance))
    tol = 1e-8
    return OracleResult("dense GP inversion", worst <= tol, worst, tol,
                        f"{trajectories} trajectories of length {length}")


def check_information_gain(trajectories: int = 20, length: int = 100, seed: int = 1) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trajectories):
        cfg = _random_config(rng)
        X = rng.uniform(0, 5, (length, 3))
        s = gpmod.empty_state(cfg)
        for i in range(length):
            s = gpmod.gp_update(s, X[i], float(rng.normal()))
        K = kernel_matrix(cfg.kernel, X, X)
        _, logdet = np.linalg.slogdet(np.eye(length) + K / cfg.noise_variance)
        worst = max(worst, abs(gpmod.information_gain(s) - 0.5 * logdet))
    tol = 1e-6
    return OracleResult("information gain log-det", worst <= tol, worst, tol, f"n={length}")


def check_factor_drift(length: int = 600, seed: int = 2) -> OracleResult:
    """Frobenius drift of the incremental factor, at refactorizations and at the end."""
    rng = np.random.default_rng(seed)
    cfg = gpmod.GPConfig(KernelSpec("squared-exponential", (1.0, 1.0, 0.7), 2.0), 0.01)
    s = gpmod.empty_state(cfg)
    for _ in range(length):
        s = gpmod.gp_update(s, rng.uniform(0, 4, 3), float(rng.normal()))
    L_ref = gpmod.factor_from_scratch(cfg, s.inputs)
    final = float(np.linalg.norm(s.factor - L_ref) / np.linalg.norm(L_ref))
    worst = max(final, s.max_drift)
    tol = 1e-8
    return OracleResult("incremental factor drift", worst <= tol, worst, tol,
                        f"refactor drift {s.max_drift:.2e}, final {final:.2e}")


def check_variance_bound(points: int = 50, repeats: int = 50, seed: int = 3) -> OracleResult:
    """Posterior variance after ``m`` repeats at ``x`` is at most ``noise / m``."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(points):
        cfg = _random_config(rng)
        x = rng.uniform(0, 5, 3)
        s = gpmod.empty_state(cfg)
        for m in range(1, repeats + 1):
            s = gpmod.gp_update(s, x, float(rng.normal()))
            _, var = gpmod.gp_predict(s, x)
            worst = max(worst, var - cfg.noise_variance / m)
    return OracleResult("repeated-observation variance", worst <= 0.0, max(worst, 0.0), 0.0,
                        f"{points} points x {repeats} repeats")


def _naive_closure(f, grid, initial_mask, radius_fn, t_min, t_max, eps):
    """Quadratic-time fixpoint on the grid, written independently of the fast version."""
    mask = initial_mask.copy()
    while True:
        new = mask.copy()
        for i in np.flatnonzero(mask):
            slack = min(f[i] - eps - t_min, t_max - eps - f[i])
            if slack < 0:
                continue
            r = radius_fn(slack)
            new |= np.abs(grid - grid[i]) <= r
        if np.array_equal(new, mask):
            return mask
        mask = new


def check_reachability(cases: int = 12, size: int = 600, seed: int = 4) -> OracleResult:
    rng = np.random.default_rng(seed)
    problem = ProblemSpec()
    mismatches = 0
    for c in range(cases):
        cls = LinearCFResponse if c % 2 == 0 else SaturatingResponse
        model = cls(problem, 0.0, cf=float(rng.uniform(15, 40)), icr=float(rng.uniform(8, 20)),
                    offset=float(rng.uniform(0, 25)))
        ctx = (float(rng.uniform(20, 80)), float(rng.uniform(100, 150)))
        cert = model.certificate
        grid = np.linspace(0, problem.max_dose, size)
        f = model.response(ctx, grid)
        eps = float(rng.uniform(0.0, problem.epsilon))
        inside = np.flatnonzero((f >= problem.t_min + eps) & (f <= problem.t_max - eps))
        start = grid[rng.choice(inside)] if inside.size else grid[rng.integers(size)]
        fast = reachability_closure(lambda d: model.response(ctx, d), [start], eps, cert,
                                    problem.t_min, problem.t_max, grid)
        init = np.isin(grid, [start])
        slow = _naive_closure(f, grid, init, lambda s: cert.metric.radius(s / cert.L),
                              problem.t_min, problem.t_max, eps)
        mismatches += int(np.sum(fast.mask != slow))
    return OracleResult("reachability closure", mismatches == 0, float(mismatches), 0.0,
                        f"{cases} environments on {size}-point grids")


def check_safe_path(cases: int = 200, seed: int = 5) -> OracleResult:
    """Margin along a segment of a monotone response is attained at an endpoint."""
    rng = np.random.default_rng(seed)
    problem = ProblemSpec()
    worst = 0.0
    for _ in range(cases):
        model = LinearCFResponse(problem, 0.0, cf=float(rng.uniform(15, 40)), icr=float(rng.uniform(8, 20)))
        ctx = (float(rng.uniform(20, 80)), float(rng.uniform(100, 150)))
        d1, d2 = np.sort(rng.uniform(0, problem.max_dose, 2))
        eps = float(rng.uniform(0, problem.epsilon))
        rep = safe_path(lambda d: model.response(ctx, d), d1, d2, problem.t_min, problem.t_max, eps)
        ends = model.response(ctx, np.array([d1, d2]))
        exact = min(float(np.min(problem.t_max - eps - ends)), float(np.min(ends - problem.t_min - eps)))
        worst = max(worst, abs(rep.margin - exact))
    tol = 1e-9
    return OracleResult("safe-path margin", worst <= tol, worst, tol, f"{cases} segments")


def check_metric_inverse(cases: int = 2000, seed: int = 6) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for fam in ("squared-exponential", "laplacian"):
        kern = KernelSpec(fam, (10.0, 10.0, float(rng.uniform(0.5, 5))), float(rng.uniform(0.5, 9)))
        metric = KernelDoseMetric(kern)
        r = rng.uniform(0, 3 * kern.dose_lengthscale, cases)
        q = metric.forward(r)
        ok = q < 0.999 * metric.supremum
        worst = max(worst, float(np.max(np.abs(metric.radius(q[ok]) - r[ok]) / kern.dose_lengthscale)))
        x = np.column_stack([np.zeros(cases), np.zeros(cases), np.zeros(cases)])
        xp = np.column_stack([np.zeros(cases), np.zeros(cases), r])
        direct = np.sqrt(np.maximum(2 * kern.variance - 2 * np.diag(kernel_matrix(kern, x[:50], xp[:50])), 0))
        worst = max(worst, float(np.max(np.abs(direct - q[:50]))))
    absm = AbsoluteDoseMetric(2.0)
    worst = max(worst, float(abs(absm.radius(absm.forward(1.7)) - 1.7)))
    tol = 1e-8
    return OracleResult("dose metric inverse", worst <= tol, worst, tol, "forward/inverse round trip")


def run_oracle_checks(seed: int = 0) -> OracleReport:
    """Run every oracle; desk-scale sizes keep the whole suite well under two minutes."""
    start = time.perf_counter()
    report = OracleReport()
    checks = (
        check_dense_inversion,
        check_information_gain,
        check_factor_drift,
        check_variance_bound,
        check_reachability,
        check_safe_path,
        check_metric_inverse,
    )
    for i, check in enumerate(checks):
        report.results.append(check(seed=seed + i))
    report.seconds = time.perf_counter() - start
    return report

