import math

import numpy as np
import pytest
from scipy import stats

from escada.bounds import BetaSchedule, BoundsTable, build_dose_grid, build_eval_grid, compute_bounds
from escada.config import resolve
from escada.environment import LinearCFResponse, MealEvent, ProblemSpec
from escada.errors import DegenerateSetError
from escada.gp import GPConfig, ProbeCache, empty_state, gp_update
from escada.kernels import AbsoluteDoseMetric, KernelDoseMetric, KernelSpec, LipschitzCertificate, points
from escada.policies import (
    POLICY_NAMES,
    REWARDS,
    escada_step,
    gp_ucb_select,
    make_agent,
    random_safe_select,
    taco_select,
    thompson_select,
)
from escada.runner import build_setup
from escada.safe_sets import SafeSet, expand_safe_set

T = 112.5


def _table(doses, mean, half_width, anchors=None):
    doses = np.asarray(doses, float)
    mean = np.asarray(mean, float)
    hw = np.broadcast_to(np.asarray(half_width, float), doses.shape)
    is_anchor = np.ones(doses.size, bool) if anchors is None else np.asarray(anchors, bool)
    idx = np.arange(doses.size)
    return BoundsTable((), doses, idx, is_anchor, mean, hw / 3, mean - hw, mean + hw, mean - hw, mean + hw, 3.0, 1)


def test_taco_exact_target():
    b = _table([1.0, 2.0, 3.0], [150.0, T, 80.0], 1.0)
    rec = taco_select(b, np.ones(3, bool), T)
    assert rec.dose == 2.0 and rec.branch == "target-feasible" and rec.candidates == 1
    assert "closest to the target" in rec.explain()


def test_taco_width_exploration_picks_widest():
    b = _table([1.0, 2.0, 3.0], [150.0, 150.0, 150.0], [0.25, 1.0, 0.5])
    rec = taco_select(b, np.ones(3, bool), T)
    assert rec.dose == 2.0 and rec.branch == "width-exploration"
    assert rec.score == pytest.approx(2.0)


def test_taco_ties_go_to_smaller_dose():
    b = _table([1.0, 2.0, 3.0], [T + 3, T - 3, T + 10], 5.0)
    assert taco_select(b, np.ones(3, bool), T).dose == 1.0
    w = _table([1.0, 2.0, 3.0], [150.0] * 3, [1.0, 1.0, 0.5])
    assert taco_select(w, np.ones(3, bool), T).dose == 1.0


def test_taco_respects_admissible_and_errors():
    b = _table([1.0, 2.0, 3.0], [T, T + 1, 150.0], 2.0)
    assert taco_select(b, np.array([False, True, True]), T).dose == 2.0
    with pytest.raises(DegenerateSetError):
        taco_select(b, np.zeros(3, bool), T)
    off_grid = _table([1.0, 2.0], [150.0, 150.0], 1.0, anchors=[False, False])
    with pytest.raises(DegenerateSetError):
        taco_select(off_grid, np.ones(2, bool), T)


def test_taco_cell_slack_widens_feasibility():
    b = _table([1.0, 2.0], [T + 3.0, 150.0], 2.0)
    assert taco_select(b, np.ones(2, bool), T).branch == "width-exploration"
    assert taco_select(b, np.ones(2, bool), T, cell_slack=1.5).dose == 1.0


def test_reward_transforms():
    assert REWARDS["r3"](T, T) == 0.0
    assert REWARDS["r1"](T + math.e - 1, T) == pytest.approx(-1.0, abs=1e-12)
    assert REWARDS["r2"](T, T) == 0.0
    assert REWARDS["r2"](T + 20.0, T) == pytest.approx(1.0 - math.e)
    for r in REWARDS.values():
        assert r(T + 5.0, T) < r(T + 1.0, T) <= r(T, T)


def _gp_world(noise=25.0):
    kern = KernelSpec("squared-exponential", (40.0, 60.0, 6.0), 400.0)
    cfg = GPConfig(kern, noise, T)
    cert = LipschitzCertificate(3.0, KernelDoseMetric(kern))
    g = build_eval_grid(build_dose_grid(cert.metric, cert.L, (50.0, 120.0), 15.0, 9.0), 2)
    return cfg, cert, g


def test_thompson_degenerate_posterior_is_argmin_of_mean():
    kern = KernelSpec("squared-exponential", (1.0, 1.0, 0.5), 1.0)
    cfg = GPConfig(kern, 1e-10, 0.0)
    g = build_eval_grid(build_dose_grid(AbsoluteDoseMetric(), 1.0, (0.0, 0.0), 3.0, 1.0), 1)
    s = empty_state(cfg)
    ys = 0.3 * g.doses - 0.4
    for d, y in zip(g.doses, ys):
        s = gp_update(s, [0.0, 0.0, d], y)
    for seed in range(5):
        rec = thompson_select(s, np.ones(len(g), bool), g, 0.0, seed)
        assert rec.index == int(np.argmin(np.abs(ys)))


def test_thompson_same_seed_same_dose():
    cfg, cert, g = _gp_world()
    s = gp_update(empty_state(cfg), [50.0, 120.0, 4.0], 130.0)
    adm = np.ones(len(g), bool)
    cache = ProbeCache(cfg, g.inputs())
    a = thompson_select(s, adm, g, T, 17, cache)
    b = thompson_select(s, adm, g, T, 17, cache)
    c = thompson_select(s, adm, g, T, 17)
    assert a.dose == b.dose == c.dose


def test_safe_thompson_stays_in_safe_set():
    problem = ProblemSpec()
    cfg, cert, g = _gp_world()
    rng = np.random.default_rng(0)
    s = empty_state(cfg)
    for d in (3.0, 3.5, 4.0):
        s = gp_update(s, [50.0, 120.0, d], 112.5 + 8 * (3.5 - d) + rng.normal(0, 5))
    safe = SafeSet.singleton((50.0, 120.0), float(g.doses[g.is_anchor][2]), 15.0)
    cache = ProbeCache(cfg, g.inputs())
    sched = BetaSchedule("fixed", 3.0)
    bounds = compute_bounds(s, sched, g, 4, cert, cache)
    safe = expand_safe_set(safe, bounds, cert, problem.t_min, problem.t_max)
    adm = safe.contains(g.doses)
    idx = np.flatnonzero(adm)
    sample_rng = np.random.default_rng(1)
    for _ in range(100_000 // 50):
        mean, cov = cache.covariance(s, idx)
        draws = mean + sample_rng.multivariate_normal(np.zeros(idx.size), cov, size=50, method="eigh")
        picks = idx[np.argmin(np.abs(draws - T), axis=1)]
        assert np.all(safe.contains(g.doses[picks]))
    for seed in range(200):
        assert thompson_select(s, adm, g, T, seed, cache).dose in safe


def test_sts_agent_containment_over_runs():
    cfg = resolve({"preset": "smoke", "environment": {"patients": 1}})
    model = LinearCFResponse(cfg.problem, 5.0, cf=25.0, icr=12.0, offset=10.0)
    events = [MealEvent(50.0, 125.0), MealEvent(30.0, 140.0)]
    setup = build_setup(cfg, model, events, safe=True)
    agent = make_agent("STS", setup, 3)
    rng = np.random.default_rng(2)
    for n in range(1, 301):
        ctx = n % 2
        rec = agent.recommend(ctx, n)
        assert rec.branch == "sampled"
        assert rec.dose in agent.safe_set(ctx)
        f = float(model.response(events[ctx].context, [rec.dose])[0])
        assert cfg.problem.t_min <= f <= cfg.problem.t_max
        agent.update(ctx, rec.dose, f + 5.0 * rng.standard_normal())


def test_escada_first_round_inside_first_expansion():
    problem = ProblemSpec()
    cfg, cert, g = _gp_world()
    d0 = float(g.doses[g.is_anchor][3])
    s0 = SafeSet.singleton((50.0, 120.0), d0, 15.0)
    rec, safe, bounds = escada_step(empty_state(cfg), BetaSchedule("fixed", 3.0), s0, g, problem, cert, 1)
    assert s0.issubset(safe)
    assert rec.dose in safe
    assert bounds.n == 1


def test_gp_ucb_picks_max_ucb():
    cfg, cert, g = _gp_world()
    rcfg = GPConfig(cfg.kernel, cfg.noise_variance, 0.0)
    s = empty_state(rcfg)
    for d, r in ((2.0, -40.0), (7.0, -2.0), (12.0, -60.0)):
        s = gp_update(s, [50.0, 120.0, d], r)
    rec = gp_ucb_select(s, np.ones(len(g), bool), g, BetaSchedule("fixed", 0.1), 4)
    assert rec.branch == "ucb-argmax"
    assert abs(rec.dose - 7.0) < 2.0
    cached = gp_ucb_select(s, np.ones(len(g), bool), g, BetaSchedule("fixed", 0.1), 4, ProbeCache(rcfg, g.inputs()))
    assert cached.dose == rec.dose


def test_random_safe_uniform():
    doses = np.linspace(0, 15, 31)
    safe = SafeSet((), ((2.0, 4.0), (10.0, 11.0)), 15.0)
    rng = np.random.default_rng(0)
    picks = np.array([random_safe_select(safe, doses, rng).dose for _ in range(10_000)])
    inside = doses[safe.contains(doses)]
    counts = np.array([(picks == d).sum() for d in inside])
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.001
    single = SafeSet.singleton((), 6.0, 15.0)
    assert random_safe_select(single, doses, 1).dose == 6.0


def test_make_agent_every_policy():
    cfg = resolve({"preset": "smoke"})
    model = LinearCFResponse(cfg.problem, 5.0, cf=25.0, icr=12.0)
    events = [MealEvent(50.0, 125.0)]
    for name in POLICY_NAMES:
        setup = build_setup(cfg, model, events, safe=name in ("ESCADA", "STS", "Random-Safe"))
        agent = make_agent(name, setup, 0)
        assert agent.name == name
        rec = agent.recommend(0, 1)
        assert 0.0 <= rec.dose <= 15.0
        rec.explain()
    with pytest.raises(ValueError):
        make_agent("nope", setup, 0)


def test_taco_agent_is_deterministic_for_fixed_history():
    cfg = resolve({"preset": "smoke"})
    model = LinearCFResponse(cfg.problem, 5.0, cf=25.0, icr=12.0)
    events = [MealEvent(50.0, 125.0)]
    outs = []
    for seed in (0, 99):
        agent = make_agent("TACO", build_setup(cfg, model, events, safe=False), seed)
        for n, (d, y) in enumerate(((3.0, 150.0), (6.0, 120.0), (8.0, 90.0)), start=1):
            agent.recommend(0, n)
            agent.update(0, d, y)
        outs.append([agent.recommend(0, 4).dose for _ in range(5)])
    assert len(set(outs[0] + outs[1])) == 1
    x = points((50.0, 120.0), [1.0])
    assert x.shape == (1, 3)
