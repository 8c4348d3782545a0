"""Experiment runner for the single- and multiple-meal-event protocols.

Randomness fans out from one root seed through keyed
:class:`numpy.random.SeedSequence` children. Observation noise is keyed by
(patient, meal event, visit) and never by policy, so every policy faces the
same noise draws and SME and MME runs share them too.
"""

from __future__ import annotations

import csv
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import build_dose_grid, build_eval_grid
from .config import ExperimentConfig
from .environment import MealEvent, ResponseModel, initial_safe_set, make_patients, sample_meal_events
from .gp import GPConfig
from .kernels import KernelSpec, LipschitzCertificate
from .metrics import (
    aggregate,
    dump_json,
    make_record,
    summarize_run,
    write_aggregate,
    write_records,
)
from .policies import Agent, RunSetup, make_agent

__all__ = [
    "keyed_seed",
    "ExperimentResult",
    "build_patients",
    "build_setup",
    "run_policy",
    "run_sme",
    "run_mme",
    "run_experiment",
    "write_outputs",
]

SAFE_POLICIES = {"ESCADA", "STS", "Random-Safe"}
NOTES = ("violation flags use the noiseless response; LBGI/HBGI are not computed; "
         "mean_y pools noisy observations and mean_f pools true responses")


def keyed_seed(root: int, *keys) -> np.random.SeedSequence:
    """Child seed sequence for a tuple of integer or string keys."""
    spawn = tuple(int(k) if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode()) for k in keys)
    return np.random.SeedSequence(int(root), spawn_key=spawn)


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class Patient:
    model: ResponseModel
    events: list


@dataclass
class RunTrace:
    """Per-run side outputs beyond the round records."""

    run_id: str
    coverage: bool | None = None  # confidence bounds contained the truth on every grid dose, every round
    safe_sets: list = field(default_factory=list)  # (round, context_id, lower, upper)
    rounds_to_safe_optimal: dict = field(default_factory=dict)  # context_id -> round index within context


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list = field(default_factory=list)
    summaries: list = field(default_factory=list)
    traces: list = field(default_factory=list)


def build_patients(config: ExperimentConfig, root: int) -> list:
    env = config["environment"]
    problem = config.problem
    family_kwargs = {}
    if env["family"] == "saturating":
        family_kwargs = {"floor": float(env["floor"]), "softness": float(env["softness"])}
    fixed = env["context"] if config["scenario"] == "fixed-context" else None
    models = make_patients(
        problem, env["family"], env["patients"], keyed_seed(root, "patients"), float(env["noise_sd"]),
        cf_range=tuple(env["cf_range"]), icr_range=tuple(env["icr_range"]),
        offset_range=tuple(env["offset_range"]), calc_mismatch=tuple(env["calc_mismatch"]),
        lipschitz_margin=float(env["lipschitz_margin"]), kernel=config.kernel,
        gp_anchors=int(env["gp_anchors"]), cache_dir=env["cache_dir"], fixed_context=fixed, **family_kwargs,
    )
    ev = config["events"]
    event_root = root if ev["seed"] is None else ev["seed"]
    out = []
    for m in models:
        if env["context"] is not None:
            events = [MealEvent(float(env["context"][0]), float(env["context"][1]))] * ev["count"]
        else:
            events = sample_meal_events(ev["count"], keyed_seed(event_root, "events", m.patient_id))
        out.append(Patient(m, events))
    return out


def certificate_for(config: ExperimentConfig, model: ResponseModel) -> LipschitzCertificate:
    cert = model.certificate
    override = config["environment"]["lipschitz_override"]
    return cert if override is None else LipschitzCertificate(float(override), cert.metric)


def build_setup(config: ExperimentConfig, model: ResponseModel, events: list, safe: bool) -> RunSetup:
    """Grids, certificates, GP configurations and initial safe sets for one run."""
    problem = config.problem
    cert = certificate_for(config, model)
    base = build_dose_grid(cert.metric, cert.L, (), problem.max_dose, float(config["grid"]["lam"]))
    base_eval = build_eval_grid(base, int(config["grid"]["resolution"]))
    contexts, grids, initial = [], [], []
    env = config["environment"]
    for ev in events:
        ctx = ev.context
        g = dataclasses.replace(base, context=ctx)
        contexts.append(ctx)
        grids.append(dataclasses.replace(base_eval, grid=g))
        if safe:
            initial.append(initial_safe_set(model, ev, env["initial_safe_set"], g, env["fixed_dose"]))
    gp_config = GPConfig(config.kernel, config.noise_variance, config.prior_mean)
    rewards = {}
    for name, r in config["rewards"].items():
        k = config.kernel
        var = k.variance if r.get("variance") is None else float(r["variance"])
        nv = gp_config.noise_variance if r.get("noise_variance") is None else float(r["noise_variance"])
        rewards[name] = GPConfig(KernelSpec(k.family, k.lengthscales, var), nv, float(r.get("prior_mean") or 0.0))
    calculators = [(model.tuned_calculator, model.untuned_calculator)] * len(events)
    return RunSetup(problem, gp_config, config.schedule(cert.L), cert, contexts, grids,
                    initial if safe else None, calculators, rewards)


def run_policy(
    agent: Agent,
    model: ResponseModel,
    event_ids: list,
    visits: list,
    root: int,
    run_id: str,
    audit: bool = False,
    track_optimum: bool = False,
):
    """Drive one agent through ``visits`` (a list of ``(context_id, visit_index)``).

    Returns ``(records, trace)``.
    """
    setup = agent.setup
    problem = setup.problem
    trace = RunTrace(run_id, coverage=True if audit else None)
    records = []
    truth_cache: dict = {}
    optimum: dict = {}
    for n, (ctx, k) in enumerate(visits, start=1):
        context = setup.contexts[ctx]
        rec = agent.recommend(ctx, n)
        dose = float(np.clip(rec.dose, 0.0, problem.max_dose))
        f = float(model.response(context, np.array([dose]))[0])
        noise = keyed_seed(root, "noise", model.patient_id, event_ids[ctx], k)
        y = f if model.noise_sd == 0 else f + model.noise_sd * float(np.random.default_rng(noise).standard_normal())

        bounds = agent.last_bounds
        sqrt_beta = float("nan")
        if bounds is not None and bounds.n == n:
            sqrt_beta = bounds.sqrt_beta
            if audit:
                if ctx not in truth_cache:
                    truth_cache[ctx] = model.response(context, bounds.doses)
                slack = bounds.sqrt_beta * bounds.sd + 1e-9 * max(1.0, abs(problem.target))
                if np.any(np.abs(truth_cache[ctx] - bounds.mean) > slack):
                    trace.coverage = False
        elif "sqrt_beta" in rec.diagnostics:
            sqrt_beta = rec.diagnostics["sqrt_beta"]

        gain = agent.update(ctx, dose, y)
        safe = agent.safe_set(ctx)
        measure = safe.measure if safe is not None else float("nan")
        if safe is not None:
            for a, b in safe.intervals:
                trace.safe_sets.append((n, ctx, a, b))
            if track_optimum and ctx not in trace.rounds_to_safe_optimal:
                if ctx not in optimum:
                    optimum[ctx] = model.optimal_dose(context)
                if safe.contains(optimum[ctx]):
                    trace.rounds_to_safe_optimal[ctx] = k + 1
        records.append(make_record(
            run_id, agent.name, model.patient_id, event_ids[ctx], n, ctx, context, dose, y, f,
            problem.target, problem.t_min, problem.t_max, rec.branch, measure, gain, sqrt_beta,
        ))
    return records, trace


def _agent(config, name, setup, root, *keys) -> Agent:
    return make_agent(name, setup, _seed_int(keyed_seed(root, "policy", name, *keys)))


def run_sme(config: ExperimentConfig, root: int | None = None, patients: list | None = None) -> ExperimentResult:
    """Fresh GP per (patient, meal event, policy); ``per_event`` rounds on the fixed context."""
    root = config.seeds[0] if root is None else root
    patients = build_patients(config, root) if patients is None else patients
    result = ExperimentResult(config)
    per_event = config["events"]["per_event"]
    audit = bool(config["audit_coverage"])
    for p in patients:
        pid = p.model.patient_id
        for e, ev in enumerate(p.events):
            for name in config["policies"]:
                safe = name in SAFE_POLICIES
                setup = build_setup(config, p.model, [ev], safe)
                agent = _agent(config, name, setup, root, pid, e)
                run_id = f"s{root}/p{pid}/e{e}/{name}"
                visits = [(0, k) for k in range(per_event)]
                recs, trace = run_policy(agent, p.model, [e], visits, root, run_id, audit, track_optimum=safe)
                _collect(result, recs, trace, trace.rounds_to_safe_optimal.get(0) if safe else None)
    return result


def run_mme(config: ExperimentConfig, root: int | None = None, patients: list | None = None) -> ExperimentResult:
    """One GP per (patient, policy) shared across meal events visited round-robin."""
    root = config.seeds[0] if root is None else root
    patients = build_patients(config, root) if patients is None else patients
    result = ExperimentResult(config)
    per_event = config["events"]["per_event"]
    audit = bool(config["audit_coverage"])
    for p in patients:
        pid = p.model.patient_id
        ids = list(range(len(p.events)))
        visits = [(c, k) for k in range(per_event) for c in ids]
        for name in config["policies"]:
            safe = name in SAFE_POLICIES
            setup = build_setup(config, p.model, p.events, safe)
            agent = _agent(config, name, setup, root, pid, "mme")
            run_id = f"s{root}/p{pid}/mme/{name}"
            recs, trace = run_policy(agent, p.model, ids, visits, root, run_id, audit, track_optimum=safe)
            _collect(result, recs, trace, None)
    return result


def _collect(result: ExperimentResult, records, trace, rounds_to_opt) -> None:
    result.records.extend(records)
    result.traces.append(trace)
    result.summaries.append(summarize_run(records, rounds_to_opt))


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult(config)
    run = run_mme if config["scenario"] == "mme" else run_sme
    for root in config.seeds:
        r = run(config, root)
        out.records.extend(r.records)
        out.summaries.extend(r.summaries)
        out.traces.extend(r.traces)
    return out


def write_outputs(result: ExperimentResult, outdir=None) -> Path:
    """Write ``records.csv``, ``summary.json``, ``aggregate.csv`` and ``safe_sets.csv``."""
    from . import __version__

    outdir = Path(outdir if outdir is not None else result.config["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    write_records(outdir / "records.csv", result.records)
    table = aggregate(result.summaries) if len(result.summaries) >= 2 else {}
    write_aggregate(outdir / "aggregate.csv", table)
    traces = {t.run_id: t for t in result.traces}
    runs = []
    for s in result.summaries:
        d = s.to_dict()
        t = traces.get(s.run_id)
        d["coverage"] = None if t is None else t.coverage
        runs.append(d)
    dump_json(outdir / "summary.json", {
        "version": __version__,
        "config": result.config.to_dict(),
        "notes": NOTES,
        "aggregate": table,
        "runs": runs,
    })
    with open(outdir / "safe_sets.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "round", "context_id", "lower", "upper"])
        for t in result.traces:
            for n, ctx, a, b in t.safe_sets:
                w.writerow([t.run_id, n, ctx, repr(float(a)), repr(float(b))])
    return outdir


def summaries_by_policy(summaries) -> dict:
    out: dict = {}
    for s in summaries:
        out.setdefault(s.policy, []).append(s)
    return out

