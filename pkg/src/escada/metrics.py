"""Per-round records, run summaries and cross-seed aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

__all__ = [
    "RoundRecord",
    "RunSummary",
    "RECORD_COLUMNS",
    "AGGREGATE_COLUMNS",
    "cumulative_regret",
    "violation_frequencies",
    "summarize_run",
    "aggregate",
    "regret_curve",
    "write_records",
    "read_records",
    "write_aggregate",
]


@dataclass(frozen=True)
class RoundRecord:
    """One recommendation and its outcome. Violation flags use the true response."""

    run_id: str
    policy: str
    patient: int
    event: int
    round: int
    context_id: int
    cho: float
    fasting: float
    dose: float
    y: float
    f: float
    regret: float
    hypo: int
    hyper: int
    branch: str
    safe_measure: float
    info_gain: float
    sqrt_beta: float

    def __post_init__(self):
        if self.regret < 0:
            raise ValueError("regret must be nonnegative")
        if self.hypo and self.hyper:
            raise ValueError("hypo and hyper flags are exclusive")


RECORD_COLUMNS = tuple(f.name for f in fields(RoundRecord))
_INT_COLUMNS = {"patient", "event", "round", "context_id", "hypo", "hyper"}
_STR_COLUMNS = {"run_id", "policy", "branch"}


def make_record(run_id, policy, patient, event, n, ctx, context, dose, y, f, target, t_min, t_max,
                branch, safe_measure, info_gain, sqrt_beta) -> RoundRecord:
    return RoundRecord(
        run_id, policy, int(patient), int(event), int(n), int(ctx), float(context[0]), float(context[1]),
        float(dose), float(y), float(f), abs(float(f) - target), int(f < t_min), int(f > t_max),
        branch, float(safe_measure), float(info_gain), float(sqrt_beta),
    )


def cumulative_regret(records) -> np.ndarray:
    """Prefix sums of the instantaneous regret ``|f - T|``."""
    return np.cumsum([r.regret for r in records], dtype=float)


def violation_frequencies(records) -> tuple:
    """``(hypo rate, hyper rate)`` over the records; ``(0, 0)`` when empty."""
    records = list(records)
    if not records:
        return 0.0, 0.0
    n = len(records)
    return sum(r.hypo for r in records) / n, sum(r.hyper for r in records) / n


@dataclass
class RunSummary:
    run_id: str
    policy: str
    patient: int
    rounds: int
    regret: list = field(repr=False)  # cumulative trajectory
    hypo: float
    hyper: float
    mean_abs_error: float
    mean_y: float
    mean_f: float
    total_info_gain: float
    rounds_to_safe_optimal: float | None = None

    @property
    def cumulative(self) -> float:
        return self.regret[-1] if self.regret else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cumulative_regret"] = self.cumulative
        return out


def summarize_run(records, rounds_to_safe_optimal=None) -> RunSummary:
    records = list(records)
    if not records:
        raise ValueError("no records to summarize")
    traj = cumulative_regret(records)
    hypo, hyper = violation_frequencies(records)
    first = records[0]
    return RunSummary(
        run_id=first.run_id,
        policy=first.policy,
        patient=first.patient,
        rounds=len(records),
        regret=[float(v) for v in traj],
        hypo=hypo,
        hyper=hyper,
        mean_abs_error=float(traj[-1] / len(records)),
        mean_y=float(np.mean([r.y for r in records])),
        mean_f=float(np.mean([r.f for r in records])),
        total_info_gain=float(sum(r.info_gain for r in records)),
        rounds_to_safe_optimal=rounds_to_safe_optimal,
    )


AGGREGATE_METRICS = ("cumulative_regret", "mean_abs_error", "hypo", "hyper", "mean_y", "mean_f")
AGGREGATE_COLUMNS = ("policy", "runs") + tuple(
    f"{m}_{s}" for m in AGGREGATE_METRICS for s in ("mean", "sd")
)


def _mean_sd(values) -> tuple:
    v = np.asarray(values, dtype=float)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else float("nan")
    return float(np.mean(v)), sd


def aggregate(summaries) -> dict:
    """Sample mean and (n-1) standard deviation per metric, grouped by policy.

    A policy with a single run gets ``nan`` standard deviations.
    """
    summaries = list(summaries)
    if len(summaries) < 2:
        raise ValueError("aggregation needs at least two summaries")
    groups: dict = {}
    for s in summaries:
        groups.setdefault(s.policy, []).append(s)
    out = {}
    for policy in sorted(groups):
        group = groups[policy]
        row = {"policy": policy, "runs": len(group)}
        for m in AGGREGATE_METRICS:
            vals = [s.cumulative if m == "cumulative_regret" else getattr(s, m) for s in group]
            row[f"{m}_mean"], row[f"{m}_sd"] = _mean_sd(vals)
        out[policy] = row
    return out


def regret_curve(summaries, band: float = 0.25) -> dict:
    """Per-round mean cumulative regret with ``mean +- band * sd`` envelopes.

    All summaries must have the same number of rounds; a single run gets a
    zero-width band.
    """
    traj = np.array([s.regret for s in summaries], dtype=float)
    if traj.ndim != 2 or traj.shape[0] < 1:
        raise ValueError("need equal-length regret trajectories")
    mean = traj.mean(axis=0)
    sd = traj.std(axis=0, ddof=1) if traj.shape[0] > 1 else np.zeros_like(mean)
    return {"round": np.arange(1, traj.shape[1] + 1), "mean": mean, "lower": mean - band * sd,
            "upper": mean + band * sd}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_records(path, records, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([_fmt(getattr(r, c)) for c in RECORD_COLUMNS])


def read_records(path) -> list:
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        out = []
        for row in rows:
            kw = {}
            for c in RECORD_COLUMNS:
                v = row[c]
                kw[c] = v if c in _STR_COLUMNS else int(v) if c in _INT_COLUMNS else float(v)
            out.append(RoundRecord(**kw))
    return out


def write_aggregate(path, table: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for policy in sorted(table):
            writer.writerow([_fmt(table[policy][c]) for c in AGGREGATE_COLUMNS])


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dump_json(path, obj) -> None:
    """Deterministic JSON; non-finite floats become ``null``."""
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        v = float(o)
        return v if math.isfinite(v) else None
    raise TypeError(f"not JSON serializable: {type(o)}")
