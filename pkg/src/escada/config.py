"""Experiment configuration: YAML files merged over defaults, validated up front.

Every key must appear in :data:`DEFAULTS`; unknown keys are errors. All
problems found are reported together before any run starts.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from pathlib import Path

import yaml

from .bounds import BetaSchedule
from .environment import ProblemSpec
from .errors import ConfigError
from .kernels import FAMILIES, KernelSpec
from .policies import POLICY_NAMES

__all__ = ["DEFAULTS", "PRESETS", "ExperimentConfig", "load_config", "resolve", "set_dotted"]

DEFAULTS: dict = {
    "name": "experiment",
    "preset": None,
    "seed": 0,
    "seeds": None,  # list of root seeds; overrides ``seed``
    "scenario": "sme",  # sme | mme | fixed-context
    "policies": ["ESCADA", "TACO", "STS", "TS", "GP-UCB-3", "Calc"],
    "output_dir": "results",
    "problem": {
        "max_dose": 15.0,
        "ceiling": 600.0,
        "target": 112.5,
        "t_min": 70.0,
        "t_max": 180.0,
        "alpha": 20.0,
        "epsilon": 10.0,
    },
    "environment": {
        "family": "linear-CF",  # linear-CF | saturating | gp-sampled
        "patients": 3,
        "noise_sd": 5.0,
        "cf_range": [15.0, 40.0],
        "icr_range": [8.0, 20.0],
        "offset_range": [0.0, 25.0],
        "calc_mismatch": [0.7, 1.4],
        "lipschitz_margin": 1.5,
        "lipschitz_override": None,
        "floor": 40.0,
        "softness": 10.0,
        "gp_anchors": 40,
        "cache_dir": None,
        "initial_safe_set": "tuned-calculator",  # calculator | tuned-calculator | oracle | fixed
        "fixed_dose": None,
        "context": None,  # [cho, fasting] for fixed-context runs
    },
    "kernel": {
        "family": "squared-exponential",
        "lengthscales": [40.0, 60.0, 6.0],
        "variance": 22500.0,
    },
    "gp": {
        "noise_variance": None,  # defaults to noise_sd ** 2
        "prior_mean": None,  # defaults to the target
    },
    "beta": {
        "mode": "fixed",
        "sqrt_beta": 3.0,
        "delta": 0.05,
        "inflation": 2.0,
    },
    "grid": {
        "lam": 9.0,
        "resolution": 2,
        "allow_coarse": False,
    },
    "events": {
        "count": 30,
        "per_event": 15,
        "seed": None,  # defaults to the root seed
    },
    "rewards": {
        "r1": {"variance": 4.0, "noise_variance": 0.05, "prior_mean": 0.0},
        "r2": {"variance": 1.0e4, "noise_variance": 1.0, "prior_mean": 0.0},
        "r3": {"variance": None, "noise_variance": None, "prior_mean": 0.0},  # None: same as the response GP
    },
    "audit_coverage": False,
    "sweep": None,  # {dotted.key: [values, ...]}
}

PRESETS: dict = {
    "tuned": {"environment": {"initial_safe_set": "tuned-calculator"}},
    "untuned": {"environment": {"initial_safe_set": "calculator"}},
    "unsafe-init": {
        "environment": {"initial_safe_set": "calculator", "calc_mismatch": [0.5, 1.8]},
        "policies": ["ESCADA", "TACO", "STS", "TS"],
    },
    "smoke": {
        "environment": {"patients": 1},
        "events": {"count": 2, "per_event": 5},
        "policies": ["ESCADA", "TACO"],
    },
}

SCENARIOS = ("sme", "mme", "fixed-context")
INIT_MODES = ("calculator", "tuned-calculator", "oracle", "fixed")
ENV_FAMILIES = ("linear-CF", "saturating", "gp-sampled")


def _merge(base: dict, override: dict, path: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            problems.append(f"unknown key '{where}'")
            continue
        if isinstance(base[key], dict) and key != "sweep":
            if not isinstance(value, dict):
                problems.append(f"'{where}' must be a mapping")
                continue
            out[key] = _merge(base[key], value, where + ".", problems)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def _num(data, path, problems, positive=False, nonneg=False):
    v = data
    for k in path.split("."):
        v = v[k]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        problems.append(f"'{path}' must be a number")
        return None
    if positive and not v > 0:
        problems.append(f"'{path}' must be positive")
    if nonneg and v < 0:
        problems.append(f"'{path}' must be nonnegative")
    return v


def _range(data, path, problems):
    v = data
    for k in path.split("."):
        v = v[k]
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v)
            and v[0] <= v[1]):
        problems.append(f"'{path}' must be a [low, high] pair with low <= high")


def _validate(c: dict, problems: list) -> None:
    if c["scenario"] not in SCENARIOS:
        problems.append(f"'scenario' must be one of {SCENARIOS}")
    pols = c["policies"]
    if not isinstance(pols, list) or not pols:
        problems.append("'policies' must be a nonempty list")
    else:
        for p in pols:
            if p not in POLICY_NAMES:
                problems.append(f"unknown policy '{p}'; expected one of {POLICY_NAMES}")
    seeds = c["seeds"]
    if seeds is not None and (not isinstance(seeds, list) or not seeds
                              or not all(isinstance(s, int) and s >= 0 for s in seeds)):
        problems.append("'seeds' must be a nonempty list of nonnegative integers")
    if not isinstance(c["seed"], int) or c["seed"] < 0:
        problems.append("'seed' must be a nonnegative integer")

    for k in DEFAULTS["problem"]:
        _num(c, f"problem.{k}", problems)
    if not any("problem." in p for p in problems):
        try:
            ProblemSpec(**c["problem"])
        except ValueError as exc:
            problems.append(f"problem: {exc}")

    env = c["environment"]
    if env["family"] not in ENV_FAMILIES:
        problems.append(f"'environment.family' must be one of {ENV_FAMILIES}")
    if not isinstance(env["patients"], int) or env["patients"] < 1:
        problems.append("'environment.patients' must be a positive integer")
    _num(c, "environment.noise_sd", problems, nonneg=True)
    for k in ("cf_range", "icr_range", "offset_range", "calc_mismatch"):
        _range(c, f"environment.{k}", problems)
    _num(c, "environment.lipschitz_margin", problems, positive=True)
    if env["lipschitz_override"] is not None:
        _num(c, "environment.lipschitz_override", problems, positive=True)
    if env["initial_safe_set"] not in INIT_MODES:
        problems.append(f"'environment.initial_safe_set' must be one of {INIT_MODES}")
    if env["initial_safe_set"] == "fixed" and env["fixed_dose"] is None:
        problems.append("'environment.fixed_dose' is required when initial_safe_set is 'fixed'")
    ctx = env["context"]
    if ctx is not None and not (isinstance(ctx, list) and len(ctx) == 2):
        problems.append("'environment.context' must be [cho, fasting]")

    k = c["kernel"]
    if k["family"] not in FAMILIES:
        problems.append(f"'kernel.family' must be one of {FAMILIES}")
    ls = k["lengthscales"]
    if not (isinstance(ls, list) and len(ls) == 3 and all(isinstance(v, (int, float)) and v > 0 for v in ls)):
        problems.append("'kernel.lengthscales' must list three positive numbers (cho, fasting, dose)")
    _num(c, "kernel.variance", problems, positive=True)

    if c["gp"]["noise_variance"] is not None:
        _num(c, "gp.noise_variance", problems, positive=True)
    elif isinstance(env["noise_sd"], (int, float)) and not env["noise_sd"] > 0:
        problems.append("'gp.noise_variance' must be set when environment.noise_sd is 0")
    if c["gp"]["prior_mean"] is not None:
        _num(c, "gp.prior_mean", problems)

    b = c["beta"]
    if b["mode"] not in ("fixed", "theoretical"):
        problems.append("'beta.mode' must be 'fixed' or 'theoretical'")
    _num(c, "beta.sqrt_beta", problems, positive=True)
    d = _num(c, "beta.delta", problems)
    if d is not None and not 0 < d < 1:
        problems.append("'beta.delta' must lie in (0, 1)")
    _num(c, "beta.inflation", problems, nonneg=True)

    lam = _num(c, "grid.lam", problems, positive=True)
    res = c["grid"]["resolution"]
    if not isinstance(res, int) or res < 1:
        problems.append("'grid.resolution' must be a positive integer")
    eps = c["problem"]["epsilon"]
    if lam is not None and isinstance(eps, (int, float)) and not lam < eps:
        if c["grid"]["allow_coarse"]:
            warnings.warn(f"grid.lam={lam} is not below epsilon={eps}", stacklevel=3)
        else:
            problems.append(f"'grid.lam' ({lam}) must be below problem.epsilon ({eps}); "
                            "set grid.allow_coarse to override")

    ev = c["events"]
    if not isinstance(ev["count"], int) or ev["count"] < 1:
        problems.append("'events.count' must be a positive integer")
    elif c["scenario"] == "mme" and ev["count"] < 2:
        problems.append("the mme scenario needs at least two meal events")
    if not isinstance(ev["per_event"], int) or ev["per_event"] < 1:
        problems.append("'events.per_event' must be a positive integer")

    for name, r in c["rewards"].items():
        if not isinstance(r, dict) or set(r) - {"variance", "noise_variance", "prior_mean"}:
            problems.append(f"'rewards.{name}' accepts only variance, noise_variance, prior_mean")

    sweep = c["sweep"]
    if sweep is not None:
        if not isinstance(sweep, dict) or not all(isinstance(v, list) and v for v in sweep.values()):
            problems.append("'sweep' must map dotted keys to nonempty value lists")


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated configuration."""

    data: dict
    raw: dict = None  # user-supplied mapping before defaults and presets

    def __getitem__(self, key):
        return self.data[key]

    @property
    def problem(self) -> ProblemSpec:
        return ProblemSpec(**self.data["problem"])

    @property
    def kernel(self) -> KernelSpec:
        k = self.data["kernel"]
        return KernelSpec(k["family"], tuple(float(v) for v in k["lengthscales"]), float(k["variance"]))

    @property
    def noise_variance(self) -> float:
        nv = self.data["gp"]["noise_variance"]
        return float(nv) if nv is not None else float(self.data["environment"]["noise_sd"]) ** 2

    @property
    def prior_mean(self) -> float:
        pm = self.data["gp"]["prior_mean"]
        return float(pm) if pm is not None else float(self.data["problem"]["target"])

    def schedule(self, L: float) -> BetaSchedule:
        b = self.data["beta"]
        return BetaSchedule(b["mode"], float(b["sqrt_beta"]), float(b["delta"]), float(L), float(b["inflation"]))

    @property
    def seeds(self) -> list:
        return list(self.data["seeds"]) if self.data["seeds"] is not None else [self.data["seed"]]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Re-resolve with dotted-key overrides applied to the user mapping."""
        raw = copy.deepcopy(self.raw if self.raw is not None else self.data)
        for key, value in overrides.items():
            set_dotted(raw, key, value)
        return resolve(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def resolve(raw: dict | None = None) -> ExperimentConfig:
    """Merge ``raw`` over the defaults (and its preset) and validate."""
    raw = {} if raw is None else raw
    problems: list = []
    if not isinstance(raw, dict):
        raise ConfigError(["configuration must be a mapping"])
    base = DEFAULTS
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            problems.append(f"unknown preset '{preset}'; expected one of {sorted(PRESETS)}")
        else:
            base = _merge(DEFAULTS, PRESETS[preset], "", problems)
    data = _merge(base, raw, "", problems)
    try:
        _validate(data, problems)
    except (TypeError, KeyError, AttributeError) as exc:
        problems.append(f"malformed configuration: {exc}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(data, copy.deepcopy(raw))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    return resolve(raw)
