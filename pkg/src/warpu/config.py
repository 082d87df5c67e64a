"""Experiment configuration: one JSON document, strictly validated.

Unknown keys are rejected and every violated field is reported at once so
a bad config never needs more than one round trip to fix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError

_BUDGET_MODES = ("evaluation-matched", "iteration-matched")
_ESTIMATOR_NAMES = ("bs", "wb", "swb")
_COMMON_OPTIONAL = {"name", "seed", "seeds", "replicates", "out", "threads", "figures"}

# kind -> (required keys, kind-specific optional keys)
_SCHEMAS = {
    "recovery": (
        {"target", "n1", "n2"},
        {"estimators", "k_fit", "fit_samples", "budget_mode"},
    ),
    "estimator-comparison": (
        {"target", "budgets", "budget_mode"},
        {"estimators", "k_fit", "fit_samples", "fit_seed"},
    ),
    "sampler-stages": (
        {"target", "T", "M", "K", "sigma", "initial"},
        {"refit_policy", "marginal", "truth_samples", "annealing"},
    ),
    "mode-escape": (
        {"target", "T", "sigma", "pt_levels", "n_runs"},
        {"discard", "pt_sigma", "mixture_means"},
    ),
    "coupling": (
        {"target", "sigma", "l", "m", "initial"},
        {"schemes", "couplings", "rb_levels", "h", "max_steps", "k_fit",
         "fit_samples", "record_l2"},
    ),
    "variance-law": (
        {"target", "n1", "n2"},
        set(),
    ),
    "sample": (
        {"target", "sampler", "T"},
        {"sigma", "mixture", "theta0", "K", "M", "initial", "pt_levels",
         "refit_policy", "annealing"},
    ),
    "diag": (
        {"target", "n1", "n2"},
        {"mixture", "k_fit", "fit_samples"},
    ),
    "estimate": (
        {"target", "n1", "n2"},
        {"mixture", "k_fit", "fit_samples"},
    ),
}


@dataclass
class ExperimentConfig:
    kind: str
    payload: dict
    name: str = ""
    seed: int = 0
    replicates: int = 1
    seeds: list = field(default_factory=list)
    out: str = "."
    threads: int = 1
    figures: bool = True

    def __getitem__(self, key):
        return self.payload[key]

    def get(self, key, default=None):
        return self.payload.get(key, default)

    def replicate_seeds(self):
        if self.seeds:
            return list(self.seeds)
        return [self.seed ^ i for i in range(self.replicates)]


def _check_positive_int(errors, payload, key):
    if key in payload:
        v = payload[key]
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            errors.append(f"{key}: must be a positive integer, got {v!r}")


def _check_positive_number(errors, payload, key):
    if key in payload:
        v = payload[key]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
            errors.append(f"{key}: must be a positive number, got {v!r}")


def validate_config(payload) -> ExperimentConfig:
    """Validate a config mapping; raises ConfigError listing every problem."""
    if isinstance(payload, str):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(payload, dict):
        raise ConfigError(["config must be a JSON object"])

    errors = []
    kind = payload.get("kind")
    if kind not in _SCHEMAS:
        raise ConfigError(
            [f"kind: must be one of {sorted(_SCHEMAS)}, got {kind!r}"]
        )
    required, optional = _SCHEMAS[kind]
    allowed = {"kind"} | required | optional | _COMMON_OPTIONAL

    for key in sorted(set(payload) - allowed):
        errors.append(f"{key}: unknown key for kind {kind!r}")
    for key in sorted(required - set(payload)):
        errors.append(f"{key}: required for kind {kind!r}")

    for key in ("n1", "n2", "T", "K", "pt_levels", "n_runs", "l", "m",
                "replicates", "threads", "k_fit", "fit_samples", "max_steps"):
        _check_positive_int(errors, payload, key)
    for key in ("M", "discard"):  # zero is meaningful for these
        if key in payload:
            v = payload[key]
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                errors.append(f"{key}: must be a nonnegative integer, got {v!r}")
    for key in ("sigma", "pt_sigma"):
        _check_positive_number(errors, payload, key)

    if "target" in payload and not isinstance(payload["target"], (dict, str)):
        errors.append("target: must be a name or an object with a name")
    if "budget_mode" in payload and payload["budget_mode"] not in _BUDGET_MODES:
        errors.append(f"budget_mode: must be one of {_BUDGET_MODES}")
    if kind == "estimator-comparison" and "budget_mode" not in payload:
        pass  # already reported as missing-required
    if "budgets" in payload:
        b = payload["budgets"]
        if (not isinstance(b, list) or not b
                or any(not isinstance(v, int) or v <= 0 for v in b)
                or sorted(b) != b):
            errors.append("budgets: must be an increasing list of positive integers")
    if "estimators" in payload:
        est = payload["estimators"]
        if (not isinstance(est, list)
                or any(e not in _ESTIMATOR_NAMES for e in est) or not est):
            errors.append(f"estimators: must be a nonempty subset of {_ESTIMATOR_NAMES}")
    if "seeds" in payload:
        seeds = payload["seeds"]
        if (not isinstance(seeds, list)
                or any(not isinstance(s, int) or s < 0 for s in seeds)):
            errors.append("seeds: must be a list of nonnegative integers")
        elif len(set(seeds)) != len(seeds):
            errors.append("seeds: entries must be distinct")
        elif "replicates" in payload and len(seeds) != payload["replicates"]:
            errors.append("seeds: length must match replicates")
    if "seed" in payload:
        s = payload["seed"]
        if not isinstance(s, int) or isinstance(s, bool) or s < 0:
            errors.append(f"seed: must be a nonnegative integer, got {s!r}")
    if "l" in payload and "m" in payload:
        l_val, m_val = payload["l"], payload["m"]
        if isinstance(l_val, int) and isinstance(m_val, int) and l_val > m_val:
            errors.append("l: must not exceed m")
    if "rb_levels" in payload:
        lv = payload["rb_levels"]
        if not isinstance(lv, list) or any(x not in ("L0", "L1", "L2") for x in lv):
            errors.append("rb_levels: must be a list drawn from L0, L1, L2")
    if "schemes" in payload:
        sc = payload["schemes"]
        if not isinstance(sc, list) or any(x not in ("separate", "combined") for x in sc):
            errors.append("schemes: must be a list drawn from separate, combined")
    if "couplings" in payload:
        cp = payload["couplings"]
        if not isinstance(cp, list) or any(x not in ("maximal", "reflection") for x in cp):
            errors.append("couplings: must be a list drawn from maximal, reflection")

    if errors:
        raise ConfigError(errors)

    return ExperimentConfig(
        kind=kind,
        payload=payload,
        name=payload.get("name", kind),
        seed=payload.get("seed", 0),
        replicates=payload.get("replicates", 1),
        seeds=payload.get("seeds", []),
        out=payload.get("out", "."),
        threads=payload.get("threads", 1),
        figures=payload.get("figures", True),
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return validate_config(fh.read())
