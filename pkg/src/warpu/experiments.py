"""Experiment pipelines: replicated runs, delimited output, figures.

Every pipeline is a pure function of (config, seeds): replicate streams
are derived as seed XOR replicate index, rows are written in replicate
order, and numeric columns carry full round-trip precision, so re-running
a config yields byte-identical results.csv and summary.csv.  Wall-clock
timings are inherently non-reproducible and therefore live in a separate
timings.csv.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ExperimentConfig, validate_config
from .coupling import run_coupled_warpu
from .errors import ConfigError
from .estimators import (
    classical_bridge,
    stochastic_warpu_bridge,
    warpu_bridge_estimate,
    asymptotic_variance_diagnostics,
)
from .fit import em_fit
from .metrics import mode_occupancy, rmse, rmse_se, wasserstein_1d
from .rngs import derive_rng
from .samplers import (
    run_adaptive_warpu,
    run_basic_warpu,
    run_parallel_tempering,
    mixture_proposal_mh,
    variance_augmented_warp,
    ScaleMixtureAux,
)
from .targets import make_target
from .density import GaussianMixture

H_FUNCTIONS = {
    "sum": lambda th: float(np.sum(th)),
    "sumsq": lambda th: float(np.sum(np.asarray(th) ** 2)),
}


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _resolve_mixture(cfg, bench, seed):
    """Mixture driving the transport: the target's own matched mixture by
    default, or an EM fit to fresh i.i.d. draws when k_fit is given."""
    k_fit = cfg.get("k_fit")
    if k_fit is None:
        if bench.matched_mixture is None:
            raise ConfigError(
                ["k_fit: required because this target has no matched mixture"]
            )
        return bench.matched_mixture
    n_fit = cfg.get("fit_samples", 10_000)
    if bench.sampler is None:
        raise ConfigError(["target: no exact sampler available to fit against"])
    draws = bench.sampler(derive_rng(seed, 900_000), n_fit)
    return em_fit(draws, k_fit, seed=seed ^ 0xF17)


# -- replicate workers (top level so process pools can pickle them) ------------


def _recovery_replicate(payload, seed, rep):
    cfg = ExperimentConfig("recovery", payload)
    bench = make_target(payload["target"])
    mix = _resolve_mixture(cfg, bench, payload.get("seed", 0))
    rng = derive_rng(seed)
    n1, n2 = payload["n1"], payload["n2"]
    pi_draws = bench.sampler(rng, n1)
    rows = []
    for est in payload.get("estimators", ["bs", "wb", "swb"]):
        before = bench.target.eval_count
        if est == "bs":
            res = classical_bridge(bench.target, mix, pi_draws, mix.sample(rng, n2))
        elif est == "wb":
            res = warpu_bridge_estimate(
                bench.target, mix, pi_draws,
                rng.standard_normal((n2, bench.dim)), rng=rng,
            )
        else:
            res = stochastic_warpu_bridge(
                bench.target, mix, pi_draws,
                n2_per_component=max(1, n2 // mix.n_components), rng=rng,
            )
        rows.append((rep, seed, est, res.c_hat, res.lambda_hat,
                     res.iterations, bench.target.eval_count - before))
    return rows


_BUDGET_HEADER = ("replicate", "seed", "budget", "estimator", "c_hat",
                  "lambda_hat", "target_evals")


def _allocate_budget(mode, budget, estimator, k):
    """Sample-size allocation; under evaluation matching the budget counts
    target evaluations (n1+n2 classical, K(n1+n2) transport, n1+K*n2c
    stratified), under iteration matching it counts draws per side."""
    if mode == "evaluation-matched":
        if estimator == "bs":
            return budget // 2, budget // 2
        if estimator == "wb":
            m = max(budget // (2 * k), 2)
            return m, m
        n2c = max(budget // (2 * k), 2)
        return budget - k * n2c, n2c
    if estimator == "swb":
        return budget, max(1, budget // k)
    return budget, budget


def _comparison_replicate(payload, seed, rep):
    cfg = ExperimentConfig("estimator-comparison", payload)
    bench = make_target(payload["target"])
    mix = _resolve_mixture(cfg, bench, payload.get("fit_seed", payload.get("seed", 0)))
    rng = derive_rng(seed)
    k = mix.n_components
    rows = []
    for budget in payload["budgets"]:
        for est in payload.get("estimators", ["bs", "wb", "swb"]):
            n1, n2 = _allocate_budget(payload["budget_mode"], budget, est, k)
            pi_draws = bench.sampler(rng, n1)
            before = bench.target.eval_count
            if est == "bs":
                res = classical_bridge(bench.target, mix, pi_draws, mix.sample(rng, n2))
            elif est == "wb":
                res = warpu_bridge_estimate(
                    bench.target, mix, pi_draws,
                    rng.standard_normal((n2, bench.dim)), rng=rng,
                )
            else:
                res = stochastic_warpu_bridge(
                    bench.target, mix, pi_draws, n2_per_component=n2, rng=rng,
                )
            rows.append((rep, seed, budget, est, res.c_hat, res.lambda_hat,
                         bench.target.eval_count - before))
    return rows


def _stages_replicate(payload, seed, rep):
    bench = make_target(payload["target"])
    result = run_adaptive_warpu(
        bench.target,
        n_per_stage=payload["T"], n_stages=payload["M"], k=payload["K"],
        seed=seed, initial=payload["initial"], sigma=payload["sigma"],
        refit_policy=payload.get("refit_policy", "all"),
        annealing=payload.get("annealing"),
    )
    marginal = payload.get("marginal", 0)
    truth = bench.sampler(derive_rng(payload.get("seed", 0), 777),
                          payload.get("truth_samples", 100_000))[:, marginal]
    rows = []
    for s in range(payload["M"] + 1):
        w = wasserstein_1d(result.stage_samples(s)[:, marginal], truth)
        rows.append((rep, seed, s, w))
    return rows


def _mode_escape_run(payload, seed, rep):
    bench = make_target(payload["target"])
    discard = payload.get("discard", 1000)
    t_keep = payload["T"]
    centers = bench.mode_centers
    # unit-scale equal-weight mixture on the known centers
    k = centers.shape[0]
    mix = GaussianMixture(
        np.full(k, 1.0 / k), centers,
        np.array([np.eye(bench.dim)] * k),
    )
    rng = derive_rng(seed)
    theta0 = rng.standard_normal(bench.dim)
    trace = run_basic_warpu(
        bench.target, mix, n_steps=discard + t_keep,
        sigma=payload["sigma"], theta0=theta0, seed=seed ^ (1 << 33),
    )
    occ_w = mode_occupancy(trace.samples[discard:], centers)
    pt = run_parallel_tempering(
        bench.target, n_levels=payload["pt_levels"],
        n_steps=discard + t_keep, sigma=payload.get("pt_sigma", payload["sigma"]),
        theta0=theta0, seed=seed ^ (1 << 34),
    )
    occ_pt = mode_occupancy(pt.cold_trace.samples[discard:], centers)
    rows = []
    for method, occ in (("warpu", occ_w), ("pt", occ_pt)):
        rows.append((rep, seed, method) + tuple(float(o) for o in occ))
    return rows


def _coupling_replicate(payload, seed, rep):
    cfg = ExperimentConfig("coupling", payload)
    bench = make_target(payload["target"])
    mix = _resolve_mixture(cfg, bench, payload.get("seed", 0))
    levels = payload.get("rb_levels", ["L0", "L1"])
    offsets = {("separate", "maximal"): 0, ("separate", "reflection"): 1 << 35,
               ("combined", "maximal"): 1 << 36, ("combined", "reflection"): 3 << 35}
    rows = []
    for scheme in payload.get("schemes", ["separate"]):
        for coupling in payload.get("couplings", ["maximal"]):
            t0 = time.perf_counter()
            run = run_coupled_warpu(
                bench.target, mix, sigma=payload["sigma"], m=payload["m"],
                seed=seed ^ offsets[(scheme, coupling)],
                initial=payload["initial"], scheme=scheme, coupling=coupling,
                record_l2="L2" in levels,
                max_steps=payload.get("max_steps", 100_000),
            )
            wall_ms = (time.perf_counter() - t0) * 1e3
            for level in levels:
                for h_name in payload.get("h", ["sum"]):
                    h = H_FUNCTIONS[h_name]
                    est = run.estimate(h, payload["l"], payload["m"], level) \
                        if run.tau is not None else float("nan")
                    rows.append((rep, seed, scheme, coupling, level, h_name,
                                 run.tau if run.tau is not None else -1,
                                 est, run.target_evals, wall_ms))
    return rows


def _variance_law_replicate(payload, seed, rep):
    cfg = ExperimentConfig("variance-law", payload)
    bench = make_target(payload["target"])
    mix = _resolve_mixture(cfg, bench, payload.get("seed", 0))
    rng = derive_rng(seed)
    n1, n2 = payload["n1"], payload["n2"]
    pi_draws = bench.sampler(rng, n1)
    wb = warpu_bridge_estimate(
        bench.target, mix, pi_draws, rng.standard_normal((n2, bench.dim)), rng=rng
    )
    swb = stochastic_warpu_bridge(
        bench.target, mix, pi_draws,
        n2_per_component=max(1, n2 // mix.n_components), rng=rng,
    )
    return [(rep, seed, wb.lambda_hat, swb.lambda_hat)]


_WORKERS = {
    "recovery": _recovery_replicate,
    "estimator-comparison": _comparison_replicate,
    "sampler-stages": _stages_replicate,
    "mode-escape": _mode_escape_run,
    "coupling": _coupling_replicate,
    "variance-law": _variance_law_replicate,
}

_HEADERS = {
    "recovery": ("replicate", "seed", "estimator", "c_hat", "lambda_hat",
                 "iterations", "target_evals"),
    "estimator-comparison": _BUDGET_HEADER,
    "sampler-stages": ("replicate", "seed", "stage", "wasserstein"),
    "mode-escape": None,  # depends on the number of modes
    "coupling": ("replicate", "seed", "scheme", "coupling", "level", "h",
                 "tau", "H_lm", "target_evals", "wall_ms"),
    "variance-law": ("replicate", "seed", "lambda_wb", "lambda_swb"),
}


def _run_replicates(config: ExperimentConfig):
    worker = _WORKERS[config.kind]
    seeds = config.replicate_seeds()
    jobs = [(config.payload, seeds[i], i) for i in range(len(seeds))]
    t0 = time.perf_counter()
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_worker_entry, [(config.kind,) + j for j in jobs]))
    else:
        results = [worker(*j) for j in jobs]
    wall_ms = (time.perf_counter() - t0) * 1e3
    # chunks arrive in replicate order (map preserves ordering)
    rows = [row for chunk in results for row in chunk]
    return rows, wall_ms


def _worker_entry(args):
    kind, payload, seed, rep = args
    return _WORKERS[kind](payload, seed, rep)


def _summarize(kind, rows, payload):
    """Aggregate per-replicate rows; returns (header, summary_rows)."""
    bench = make_target(payload["target"])
    truth = float(np.exp(bench.log_c)) if bench.log_c is not None else None
    if kind in ("recovery", "estimator-comparison"):
        idx_est = 2 if kind == "recovery" else 3
        keys = sorted({(r[2], None) if kind == "recovery" else (r[3], r[2])
                       for r in rows})
        out = []
        for est, budget in keys:
            sel = [r for r in rows
                   if r[idx_est] == est and (budget is None or r[2] == budget)]
            c_hats = np.array([r[3 if kind == "recovery" else 4] for r in sel])
            evals = np.array([r[-1] for r in sel])
            row = [est, budget if budget is not None else "",
                   len(sel), float(c_hats.mean()),
                   float(c_hats.std(ddof=1)) if len(sel) > 1 else 0.0,
                   float(c_hats.std(ddof=1) / np.sqrt(len(sel))) if len(sel) > 1 else 0.0,
                   float(evals.mean())]
            if truth is not None:
                row += [rmse(c_hats, truth), rmse_se(c_hats, truth)]
            out.append(tuple(row))
        header = ("estimator", "budget", "replicates", "mean_c", "sd_c",
                  "se_c", "mean_target_evals") + (
                      ("rmse", "rmse_se") if truth is not None else ())
        return header, out
    if kind == "sampler-stages":
        stages = sorted({r[2] for r in rows})
        out = []
        for s in stages:
            w = np.array([r[3] for r in rows if r[2] == s])
            out.append((s, len(w), float(np.median(w)), float(w.mean()),
                        float(w.std(ddof=1)) if w.size > 1 else 0.0))
        return ("stage", "replicates", "median_w1", "mean_w1", "sd_w1"), out
    if kind == "mode-escape":
        methods = sorted({r[2] for r in rows})
        out = []
        for meth in methods:
            occ = np.array([r[3:] for r in rows if r[2] == meth], dtype=float)
            out.append((meth, occ.shape[0])
                       + tuple(float(v) for v in occ.mean(axis=0))
                       + tuple(float(v) for v in np.median(occ, axis=0)))
        n_modes = len(rows[0]) - 3
        header = ("method", "runs") + tuple(
            f"mean_occ_{i + 1}" for i in range(n_modes)
        ) + tuple(f"median_occ_{i + 1}" for i in range(n_modes))
        return header, out
    if kind == "coupling":
        keys = sorted({(r[2], r[3], r[4], r[5]) for r in rows})
        out = []
        for scheme, coupling, level, h_name in keys:
            sel = [r for r in rows if (r[2], r[3], r[4], r[5])
                   == (scheme, coupling, level, h_name)]
            ests = np.array([r[7] for r in sel], dtype=float)
            taus = np.array([r[6] for r in sel], dtype=float)
            ok = taus >= 0
            out.append((
                scheme, coupling, level, h_name, len(sel),
                float(np.mean(ests[ok])), float(np.std(ests[ok], ddof=1)),
                float(np.std(ests[ok], ddof=1) / np.sqrt(ok.sum())),
                float(np.mean(taus[ok])), float(np.median(taus[ok])),
                float(np.quantile(taus[ok], 0.9)), int((~ok).sum()),
            ))
        return ("scheme", "coupling", "level", "h", "replicates", "mean_H",
                "sd_H", "se_H", "mean_tau", "median_tau", "q90_tau",
                "failed"), out
    if kind == "variance-law":
        lam_wb = np.array([r[2] for r in rows])
        lam_swb = np.array([r[3] for r in rows])
        n_tot = payload["n1"] + payload["n2"]
        out = [(
            len(rows),
            float(n_tot * lam_wb.var(ddof=1)),
            float(n_tot * lam_swb.var(ddof=1)),
            float(lam_wb.mean()), float(lam_swb.mean()),
        )]
        return ("replicates", "scaled_var_wb", "scaled_var_swb",
                "mean_lambda_wb", "mean_lambda_swb"), out
    raise ConfigError([f"kind: no summary for {kind!r}"])


def run_experiment(config) -> dict:
    """Execute a validated experiment config; returns the output paths.

    Writes results.csv (per replicate), summary.csv (aggregates),
    timings.csv (wall clock, non-deterministic), and, unless figures are
    disabled, the kind's diagnostic figures rendered to PNG files.
    """
    if not isinstance(config, ExperimentConfig):
        config = validate_config(config)
    if config.kind not in _WORKERS:
        raise ConfigError([f"kind: {config.kind!r} is not runnable"])
    os.makedirs(config.out, exist_ok=True)

    rows, wall_ms = _run_replicates(config)
    header = _HEADERS[config.kind]
    if config.kind == "mode-escape":
        n_modes = len(rows[0]) - 3
        header = ("replicate", "seed", "method") + tuple(
            f"occupancy_{i + 1}" for i in range(n_modes)
        )

    paths = {}
    results_path = os.path.join(config.out, "results.csv")
    write_csv(results_path, header, rows)
    paths["results"] = results_path

    sum_header, sum_rows = _summarize(config.kind, rows, config.payload)
    summary_path = os.path.join(config.out, "summary.csv")
    write_csv(summary_path, sum_header, sum_rows)
    paths["summary"] = summary_path

    timing_path = os.path.join(config.out, "timings.csv")
    write_csv(timing_path, ("experiment", "wall_ms"), [(config.name, wall_ms)])
    paths["timings"] = timing_path

    manifest = dict(config.payload)
    manifest_path = os.path.join(config.out, "config.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    paths["config"] = manifest_path

    if config.figures:
        from . import report
        paths.update(report.render(config.kind, rows, header, config))
    return paths


# -- single sampler runs (CLI `sample`) ----------------------------------------


def run_sampler_config(config: ExperimentConfig):
    """Run one configured sampler and return its trace."""
    payload = config.payload
    bench = make_target(payload["target"])
    algo = payload["sampler"]
    seed = config.seed
    if algo in ("basic-warpu", "adaptive-warpu", "pt", "variance-augmented") \
            and "sigma" not in payload:
        raise ConfigError([f"sigma: required for sampler {algo!r}"])
    if algo == "adaptive-warpu" and "initial" not in payload:
        raise ConfigError(["initial: required for the adaptive sampler"])
    if algo == "basic-warpu":
        mix = _resolve_mixture(config, bench, seed)
        theta0 = payload.get("theta0") or bench.mode_centers[0]
        return run_basic_warpu(
            bench.target, mix, n_steps=payload["T"], sigma=payload["sigma"],
            theta0=np.asarray(theta0, dtype=float), seed=seed, record_caches=True,
        )
    if algo == "adaptive-warpu":
        res = run_adaptive_warpu(
            bench.target, n_per_stage=payload["T"], n_stages=payload.get("M", 8),
            k=payload.get("K", 5), seed=seed, initial=payload["initial"],
            sigma=payload["sigma"], refit_policy=payload.get("refit_policy", "all"),
            annealing=payload.get("annealing"),
        )
        return res.stage_traces[-1] if res.stage_traces else None
    if algo == "pt":
        theta0 = payload.get("theta0") or bench.mode_centers[0]
        return run_parallel_tempering(
            bench.target, n_levels=payload.get("pt_levels", 10),
            n_steps=payload["T"], sigma=payload["sigma"],
            theta0=np.asarray(theta0, dtype=float), seed=seed,
        ).cold_trace
    if algo == "mixture-mh":
        mix = _resolve_mixture(config, bench, seed)
        theta0 = payload.get("theta0") or bench.mode_centers[0]
        return mixture_proposal_mh(
            bench.target, mix, n_steps=payload["T"],
            theta0=np.asarray(theta0, dtype=float), seed=seed,
        )
    if algo == "variance-augmented":
        aux = ScaleMixtureAux(bench.mode_centers)
        theta0 = payload.get("theta0") or bench.mode_centers[0]
        return variance_augmented_warp(
            bench.target, aux, n_steps=payload["T"], sigma=payload["sigma"],
            theta0=np.asarray(theta0, dtype=float), seed=seed,
        )
    raise ConfigError([f"sampler: unknown algorithm {algo!r}"])


def run_diagnostics_config(config: ExperimentConfig) -> dict:
    payload = config.payload
    bench = make_target(payload["target"])
    if "mixture" in payload:
        from .fit import load_mixture
        mix = load_mixture(payload["mixture"])
    else:
        mix = _resolve_mixture(config, bench, config.seed)
    diag = asymptotic_variance_diagnostics(mix, bench.target,
                                           payload["n1"], payload["n2"])
    return {
        "var_wb_pred": diag.var_wb_pred,
        "var_swb_pred": diag.var_swb_pred,
        "term_i": diag.term_i,
        "term_ii": diag.term_ii,
        "condition_holds": diag.condition_holds,
        "beta": diag.beta,
        "component_chi2": diag.component_chi2.tolist(),
        "tilde_weights": diag.tilde_weights.tolist(),
        "log_c": diag.log_c,
        "low_confidence": diag.low_confidence,
    }
