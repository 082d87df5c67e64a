"""Figure rendering for experiment outputs.

Each experiment kind gets a small set of diagnostic figures written next
to its delimited output.  Figures are a convenience view of the CSVs, not
an additional data channel: everything plotted is recomputable from
results.csv.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_COLORS = {"bs": "tab:green", "wb": "tab:red", "swb": "tab:blue",
           "warpu": "tab:blue", "pt": "tab:orange"}


def _save(fig, out, name, paths):
    path = os.path.join(out, name)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths[name] = path


def render(kind, rows, header, config) -> dict:
    fn = _RENDERERS.get(kind)
    if fn is None:
        return {}
    paths = {}
    fn(rows, header, config, paths)
    return paths


def _render_estimator_rmse(rows, header, config, paths):
    from .metrics import rmse
    from .targets import make_target

    bench = make_target(config.payload["target"])
    truth = float(np.exp(bench.log_c)) if bench.log_c is not None else None
    if truth is None:
        return
    budgets = sorted({r[2] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for est in sorted({r[3] for r in rows}):
        xs, ys = [], []
        for b in budgets:
            c_hats = [r[4] for r in rows if r[2] == b and r[3] == est]
            evals = [r[6] for r in rows if r[2] == b and r[3] == est]
            if c_hats:
                xs.append(np.mean(evals))
                ys.append(rmse(np.array(c_hats), truth))
        ax.plot(xs, ys, "o-", label=est.upper(), color=_COLORS.get(est))
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("target evaluations")
    ax.set_ylabel("RMSE")
    ax.legend()
    ax.set_title(config.name)
    _save(fig, config.out, "rmse_vs_evals.png", paths)


def _render_recovery(rows, header, config, paths):
    from .targets import make_target

    bench = make_target(config.payload["target"])
    ests = sorted({r[2] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    data = [[r[3] for r in rows if r[2] == e] for e in ests]
    ax.boxplot(data, tick_labels=[e.upper() for e in ests])
    if bench.log_c is not None:
        ax.axhline(np.exp(bench.log_c), color="k", ls="--", lw=1,
                   label="true constant")
        ax.legend()
    ax.set_ylabel("estimated constant")
    ax.set_title(config.name)
    _save(fig, config.out, "estimates_boxplot.png", paths)


def _render_stages(rows, header, config, paths):
    stages = sorted({r[2] for r in rows})
    med = [np.median([r[3] for r in rows if r[2] == s]) for s in stages]
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in sorted({r[0] for r in rows}):
        ws = [r[3] for r in rows if r[0] == rep]
        ax.plot(stages, ws, color="0.8", lw=0.8)
    ax.plot(stages, med, "o-", color="tab:blue", label="median")
    ax.set_yscale("log")
    ax.set_xlabel("stage")
    ax.set_ylabel("marginal Wasserstein distance")
    ax.legend()
    ax.set_title(config.name)
    _save(fig, config.out, "wasserstein_vs_stage.png", paths)


def _render_mode_escape(rows, header, config, paths):
    methods = sorted({r[2] for r in rows})
    n_modes = len(rows[0]) - 3
    fig, ax = plt.subplots(figsize=(6, 4))
    rng = np.random.default_rng(0)
    for i, meth in enumerate(methods):
        occ = np.array([r[3 + n_modes - 1] for r in rows if r[2] == meth])
        jitter = rng.uniform(-0.08, 0.08, occ.size)
        ax.plot(np.full(occ.size, i) + jitter, occ, "o", alpha=0.6,
                color=_COLORS.get(meth))
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods)
    ax.set_ylabel("occupancy of last-listed mode")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(config.name)
    _save(fig, config.out, "mode_occupancy.png", paths)


def _render_coupling(rows, header, config, paths):
    fig, ax = plt.subplots(figsize=(6, 4))
    for scheme in sorted({r[2] for r in rows}):
        taus = np.array(sorted(r[6] for r in rows if r[2] == scheme and r[6] >= 0))
        if taus.size == 0:
            continue
        ts = np.arange(1, taus.max() + 1)
        surv = [(taus > t).mean() for t in ts]
        keep = np.array(surv) > 0
        ax.plot(ts[keep], np.array(surv)[keep], label=scheme)
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("P(meeting time > t)")
    ax.legend()
    ax.set_title(config.name)
    _save(fig, config.out, "tau_survival.png", paths)

    fig, ax = plt.subplots(figsize=(6, 4))
    combos = sorted({(r[2], r[4], r[5]) for r in rows})
    labels, means, ses = [], [], []
    for scheme, level, h_name in combos:
        vals = np.array([r[7] for r in rows
                         if (r[2], r[4], r[5]) == (scheme, level, h_name)
                         and np.isfinite(r[7])])
        if vals.size == 0:
            continue
        labels.append(f"{scheme}\n{level}:{h_name}")
        means.append(vals.mean())
        ses.append(vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0)
    ax.errorbar(range(len(labels)), means, yerr=3 * np.array(ses), fmt="o")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("estimate (with 3 SE bars)")
    ax.set_title(config.name)
    _save(fig, config.out, "unbiased_estimates.png", paths)


def _render_variance_law(rows, header, config, paths):
    lam_wb = np.array([r[2] for r in rows])
    lam_swb = np.array([r[3] for r in rows])
    n_tot = config.payload["n1"] + config.payload["n2"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([0, 1], [n_tot * lam_wb.var(ddof=1), n_tot * lam_swb.var(ddof=1)],
           color=["tab:red", "tab:blue"])
    ax.set_xticks([0, 1])
    ax.set_xticklabels(["transport bridge", "stratified bridge"])
    ax.set_ylabel("(n1+n2) x empirical variance of log estimate")
    ax.set_title(config.name)
    _save(fig, config.out, "scaled_variance.png", paths)


def render_trace(trace, out, name="trace.png", coord=0):
    """Trace and autocorrelation panel for one sampler run."""
    from .metrics import ess_autocorrelation

    os.makedirs(out, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5))
    x = trace.samples[:, coord]
    ax1.plot(x, lw=0.5)
    ax1.set_ylabel(f"coordinate {coord + 1}")
    ess, acf = ess_autocorrelation(x)
    ax2.bar(range(len(acf[:50])), acf[:50], width=0.8)
    ax2.set_xlabel(f"lag (ESS = {ess:.0f} of {len(x)})")
    ax2.set_ylabel("autocorrelation")
    path = os.path.join(out, name)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_diag(report_dict, out, name="diagnostics.png"):
    """Bar chart of the discrepancy decomposition and variance predictions."""
    os.makedirs(out, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    vals = [report_dict["term_i"], report_dict["term_ii"]]
    ax1.bar([0, 1], vals, color=["tab:purple", "tab:gray"])
    ax1.set_xticks([0, 1])
    ax1.set_xticklabels(["systematic (I)", "residual (II)"])
    ax1.set_title("discrepancy split")
    ax2.bar([0, 1], [report_dict["var_wb_pred"], report_dict["var_swb_pred"]],
            color=["tab:red", "tab:blue"])
    ax2.set_xticks([0, 1])
    ax2.set_xticklabels(["transport", "stratified"])
    ax2.set_title("predicted scaled variance")
    path = os.path.join(out, name)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


_RENDERERS = {
    "recovery": _render_recovery,
    "estimator-comparison": _render_estimator_rmse,
    "sampler-stages": _render_stages,
    "mode-escape": _render_mode_escape,
    "coupling": _render_coupling,
    "variance-law": _render_variance_law,
}
