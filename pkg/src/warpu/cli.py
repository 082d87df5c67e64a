"""Command-line interface.

Subcommands: fit (mixture EM on a sample file), sample (run a sampler),
estimate (bridge family on trace files), unbiased (coupled chains), bench
(full experiment), diag (divergence and variance diagnostics).

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .config import load_config, validate_config
from .errors import ConfigError, NumericError, WarpUError
from .rngs import derive_rng


def _load_samples(path):
    if path.endswith(".npy"):
        return np.load(path)
    return np.loadtxt(path, delimiter=",", skiprows=1 if _has_header(path) else 0)


def _has_header(path):
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(tok) for tok in first.strip().split(",")]
        return False
    except ValueError:
        return True


def _add_common(parser):
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None)


def _merged_config(args, kind=None):
    if args.config:
        cfg = load_config(args.config)
        payload = dict(cfg.payload)
    else:
        payload = {}
    if kind is not None:
        payload["kind"] = kind
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.out is not None:
        payload["out"] = args.out
    if getattr(args, "threads", None) is not None:
        payload["threads"] = args.threads
    return validate_config(payload)


def cmd_fit(args):
    from .fit import FitConstraints, em_fit, save_mixture

    samples = _load_samples(args.samples)
    constraints = FitConstraints(
        k_max=max(args.k + 1, 2),
        det_min=args.det_min, det_max=args.det_max,
        mean_norm_max=args.mean_norm_max,
    )
    mix = em_fit(samples, args.k, constraints, seed=args.seed or 0)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "mixture.json")
    save_mixture(mix, path)
    print(f"fitted {args.k}-component mixture -> {path}")
    return 0


def cmd_sample(args):
    from . import report
    from .experiments import run_sampler_config

    cfg = _merged_config(args, kind="sample")
    trace = run_sampler_config(cfg)
    if trace is None:
        raise ConfigError(["sampler produced no trace"])
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "trace.csv")
    trace.to_csv(path)
    print(f"wrote {len(trace)} steps -> {path}")
    print(f"acceptance rate {trace.acceptance_rate:.3f}, "
          f"mode-jump rate {trace.mode_jump_rate:.3f}, "
          f"target evaluations {trace.target_evals}")
    if cfg.figures:
        fig = report.render_trace(trace, out)
        print(f"figure -> {fig}")
    return 0


def cmd_estimate(args):
    from .estimators import (classical_bridge, stochastic_warpu_bridge,
                             warpu_bridge_estimate)
    from .fit import load_mixture
    from .targets import make_target

    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        raise ConfigError(["--config: required for estimate"])
    payload = cfg.payload
    bench = make_target(payload["target"])
    if "mixture" in payload and isinstance(payload["mixture"], str):
        mix = load_mixture(payload["mixture"])
    else:
        from .experiments import _resolve_mixture
        mix = _resolve_mixture(cfg, bench, cfg.seed)
    rng = derive_rng(args.seed if args.seed is not None else cfg.seed)

    if args.trace:
        from .samplers import SamplerTrace
        samples = SamplerTrace.from_csv(args.trace).samples
    else:
        samples = bench.sampler(rng, payload["n1"])
    n2 = payload["n2"]
    name = args.estimator
    if name == "bs":
        res = classical_bridge(bench.target, mix, samples, mix.sample(rng, n2))
    elif name == "wb":
        res = warpu_bridge_estimate(bench.target, mix, samples,
                                    rng.standard_normal((n2, bench.dim)), rng=rng,
                                    compute_se=True)
    else:
        res = stochastic_warpu_bridge(
            bench.target, mix, samples,
            n2_per_component=max(1, n2 // mix.n_components), rng=rng,
            compute_se=True,
        )
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"estimate_{name}.json")
    with open(path, "w") as fh:
        json.dump(res.to_dict(), fh, indent=1)
    print(json.dumps(res.to_dict(), indent=1))
    print(f"report -> {path}")
    return 0


def cmd_unbiased(args):
    from .experiments import run_experiment

    cfg = _merged_config(args, kind="coupling")
    paths = run_experiment(cfg)
    print(f"results -> {paths['results']}")
    print(f"summary -> {paths['summary']}")
    return 0


def cmd_bench(args):
    from .experiments import run_experiment

    cfg = _merged_config(args)
    t0 = time.perf_counter()
    paths = run_experiment(cfg)
    dt = time.perf_counter() - t0
    for label, path in paths.items():
        print(f"{label} -> {path}")
    print(f"done in {dt:.1f}s")
    return 0


def cmd_diag(args):
    from . import report
    from .experiments import run_diagnostics_config

    cfg = _merged_config(args, kind="diag")
    rep = run_diagnostics_config(cfg)
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "diagnostics.json")
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=1)
    print(json.dumps(rep, indent=1))
    if cfg.figures and all(
        np.isfinite(rep[k]) for k in ("term_i", "term_ii", "var_wb_pred", "var_swb_pred")
    ):
        fig = report.render_diag(rep, out)
        print(f"figure -> {fig}")
    print(f"report -> {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="warpu",
        description="Transport-based multimodal sampling and "
                    "normalizing-constant estimation benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a Gaussian mixture to samples")
    p.add_argument("--samples", required=True, help="CSV or NPY sample file")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--det-min", type=float, default=1e-6)
    p.add_argument("--det-max", type=float, default=1e9)
    p.add_argument("--mean-norm-max", type=float, default=1e4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("sample", help="run a sampler from a config")
    _add_common(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("estimate", help="bridge estimators on draws or a trace")
    _add_common(p)
    p.add_argument("--estimator", choices=("bs", "wb", "swb"), default="swb")
    p.add_argument("--trace", help="trace CSV to reuse instead of fresh draws")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("unbiased", help="coupled-chain unbiased estimation")
    _add_common(p)
    p.set_defaults(fn=cmd_unbiased)

    p = sub.add_parser("bench", help="run a full experiment config")
    _add_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("diag", help="variance diagnostics for target+mixture")
    _add_common(p)
    p.set_defaults(fn=cmd_diag)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except WarpUError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
