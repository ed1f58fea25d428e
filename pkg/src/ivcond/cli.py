"""Command-line front end: analyze, analyze-summary, simulate, select."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .exceptions import (AllInvalid, BracketNotFound, DegenerateDenominator,
                         DegenerateWeights, NegativeVariance, NoConvergence,
                         StuckChain)
from .inference import conditional_inference
from .iv_core import naive_interval, read_ivdata_csv, tsls_estimate
from .sampler import SamplerConfig
from .sim_harness import SimConfig, coverage_study, ecdf_curves_long, ecdf_study
from .sisvive import (RandomizationSpec, TuningParams, default_epsilon,
                      default_lambda, kkt_residual, solve_randomized_sisvive)
from .summary_data import read_summary_csv, reconstruct_grams

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_SAMPLER = 4

STATISTICS = {"tsls-stat": "tsls_stat", "tsls-est": "tsls_est", "ar": "ar_intermediate"}

_NUMERIC_ERRORS = (DegenerateDenominator, AllInvalid, NoConvergence, NegativeVariance)
_SAMPLER_ERRORS = (StuckChain, BracketNotFound, DegenerateWeights)


def _add_common(p):
    p.add_argument("--statistic", choices=sorted(STATISTICS), default="tsls-est")
    p.add_argument("--null", type=float, default=0.0, help="null value of the effect")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="L1 penalty (default: 2.01 sqrt(n log n) in data units)")
    p.add_argument("--lambda-grid", action="store_true",
                   help="run a sensitivity grid of 15 log-spaced penalties")
    p.add_argument("--epsilon", type=float, default=None,
                   help="ridge coefficient (default 0.01 in data units)")
    p.add_argument("--omega-family", choices=["gaussian", "laplace"], default="gaussian")
    p.add_argument("--omega-scale", type=float, default=None,
                   help="randomization sd (default: data-driven)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burnin", type=int, default=5000)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--config", default=None,
                   help="flat key = value settings file; flags win")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ivcond",
        description="Conditional (post-instrument-selection) inference for linear IV")
    parser.add_argument("--version", action="version", version=f"ivcond {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="individual-level CSV analysis")
    p.add_argument("--input", required=True, help="CSV with header Y,D,Z1,...,ZL")
    _add_common(p)

    p = sub.add_parser("analyze-summary", help="GWAS summary-statistics analysis")
    p.add_argument("--input", required=True,
                   help="CSV with header snp,beta_exposure,se_exposure,beta_outcome,se_outcome")
    p.add_argument("--neff", type=float, required=True, help="effective sample size")
    _add_common(p)

    p = sub.add_parser("select", help="run the randomized selection only")
    p.add_argument("--input", required=True)
    _add_common(p)

    p = sub.add_parser("simulate", help="replication studies on synthetic data")
    p.add_argument("--study", choices=["ecdf", "coverage"], required=True)
    p.add_argument("--r-grid", default="0.25,1.0,2.5",
                   help="comma-separated instrument strengths")
    p.add_argument("--replications", type=int, default=300)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--L", type=int, default=10)
    p.add_argument("--n-invalid", type=int, default=3)
    p.add_argument("--beta-star", type=float, default=1.0)
    p.add_argument("--alpha-invalid", type=float, default=7.0)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--statistic", choices=sorted(STATISTICS), default="tsls-stat")
    p.add_argument("--interval-statistic", choices=sorted(STATISTICS), default="tsls-est",
                   help="statistic used for coverage-study intervals")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burnin", type=int, default=5000)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--plot-data", action="store_true",
                   help="also write long-format ECDF curves")
    p.add_argument("--out", required=True, help="output CSV path prefix")
    p.add_argument("--config", default=None)
    return parser


def _apply_config_file(parser, argv):
    """Pre-scan for --config and install its values as parser defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv[1:] if argv and argv[0] in (
        "analyze", "analyze-summary", "select", "simulate") else argv)
    if not known.config:
        return
    values = {}
    with open(known.config, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{known.config}:{lineno}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = val
    for action in parser._subparsers._group_actions[0].choices.values():
        defaults = {}
        for act in action._actions:
            if act.dest in values:
                raw = values[act.dest]
                if act.type is not None:
                    defaults[act.dest] = act.type(raw)
                elif isinstance(act.const, bool) or isinstance(act.default, bool):
                    defaults[act.dest] = raw.lower() in ("1", "true", "yes")
                else:
                    defaults[act.dest] = raw
        action.set_defaults(**defaults)


def _seeds_for(seed: int):
    ss = np.random.SeedSequence([int(seed), 7])
    omega_seed, chain_seed = (int(s) for s in ss.generate_state(2, dtype=np.uint32))
    return omega_seed, chain_seed


def _pieces(grams, args):
    tuning = TuningParams(
        lam=args.lam if args.lam is not None else default_lambda(grams),
        epsilon=args.epsilon if args.epsilon is not None else default_epsilon(grams))
    omega_seed, chain_seed = _seeds_for(args.seed)
    rand = RandomizationSpec(family=args.omega_family, scale=args.omega_scale,
                             seed=omega_seed)
    cfg = SamplerConfig(burnin=args.burnin, samples=args.samples, seed=chain_seed)
    return tuning, rand, cfg


def _provenance(args, tuning, grams):
    return {
        "version": __version__,
        "statistic": args.statistic,
        "null": args.null,
        "level": args.level,
        "lambda": tuning.lam,
        "epsilon": tuning.epsilon,
        "omega_family": args.omega_family,
        "omega_scale": args.omega_scale,
        "seed": args.seed,
        "burnin": args.burnin,
        "samples": args.samples,
        "n": grams.n,
        "L": grams.L,
    }


def _analysis_record(grams, names, args):
    tuning, rand, cfg = _pieces(grams, args)
    kind = STATISTICS[args.statistic]
    sel = solve_randomized_sisvive(grams, tuning, rand)
    result = conditional_inference(grams, sel, kind=kind, null_value=args.null,
                                   level=args.level, cfg=cfg)
    naive = naive_interval(grams, sel.E, args.level, "tsls")
    return {
        "command": "analyze",
        "estimate": tsls_estimate(grams, sel.E),
        "pvalue": result.pvalue,
        "conditional_interval": [result.ci_lower, result.ci_upper],
        "naive_interval": [naive.lower, naive.upper],
        "selected_invalid": [names[j] for j in sel.E],
        "signs": sel.signs.tolist(),
        "n_selected": sel.n_selected,
        "reference_beta": result.reference_beta,
        "diagnostics": result.diagnostics,
        "provenance": _provenance(args, tuning, grams),
    }


def _lambda_grid_records(grams, names, args):
    tuning0, rand, cfg = _pieces(grams, args)
    kind = STATISTICS[args.statistic]
    grid = np.geomspace(tuning0.lam / 10.0, tuning0.lam * 10.0, 15)
    rows = []
    for lam in grid:
        tuning = TuningParams(lam=float(lam), epsilon=tuning0.epsilon)
        try:
            sel = solve_randomized_sisvive(grams, tuning, rand)
        except _NUMERIC_ERRORS as exc:
            rows.append({"lambda": float(lam), "error": type(exc).__name__})
            continue
        if sel.n_selected >= grams.L / 2:
            rows.append({"lambda": float(lam), "n_selected": sel.n_selected,
                         "skipped": "more than half the instruments selected"})
            continue
        try:
            result = conditional_inference(grams, sel, kind=kind,
                                           null_value=args.null,
                                           level=args.level, cfg=cfg)
            naive = naive_interval(grams, sel.E, args.level, "tsls")
            rows.append({
                "lambda": float(lam),
                "n_selected": sel.n_selected,
                "selected_invalid": [names[j] for j in sel.E],
                "estimate": tsls_estimate(grams, sel.E),
                "pvalue": result.pvalue,
                "conditional_interval": [result.ci_lower, result.ci_upper],
                "naive_interval": [naive.lower, naive.upper],
            })
        except (_NUMERIC_ERRORS + _SAMPLER_ERRORS) as exc:
            rows.append({"lambda": float(lam), "n_selected": sel.n_selected,
                         "error": type(exc).__name__})
    return {"command": "lambda-grid", "rows": rows,
            "provenance": _provenance(args, tuning0, grams)}


def _emit(record, args):
    if args.format == "csv" and record.get("command") == "lambda-grid":
        import pandas as pd
        flat = []
        for row in record["rows"]:
            r = dict(row)
            for key in ("conditional_interval", "naive_interval"):
                if key in r:
                    r[key + "_lo"], r[key + "_hi"] = r.pop(key)
            if "selected_invalid" in r:
                r["selected_invalid"] = ";".join(r["selected_invalid"])
            flat.append(r)
        text = pd.DataFrame(flat).to_csv(index=False)
    else:
        text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_analyze(args) -> int:
    data = read_ivdata_csv(args.input)
    names = [f"Z{j}" for j in range(1, data.L + 1)]
    if args.lambda_grid:
        record = _lambda_grid_records(data.grams, names, args)
    else:
        record = _analysis_record(data.grams, names, args)
    _emit(record, args)
    return EXIT_OK


def cmd_analyze_summary(args) -> int:
    summary, names = read_summary_csv(args.input, args.neff)
    grams = reconstruct_grams(summary).to_grams()
    if args.lambda_grid:
        record = _lambda_grid_records(grams, names, args)
    else:
        record = _analysis_record(grams, names, args)
        record["command"] = "analyze-summary"
    _emit(record, args)
    return EXIT_OK


def cmd_select(args) -> int:
    data = read_ivdata_csv(args.input)
    grams = data.grams
    tuning, rand, _ = _pieces(grams, args)
    sel = solve_randomized_sisvive(grams, tuning, rand)
    record = {
        "command": "select",
        "selection": sel.to_dict(),
        "kkt_residual": kkt_residual(grams, sel),
        "provenance": _provenance(args, tuning, grams),
    }
    _emit(record, args)
    return EXIT_OK


def cmd_simulate(args) -> int:
    r_grid = [float(x) for x in args.r_grid.split(",") if x.strip()]
    if not r_grid:
        raise ValueError("--r-grid must list at least one strength")
    statistic = STATISTICS[args.statistic]
    if args.study == "coverage":
        statistic = STATISTICS[args.interval_statistic]
    cfg = SimConfig(
        n=args.n, L=args.L, n_invalid=args.n_invalid, beta_star=args.beta_star,
        alpha_invalid=args.alpha_invalid, rho=args.rho,
        replications=args.replications, seed=args.seed,
        statistic=statistic, level=args.level,
        burnin=args.burnin, samples=args.samples)
    if args.study == "ecdf":
        summary, detail = ecdf_study(cfg, r_grid, workers=args.workers)
        if args.plot_data:
            ecdf_curves_long(detail).to_csv(f"{args.out}_curves.csv", index=False)
    else:
        summary, detail = coverage_study(cfg, r_grid, workers=args.workers)
    summary.to_csv(f"{args.out}_summary.csv", index=False)
    detail.to_csv(f"{args.out}_detail.csv", index=False)
    sys.stdout.write(summary.to_string(index=False) + "\n")
    return EXIT_OK


_COMMANDS = {
    "analyze": cmd_analyze,
    "analyze-summary": cmd_analyze_summary,
    "select": cmd_select,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _NUMERIC_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_NUMERIC
    except _SAMPLER_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_SAMPLER


if __name__ == "__main__":
    sys.exit(main())
