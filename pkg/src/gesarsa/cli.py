"""Command line entry point: ``gesarsa <subcommand> ...``.

Reports are YAML key-value documents on stdout (or ``--output``); sweeps and
runs write CSV, SVG and summary files under the output directory, which
``GESARSA_OUTPUT_DIR`` overrides.  ``GESARSA_MAX_WORKERS`` caps the number of
worker processes used by ``sweep``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis, harness
from .environments import TabularEnv, make_spec
from .mdp import ErgodicityError, load_mdp_file, save_mdp_file


def _plain(x):
    """Convert numpy values into YAML-safe builtins."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        if np.iscomplexobj(x):
            return [{"re": float(z.real), "im": float(z.imag)} for z in x.ravel()]
        return x.tolist()
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _emit(report: dict, output: str | None) -> None:
    text = yaml.safe_dump(_plain(report), sort_keys=False)
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _load_problem(args):
    doc = load_mdp_file(args.mdp_file)
    missing = [n for n in (args.target, args.behaviour) if n not in doc.policies]
    if missing:
        raise ValueError(f"policies {missing} not in file (have {sorted(doc.policies)})")
    if doc.features is None:
        raise ValueError("the MDP file has no features")
    lam = args.lam if args.lam is not None else doc.lam
    if lam is None:
        raise ValueError("no lambda given on the command line or in the file")
    return doc, doc.policies[args.target], doc.policies[args.behaviour], lam


def cmd_analyze(args) -> int:
    doc, pi, mu, lam = _load_problem(args)
    km = analysis.key_matrices(doc.mdp, pi, mu, doc.features, lam)
    rep = analysis.stability_check(km)
    report = {
        "lambda": lam,
        "gamma": doc.mdp.gamma,
        "n_features": km.p,
        "feature_rank": doc.features.rank(),
        "stable": rep.stable,
        "max_real_part": rep.max_real_part,
        "eigenvalues": rep.eigenvalues,
        "safe_step_size": rep.safe_step_size,
        "spectral_radius_at_safe_step": rep.spectral_radius,
        "A": km.A,
        "b": km.b,
        "M": km.M,
    }
    try:
        report["theta_star"] = analysis.td_fixed_point(km)
        report["mspbe_at_zero"] = analysis.mspbe(km, np.zeros(km.p))
    except analysis.SolvabilityError as err:
        report["theta_star"] = None
        report["solvability"] = str(err)
    if rep.stable:
        try:
            rc = analysis.rate_constants(km)
            report["rate_constants"] = {k: getattr(rc, k) for k in rc.__dataclass_fields__}
        except analysis.SolvabilityError as err:
            report["rate_constants"] = str(err)
    _emit(report, args.output)
    return 0


def cmd_fixed_points(args) -> int:
    doc, pi, mu, lam = _load_problem(args)
    rows = analysis.fixed_point_table(doc.mdp, pi, mu, doc.features, lam)
    report = {"lambda": lam, "gamma": doc.mdp.gamma}
    for name, row in rows.items():
        report[name] = {
            "solvable": row.solvable,
            "theta": row.theta,
            "residual": row.residual,
            "condition": row.condition,
            "matrix": row.matrix,
            "b": row.b,
        }
    if rows["GES"].solvable and rows["GTB"].solvable:
        report["max_abs_difference"] = float(np.max(np.abs(rows["GES"].theta - rows["GTB"].theta)))
    _emit(report, args.output)
    return 0


def cmd_demo_divergence(args) -> int:
    demo = harness.divergence_demo(args.gamma, args.lam, args.alpha, args.steps)
    report = demo.report()
    if demo.regime == "stable":
        report["note"] = "stable regime: the first component decays to zero"
    report["growth_curve"] = demo.series[:: max(1, len(demo.series) // 50)]
    _emit(report, args.output)
    return 0


def _load_config(args) -> harness.ExperimentConfig:
    config = harness.load_config(args.config)
    if args.output_dir:
        config = harness.ExperimentConfig.from_dict({**config.to_dict(), "output_dir": args.output_dir})
    return config


def cmd_run(args) -> int:
    config = _load_config(args)
    record = harness.run(config, args.seed)
    out = harness.output_dir(config)
    files = harness.emit_results([record], out, plots=not args.no_plots)
    report = {
        "config_hash": record.config_hash,
        "seed": record.seed,
        "alpha": record.alpha,
        "beta_over_alpha": record.beta_over_alpha,
        "diverged": record.diverged,
        "diverged_at": record.diverged_at,
        "final_mspbe": record.series["mspbe"][-1],
        "final_mse": record.mse,
        "theta": record.theta,
        "wall_time_s": record.wall_time,
        "files": {k: str(v) for k, v in files.items()},
    }
    _emit(report, args.output)
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    records = harness.sweep(config, workers=args.workers)
    files = harness.emit_results(records, harness.output_dir(config), plots=not args.no_plots)
    report = {
        "config_hash": config.config_hash(),
        "n_records": len(records),
        "diverged_records": sum(r.diverged for r in records),
        "summary": harness.summary(records),
        "files": {k: str(v) for k, v in files.items()},
    }
    _emit(report, args.output)
    return 0


def cmd_export_mdp(args) -> int:
    spec = make_spec(args.environment)
    env = TabularEnv(spec)
    save_mdp_file(args.path, env.mdp, {"pi": env.pi, "mu": env.mu}, env.features, spec.lam)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gesarsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def mdp_command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("mdp_file")
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--target", default="pi", help="name of the target policy in the file")
        p.add_argument("--behaviour", default="mu", help="name of the behaviour policy in the file")
        p.add_argument("--output", default=None)
        p.set_defaults(func=func)

    mdp_command("analyze", cmd_analyze, "stability report for an MDP file")
    mdp_command("fixed-points", cmd_fixed_points, "GES and GTB fixed points for an MDP file")

    for name, func, help_ in (("run", cmd_run, "single GES(lambda) run"), ("sweep", cmd_sweep, "step-size grid")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--output", default=None, help="write the report here instead of stdout")
        p.add_argument("--no-plots", action="store_true")
        if name == "run":
            p.add_argument("--seed", type=int, default=None)
        else:
            p.add_argument("--workers", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("demo-divergence", help="expected off-line update on Two-State")
    p.add_argument("--gamma", type=float, default=0.999)
    p.add_argument("--lambda", dest="lam", type=float, default=0.99)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_demo_divergence)

    p = sub.add_parser("export-mdp", help="write a tabular environment as an MDP file")
    p.add_argument("environment", choices=["two-state", "baird"])
    p.add_argument("path")
    p.set_defaults(func=cmd_export_mdp)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (KeyError, ValueError, OSError, ErgodicityError, np.linalg.LinAlgError) as err:
        print(f"gesarsa {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
