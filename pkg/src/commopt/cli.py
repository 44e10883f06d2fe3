"""Command-line interface.

Exit codes: 0 on success, 2 on configuration/validation errors, 3 when a
divergence guard trips.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__, compressors, harness, sppm
from . import rng as rngmod
from .problems import DivergenceError, reference_solution

_FAMILIES = {
    "run-efbv": ("efbv", "ef21", "diana"),
    "run-scafflix": ("scafflix", "iscaffnew", "flix_gd"),
    "run-sppm": ("sppm_as", "localgd", "mbgd", "fedprox_sppm", "fedavg_sppm"),
}

_PARAM_ALIASES = {
    "K": "sppm.K",
    "alpha": "scafflix.alpha",
    "gamma": "sppm.gamma",
    "p": "scafflix.p",
}


def _parse_param(text: str) -> tuple[str, list]:
    name, sep, values = text.partition("=")
    if not sep:
        raise ValueError(f"--param needs name=values, got {text!r}")
    path = _PARAM_ALIASES.get(name, name)
    if "." not in path:
        raise ValueError(f"unknown sweep parameter {name!r}; use a dotted path")
    if ".." in values:
        lo, hi = values.split("..")
        return path, list(range(int(lo), int(hi) + 1))
    parsed = []
    for item in values.split(","):
        try:
            parsed.append(int(item))
        except ValueError:
            parsed.append(float(item))
    return path, parsed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="commopt",
        description="Communication-efficient distributed optimization simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for command in _FAMILIES:
        run = sub.add_parser(command, help=f"run a {command[4:]} experiment config")
        run.add_argument("--config", required=True)

    sw = sub.add_parser("sweep", help="grid-sweep a config parameter")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True, action="append",
                    help="name=lo..hi or name=v1,v2,...")

    cert = sub.add_parser("certify-compressor",
                          help="print certified and estimated compressor parameters")
    cert.add_argument("--spec", required=True)
    cert.add_argument("--dim", required=True, type=int)
    cert.add_argument("--trials", type=int, default=10_000)
    cert.add_argument("--seed", type=int, default=0)

    st = sub.add_parser("stats", help="print sampling-scheme statistics for a config")
    st.add_argument("--config", required=True)
    return parser


def _cmd_run(args, family: tuple[str, ...]) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    if cfg.algorithm not in family:
        raise harness.ConfigError(
            "experiment.algorithm",
            f"{cfg.algorithm!r} does not belong to this subcommand ({family})")
    for path in harness.run_experiment(cfg):
        print(path)
    return 0


def _cmd_sweep(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    grid = {}
    for item in args.param:
        path, values = _parse_param(item)
        grid[path] = values
    rows = harness.sweep(cfg, grid)
    print(harness.sweep_table(rows))
    return 0


def _cmd_certify(args) -> int:
    spec = compressors.parse_compressor(args.spec, args.dim)
    eta, omega = spec.certified
    report = compressors.estimate_params(
        spec, args.trials, rngmod.stream(args.seed, rngmod.ESTIMATE))
    print(f"spec          {spec.label()}  d={args.dim}")
    print(f"certified     eta={eta:.6g}  omega={omega:.6g}")
    print(f"estimated     eta_hat={report.eta_hat:.6g}  omega_hat={report.omega_hat:.6g}")
    print(f"violations    {len(report.violations)}")
    return 0 if not report.violations else 3


def _cmd_stats(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    p = harness.build_problem(cfg)
    scheme = harness.build_scheme(cfg, p)
    x_star = reference_solution(p, tol=float(cfg.get("experiment.ref_tol", 1e-12)))
    stats = sppm.sampling_stats(scheme, p.constants().mu_i, p.grad_all(x_star))
    print(f"scheme        {scheme.kind}  n={scheme.n}")
    print(f"mu_AS         {stats.mu_as:.12g}")
    print(f"sigma_star^2  {stats.sigma_star_sq:.12g}")
    if stats.per_cluster_sigma_sq:
        pretty = ", ".join(f"{v:.6g}" for v in stats.per_cluster_sigma_sq)
        print(f"cluster sigma^2  [{pretty}]")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in _FAMILIES:
            return _cmd_run(args, _FAMILIES[args.command])
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "certify-compressor":
            return _cmd_certify(args)
        return _cmd_stats(args)
    except (harness.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
