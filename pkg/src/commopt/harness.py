"""Experiment configuration, deterministic execution, persistence, sweeps.

Configs are TOML files with one table per concern (problem, compressor,
sampling, algorithm knobs).  Re-running a config with the same seed
produces byte-identical trace files.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import __version__, compressors, datasets, efbv, scafflix, sppm
from . import rng as rngmod
from .problems import Problem, Regularizer, reference_solution
# trace persistence is part of this module's surface; read_trace and
# TraceSchemaError are re-exported for callers
from .trace import Trace, TraceSchemaError, read_trace, write_trace

ALGORITHMS = ("efbv", "ef21", "diana", "scafflix", "iscaffnew", "flix_gd",
              "sppm_as", "localgd", "mbgd", "fedprox_sppm", "fedavg_sppm")


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    raw: dict
    path: Optional[str] = None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        cfg = cls(raw=raw, path=str(path))
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls(raw=copy.deepcopy(raw))
        cfg.validate()
        return cfg

    # -- access helpers -------------------------------------------------

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(name, "must be a table")
        return value

    def get(self, path: str, default=None, required: bool = False):
        section, _, key = path.partition(".")
        table = self.section(section)
        if key not in table:
            if required:
                raise ConfigError(path, "missing required key")
            return default
        return table[key]

    def override(self, path: str, value) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        section, _, key = path.partition(".")
        raw.setdefault(section, {})[key] = value
        return ExperimentConfig.from_dict(raw)

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        algorithm = self.get("experiment.algorithm", required=True)
        if algorithm not in ALGORITHMS:
            raise ConfigError("experiment.algorithm", f"unknown algorithm {algorithm!r}")
        seeds = self.get("experiment.seeds", required=True)
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("experiment.seeds", "must be a nonempty list")
        rounds = self.get("experiment.rounds", required=True)
        if not isinstance(rounds, int) or rounds < 1:
            raise ConfigError("experiment.rounds", "must be a positive integer")
        kind = self.get("problem.kind", required=True)
        if kind not in ("quadratic", "l2_logistic", "nonconvex_logistic"):
            raise ConfigError("problem.kind", f"unknown problem kind {kind!r}")
        source = self.get("problem.source")
        if source is not None and not os.path.exists(source):
            raise ConfigError("problem.source", f"file {source!r} does not exist")

    @property
    def algorithm(self) -> str:
        return self.raw["experiment"]["algorithm"]

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["experiment"]["seeds"])

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_problem(cfg: ExperimentConfig) -> Problem:
    kind = cfg.get("problem.kind", required=True)
    source = cfg.get("problem.source")
    if kind == "quadratic":
        n = int(cfg.get("problem.n", 10))
        dim = int(cfg.get("problem.dim", 5))
        mu_min = float(cfg.get("problem.mu_min", 0.5))
        mu_max = float(cfg.get("problem.mu_max", 1.5))
        spread = float(cfg.get("problem.spread", 1.0))
        gen_seed = int(cfg.get("problem.gen_seed", 0))
        rng = rngmod.stream(gen_seed, rngmod.MISC)
        mus = np.geomspace(mu_min, mu_max, n)
        centers = spread * rng.normal(size=(n, dim))
        return Problem.quadratic(mus, centers)
    if source is not None:
        ds = datasets.parse_libsvm(source)
    else:
        ds = datasets.synth_logistic_dataset(
            count=int(cfg.get("problem.count", 200)),
            dim=int(cfg.get("problem.dim", 5)),
            seed=int(cfg.get("problem.gen_seed", 0)),
            separation=float(cfg.get("problem.separation", 2.0)),
        )
    scheme = cfg.get("problem.partition", "iid")
    clients = int(cfg.get("problem.clients", 10))
    part_seed = int(cfg.get("problem.part_seed", 0))
    try:
        part = datasets.partition(ds, scheme, clients, part_seed,
                                  alpha=float(cfg.get("problem.dirichlet_alpha", 0.5)))
    except datasets.PartitionError as exc:
        raise ConfigError("problem.partition", str(exc)) from exc
    return Problem.from_dataset(ds, part, mu=float(cfg.get("problem.mu", 0.1)), kind=kind)


def build_ensemble(cfg: ExperimentConfig, p: Problem) -> compressors.EnsembleSpec:
    text = cfg.get("compressor.spec", required=True)
    try:
        spec = compressors.parse_compressor(text, p.dim)
    except ValueError as exc:
        raise ConfigError("compressor.spec", str(exc)) from exc
    dependence = cfg.get("compressor.dependence", "independent")
    try:
        return compressors.homogeneous(spec, p.n, dependence)
    except ValueError as exc:
        raise ConfigError("compressor.dependence", str(exc)) from exc


def build_scheme(cfg: ExperimentConfig, p: Problem) -> sppm.SamplingScheme:
    kind = cfg.get("sampling.kind", required=True)
    try:
        if kind == "full":
            return sppm.full(p.n)
        if kind == "nonuniform":
            return sppm.nonuniform(cfg.get("sampling.probs", required=True))
        if kind == "nice":
            return sppm.nice(p.n, int(cfg.get("sampling.tau", required=True)))
        if kind in ("block", "stratified"):
            blocks = cfg.get("sampling.blocks")
            if blocks is None:
                b = int(cfg.get("sampling.b", required=True))
                blocks = _heuristic_blocks(cfg, p, b)
            if kind == "block":
                return sppm.block(blocks, cfg.get("sampling.q"))
            return sppm.stratified(blocks)
    except ValueError as exc:
        raise ConfigError("sampling", str(exc)) from exc
    raise ConfigError("sampling.kind", f"unknown sampling kind {kind!r}")


def _heuristic_blocks(cfg: ExperimentConfig, p: Problem, b: int):
    """Cluster clients by their optimum gradients (the practical heuristic)."""
    x_star = reference_solution(p, tol=float(cfg.get("experiment.ref_tol", 1e-10)))
    return sppm.optimal_stratified_clustering(p.grad_all(x_star), b, mode="kmeans",
                                              seed=int(cfg.get("sampling.seed", 0)))


def _build_cost(cfg: ExperimentConfig) -> sppm.CostModel:
    return sppm.CostModel(c1=float(cfg.get("cost.c1", 1.0)),
                          c2=float(cfg.get("cost.c2", 0.0)))


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def _run_one(cfg: ExperimentConfig, p: Problem, seed: int) -> Trace:
    algorithm = cfg.algorithm
    rounds = int(cfg.get("experiment.rounds", required=True))
    if algorithm in ("efbv", "ef21", "diana"):
        ensemble = build_ensemble(cfg, p)
        reg = _build_reg(cfg)
        params = cfg.get("efbv.params", "auto")
        if params == "auto":
            run_cfg = efbv.theory_config(
                p, ensemble, rounds, seed, mode=algorithm,
                regime=cfg.get("efbv.regime", "PL"), regularizer=reg,
                l_convention=cfg.get("efbv.l_convention", "mean"))
        else:
            try:
                run_cfg = efbv.EfbvConfig(
                    ensemble=ensemble,
                    lam=float(cfg.get("efbv.lambda", required=True)),
                    nu=float(cfg.get("efbv.nu", required=True)),
                    gamma=float(cfg.get("efbv.gamma", required=True)),
                    rounds=rounds, seed=seed, regularizer=reg, mode="custom")
            except ValueError as exc:
                raise ConfigError("efbv", str(exc)) from exc
        refs = _efbv_refs(cfg, p, reg)
        return efbv.run(p, run_cfg, refs)
    if algorithm in ("scafflix", "iscaffnew", "flix_gd"):
        return _run_scafflix_family(cfg, p, seed, algorithm, rounds)
    return _run_sppm_family(cfg, p, seed, algorithm, rounds)


def _build_reg(cfg: ExperimentConfig) -> Regularizer:
    kind = cfg.get("regularizer.kind", "zero")
    try:
        return Regularizer(kind=kind, strength=float(cfg.get("regularizer.strength", 0.0)))
    except ValueError as exc:
        raise ConfigError("regularizer", str(exc)) from exc


def _efbv_refs(cfg: ExperimentConfig, p: Problem, reg: Regularizer):
    if p.kind == "nonconvex_logistic":
        return efbv.References()
    x_star = reference_solution(p, reg, tol=float(cfg.get("experiment.ref_tol", 1e-12)))
    from .problems import reg_value

    return efbv.References(x_star=x_star,
                           f_star=p.full_loss(x_star) + reg_value(reg, x_star),
                           mu_pl=p.constants().mu_pl)


def _scafflix_gammas(cfg: ExperimentConfig, p: Problem) -> np.ndarray:
    mode = cfg.get("scafflix.gamma_mode", "inv_l")
    if mode == "inv_l":
        return 1.0 / p.constants().l_i
    if mode == "uniform":
        return np.full(p.n, float(cfg.get("scafflix.gamma", required=True)))
    raise ConfigError("scafflix.gamma_mode", f"unknown mode {mode!r}")


def _run_scafflix_family(cfg: ExperimentConfig, p: Problem, seed: int,
                         algorithm: str, rounds: int) -> Trace:
    alpha_raw = cfg.get("scafflix.alpha", 1.0 if algorithm == "iscaffnew" else 0.5)
    alpha = np.full(p.n, float(alpha_raw)) if np.isscalar(alpha_raw) \
        else np.asarray(alpha_raw, dtype=float)
    if algorithm == "iscaffnew":
        alpha = np.ones(p.n)
    eps_loc = float(cfg.get("scafflix.eps_loc", 1e-6))
    inst = scafflix.build_flix(p, alpha, eps_loc)
    x_star, f_star = scafflix.flix_reference(inst)
    targets = scafflix.flix_targets(inst, x_star)
    if algorithm == "flix_gd":
        gamma = float(cfg.get("scafflix.gd_gamma", 1.0 / p.constants().l_max))
        return scafflix.run_flix_gd(inst, gamma, rounds, f_star=f_star, x_star=x_star)
    run_cfg = scafflix.ScafflixConfig(
        gamma_i=_scafflix_gammas(cfg, p),
        p=float(cfg.get("scafflix.p", 0.2)),
        rounds=rounds, seed=seed,
        grad_mode=cfg.get("scafflix.grad_mode", "exact"))
    return scafflix.run_scafflix(inst, run_cfg, targets=targets, f_star=f_star)


def _run_sppm_family(cfg: ExperimentConfig, p: Problem, seed: int,
                     algorithm: str, rounds: int) -> Trace:
    scheme = build_scheme(cfg, p)
    cost = _build_cost(cfg)
    x_star = reference_solution(p, tol=float(cfg.get("experiment.ref_tol", 1e-12)))
    target = cfg.get("experiment.target_dist_sq")
    gamma = float(cfg.get("sppm.gamma", 1.0))
    if algorithm == "sppm_as":
        solver = sppm.ProxSolverSpec(
            kind=cfg.get("sppm.solver", "closed_form_quadratic"
                         if p.kind == "quadratic" else "conjugate_gradient"),
            rounds=int(cfg.get("sppm.K", 1)),
            inner_tol=float(cfg.get("sppm.inner_tol", 0.0)))
        return sppm.run_sppm_as(p, scheme, gamma, rounds, solver, cost, seed,
                                x_star=x_star, target_dist_sq=target)
    if algorithm in ("localgd", "mbgd"):
        local_steps = 1 if algorithm == "mbgd" else int(cfg.get("sppm.local_steps", 5))
        stepsize = float(cfg.get("sppm.stepsize", 1.0 / p.constants().l_max))
        return sppm.run_localgd(p, scheme, stepsize, local_steps, rounds, cost,
                                seed, x_star=x_star, target_dist_sq=target)
    k_inner = int(cfg.get("sppm.k_inner", 1))
    if algorithm == "fedprox_sppm":
        return sppm.run_fedprox_sppm(p, scheme, gamma, k_inner, rounds, seed,
                                     x_star=x_star)
    return sppm.run_fedavg_sppm(p, scheme, gamma,
                                float(cfg.get("sppm.alpha_loc", 1.0)),
                                k_inner, rounds, seed, x_star=x_star)


def run_experiment(cfg: ExperimentConfig) -> list[str]:
    """Run every seed and persist one trace file per seed.

    Byte-identical re-runs for an identical config: file names embed the
    config hash and all float formatting is canonical.
    """
    p = build_problem(cfg)
    out_dir = cfg.get("experiment.output", "traces")
    os.makedirs(out_dir, exist_ok=True)
    digest = cfg.config_hash()[:12]
    paths = []
    for seed in cfg.seeds:
        trace = _run_one(cfg, p, int(seed))
        trace.meta.update({
            "config_hash": cfg.config_hash(),
            "seed": int(seed),
            "version": __version__,
            "algorithm": cfg.algorithm,
        })
        path = os.path.join(out_dir, f"{cfg.algorithm}_{digest}_seed{seed}.csv")
        write_trace(trace, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    point: dict
    n_seeds: int
    rounds_to_target_mean: float
    rounds_to_target_se: float
    cost_mean: float
    cost_se: float
    final_metric_mean: float
    final_metric_se: float


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return math.nan, math.nan
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


def _trace_summary(cfg: ExperimentConfig, trace: Trace) -> tuple[float, float, float]:
    """(rounds to target, cost at end, final metric) for one run."""
    target_gap = cfg.get("experiment.target_gap")
    target_dist = cfg.get("experiment.target_dist_sq")
    if target_gap is not None:
        row = trace.first_round_at("f_gap", float(target_gap))
        rounds = math.nan if row is None else (
            row.comm_rounds if cfg.algorithm in ("scafflix", "iscaffnew", "flix_gd")
            else row.round)
        final = trace.final.f_gap
    elif target_dist is not None:
        row = trace.first_round_at("dist_sq", float(target_dist))
        rounds = math.nan if row is None else row.round
        final = trace.final.dist_sq
    else:
        rounds = math.nan
        final = trace.final.f_gap if not math.isnan(trace.final.f_gap) \
            else trace.final.dist_sq
    return float(rounds), trace.final.cost_cum, final


def sweep(cfg: ExperimentConfig, param_grid: dict[str, list]) -> list[SweepRow]:
    """Cartesian sweep over dotted config paths; one row per grid point."""
    if not param_grid or any(len(v) == 0 for v in param_grid.values()):
        raise ConfigError("sweep", "parameter grid must be nonempty")
    names = sorted(param_grid)
    rows = []
    for combo in itertools.product(*(param_grid[k] for k in names)):
        point = dict(zip(names, combo))
        sub = cfg
        for path, value in point.items():
            sub = sub.override(path, value)
        p = build_problem(sub)
        rounds_list, cost_list, final_list = [], [], []
        for seed in sub.seeds:
            try:
                trace = _run_one(sub, p, int(seed))
            except Exception as exc:
                raise RuntimeError(f"sweep point {point} seed {seed}: {exc}") from exc
            r, c, f = _trace_summary(sub, trace)
            rounds_list.append(r)
            cost_list.append(c)
            final_list.append(f)
        r_m, r_se = _mean_se(rounds_list)
        c_m, c_se = _mean_se(cost_list)
        f_m, f_se = _mean_se(final_list)
        rows.append(SweepRow(point, len(sub.seeds), r_m, r_se, c_m, c_se, f_m, f_se))
    return rows


def sweep_table(rows: list[SweepRow]) -> str:
    header = ["point", "seeds", "rounds_to_target", "total_cost", "final_metric"]
    lines = ["\t".join(header)]
    for row in rows:
        point = ",".join(f"{k}={v}" for k, v in row.point.items())
        lines.append("\t".join([
            point, str(row.n_seeds),
            f"{row.rounds_to_target_mean:.6g} +- {row.rounds_to_target_se:.2g}",
            f"{row.cost_mean:.6g} +- {row.cost_se:.2g}",
            f"{row.final_metric_mean:.6g} +- {row.final_metric_se:.2g}",
        ]))
    return "\n".join(lines)
