"""Personalized local training on the mixture objective.

Each client i optimizes f_i evaluated at the mixture
alpha_i * x + (1 - alpha_i) * x_i_star of the global model with its own
local minimizer.  Communication happens with probability p per round
(one shared coin); between communications clients take local steps
corrected by control variates.  alpha == 1 everywhere recovers the
non-personalized individual-stepsize algorithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rngmod
from .problems import DivergenceError, Problem, local_minimizer, minimize_gd
from .trace import Trace

DIVERGENCE_GUARD = 1e12
GRAD_MODES = ("exact", "single_sample")


@dataclass(frozen=True)
class FlixInstance:
    """A base problem with personalization factors and local minimizers."""

    base: Problem
    alpha: np.ndarray          # (n,) in [0, 1]
    x_loc: np.ndarray          # (n, d); row i meaningful only when alpha_i < 1
    eps_loc: float

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def dim(self) -> int:
        return self.base.dim


def build_flix(p: Problem, alpha, eps_loc: float = 1e-6) -> FlixInstance:
    """Compute local minimizers where alpha_i < 1 (skipped when alpha_i = 1)."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (p.n,):
        raise ValueError(f"alpha has shape {alpha.shape}, expected ({p.n},)")
    if ((alpha < 0) | (alpha > 1)).any():
        raise ValueError("personalization factors must lie in [0, 1]")
    x_loc = np.zeros((p.n, p.dim))
    for i in range(p.n):
        if alpha[i] < 1.0:
            x_loc[i], _ = local_minimizer(p, i, eps_loc)
    return FlixInstance(base=p, alpha=alpha, x_loc=x_loc, eps_loc=eps_loc)


def mixture_rows(inst: FlixInstance, xs: np.ndarray) -> np.ndarray:
    """Row-wise personalized points alpha_i * x_i + (1 - alpha_i) * x_loc_i.

    Rows with alpha_i == 1 pass through untouched, so no local minimizer
    is ever needed for them.
    """
    out = np.empty_like(xs)
    for i in range(inst.n):
        a = inst.alpha[i]
        out[i] = xs[i] if a == 1.0 else a * xs[i] + (1.0 - a) * inst.x_loc[i]
    return out


def mixture_point(inst: FlixInstance, x: np.ndarray) -> np.ndarray:
    """Personalized points of a single shared model x; shape (n, d)."""
    return mixture_rows(inst, np.broadcast_to(x, (inst.n, len(x))).copy())


def flix_eval(inst: FlixInstance, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mixture-objective value at x and the per-client personalized points."""
    tildes = mixture_point(inst, x)
    value = float(np.mean(inst.base.loss_rows(tildes)))
    return value, tildes


def flix_grad(inst: FlixInstance, x: np.ndarray) -> np.ndarray:
    tildes = mixture_point(inst, x)
    grads = inst.base.grad_rows(tildes)
    return (inst.alpha[:, None] * grads).mean(axis=0)


def flix_reference(inst: FlixInstance, tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Minimizer and optimal value of the mixture objective."""
    if float((inst.alpha**2).sum()) == 0.0:
        raise ValueError("objective is constant when all alpha_i are zero")
    if inst.base.kind == "quadratic":
        w = inst.base.quad_mu * inst.alpha**2
        x_star = (w[:, None] * inst.base.quad_centers).sum(axis=0) / w.sum()
    else:
        lip = float(np.mean(inst.alpha**2 * inst.base.constants().l_i))
        x_star, _ = minimize_gd(lambda x: (flix_eval(inst, x)[0], flix_grad(inst, x)),
                                np.zeros(inst.dim), tol, lipschitz=lip)
    return x_star, flix_eval(inst, x_star)[0]


@dataclass(frozen=True)
class FlixTargets:
    """Optimal personalized points and their gradients, for Lyapunov tracking."""

    x_star: np.ndarray
    tilde_star: np.ndarray  # (n, d)
    grad_star: np.ndarray   # (n, d)


def flix_targets(inst: FlixInstance, x_star: np.ndarray) -> FlixTargets:
    tilde_star = mixture_point(inst, x_star)
    return FlixTargets(x_star=np.asarray(x_star, dtype=float),
                       tilde_star=tilde_star,
                       grad_star=inst.base.grad_rows(tilde_star))


@dataclass
class ScafflixState:
    """Per-client models and control variates after a run."""

    xs: np.ndarray        # (n, d) iterates
    hs: np.ndarray        # (n, d) control variates
    round: int
    comm_rounds: int


@dataclass
class ScafflixConfig:
    gamma_i: np.ndarray
    p: float
    rounds: int
    seed: int
    grad_mode: str = "exact"
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.gamma_i = np.asarray(self.gamma_i, dtype=float)
        if (self.gamma_i <= 0).any():
            raise ValueError("all local stepsizes must be positive")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("communication probability must lie in (0, 1]")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


def server_stepsize(alpha: np.ndarray, gamma_i: np.ndarray) -> float:
    """gamma = ((1/n) sum alpha_i^2 / gamma_i)^(-1)."""
    return 1.0 / float(np.mean(alpha**2 / gamma_i))


def lyapunov(inst: FlixInstance, xs: np.ndarray, hs: np.ndarray,
             gamma_i: np.ndarray, p: float, targets: FlixTargets) -> float:
    """Personalized-iterate error plus control-variate error, theorem-weighted."""
    gmin = float(gamma_i.min())
    tildes = mixture_rows(inst, xs)
    iterate = float(np.mean((gmin / gamma_i) * np.sum((tildes - targets.tilde_star) ** 2, axis=1)))
    control = float(np.mean(gamma_i * np.sum((hs - targets.grad_star) ** 2, axis=1)))
    return iterate + (gmin / p**2) * control


def run_scafflix(inst: FlixInstance, cfg: ScafflixConfig,
                 targets: Optional[FlixTargets] = None,
                 f_star: Optional[float] = None,
                 h0: Optional[np.ndarray] = None,
                 return_state: bool = False):
    """Run the personalized local-training loop.

    Row t of the trace describes the state before round t; the
    objective gap is recorded whenever all clients hold the same model
    (at t = 0 and right after each communication).  Deterministic per
    seed.
    """
    p = inst.base
    n, d = inst.n, inst.dim
    if cfg.gamma_i.shape != (n,):
        raise ValueError(f"gamma_i has shape {cfg.gamma_i.shape}, expected ({n},)")
    if (inst.alpha == 0).any():
        finite = np.isfinite(cfg.gamma_i[inst.alpha == 0])
        if finite.any():
            raise ValueError("alpha_i = 0 with a finite stepsize divides by zero")
    if cfg.grad_mode == "single_sample" and p.kind == "quadratic":
        raise ValueError("single_sample gradients need a finite-sum client objective")
    if h0 is not None:
        h0 = np.asarray(h0, dtype=float)
        weighted = (inst.alpha[:, None] * h0).sum(axis=0)
        if float(np.abs(weighted).max()) > 1e-9:
            raise ValueError("initial control variates must have zero alpha-weighted sum")

    coef_w = inst.alpha**2 / cfg.gamma_i
    gamma_srv = 1.0 / float(np.mean(coef_w))
    coef_local = cfg.gamma_i / inst.alpha
    coef_h = (cfg.p * inst.alpha) / cfg.gamma_i

    x0 = np.zeros(d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    xs = np.tile(x0, (n, 1))
    hs = np.zeros((n, d)) if h0 is None else h0.copy()
    coins = rngmod.stream(cfg.seed, rngmod.COIN).random(cfg.rounds) < cfg.p

    trace = Trace(meta={"algorithm": "scafflix", "seed": cfg.seed,
                        "alpha_summary": float(np.mean(inst.alpha))})
    comm = 0
    shared = True

    def record(t: int) -> None:
        f_gap = math.nan
        lyap = math.nan
        dist = math.nan
        if shared and f_star is not None:
            f_gap = flix_eval(inst, xs[0])[0] - f_star
            if f_gap > DIVERGENCE_GUARD or not math.isfinite(f_gap):
                raise DivergenceError(f"objective gap blew up at round {t}")
        if targets is not None:
            lyap = lyapunov(inst, xs, hs, cfg.gamma_i, cfg.p, targets)
            tildes = mixture_rows(inst, xs)
            dist = float(np.mean(np.sum((tildes - targets.tilde_star) ** 2, axis=1)))
        trace.add(round=t, f_gap=f_gap, dist_sq=dist, lyapunov=lyap,
                  comm_rounds=comm)

    for t in range(cfg.rounds):
        record(t)
        tildes = mixture_rows(inst, xs)
        if cfg.grad_mode == "exact":
            grads = p.grad_rows(tildes)
        else:
            grads = np.stack([
                p.sample_grad(
                    i,
                    int(rngmod.stream(cfg.seed, rngmod.SAMPLE, i, t)
                        .integers(p.client_size(i))),
                    tildes[i])
                for i in range(n)
            ])
        xhat = xs - coef_local[:, None] * (grads - hs)
        if coins[t]:
            xbar = gamma_srv * np.mean(coef_w[:, None] * xhat, axis=0)
            xs = np.tile(xbar, (n, 1))
            hs = hs + coef_h[:, None] * (xbar - xhat)
            comm += 1
            shared = True
        else:
            xs = xhat
            shared = False
        if not np.isfinite(xs).all():
            raise DivergenceError(f"iterate not finite at round {t}")
    record(cfg.rounds)

    if return_state:
        return trace, ScafflixState(xs=xs, hs=hs, round=cfg.rounds,
                                    comm_rounds=comm)
    return trace


def run_iscaffnew(p: Problem, gamma_i, p_comm: float, rounds: int, seed: int,
                  x0: Optional[np.ndarray] = None,
                  targets: Optional[FlixTargets] = None,
                  f_star: Optional[float] = None,
                  return_state: bool = False):
    """The alpha == 1 case: no personalization, no local solves."""
    inst = FlixInstance(base=p, alpha=np.ones(p.n),
                        x_loc=np.zeros((p.n, p.dim)), eps_loc=0.0)
    cfg = ScafflixConfig(gamma_i=np.asarray(gamma_i, dtype=float), p=p_comm,
                         rounds=rounds, seed=seed, x0=x0)
    return run_scafflix(inst, cfg, targets=targets, f_star=f_star,
                        return_state=return_state)


def run_flix_gd(inst: FlixInstance, gamma: float, rounds: int,
                f_star: Optional[float] = None,
                x_star: Optional[np.ndarray] = None,
                x0: Optional[np.ndarray] = None) -> Trace:
    """Vanilla distributed gradient descent on the mixture objective.

    Every round is a communication round.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.zeros(inst.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    trace = Trace(meta={"algorithm": "flix_gd"})
    for t in range(rounds + 1):
        f_gap = math.nan if f_star is None else flix_eval(inst, x)[0] - f_star
        dist = math.nan if x_star is None else float(np.sum((x - x_star) ** 2))
        if f_star is not None and (not math.isfinite(f_gap) or f_gap > DIVERGENCE_GUARD):
            raise DivergenceError(f"objective gap blew up at round {t}")
        trace.add(round=t, f_gap=f_gap, dist_sq=dist, comm_rounds=t)
        if t < rounds:
            x = x - gamma * flix_grad(inst, x)
    return trace


def comm_rounds_to_gap(trace: Trace, eps: float) -> Optional[int]:
    """Communication rounds used when the recorded gap first reaches eps."""
    row = trace.first_round_at("f_gap", eps)
    return None if row is None else row.comm_rounds
