"""Error-feedback with bias/variance scalings, plus its two classic modes.

One loop covers the whole family: each client compresses the difference
between its gradient and a control variate, the server forms the
gradient estimate g = (1/n) sum_i (h_i + nu * d_i) and takes a proximal
step.  nu = lambda recovers classic error feedback with pre-scaled
compressors; nu = 1 recovers the unbiased-compressor method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import compressors
from .problems import DivergenceError, Problem, Regularizer, ZERO_REG, prox_reg, reg_value
from .trace import Trace

REGIMES = ("PL", "KL", "nonconvex")
MODES = ("efbv", "ef21", "diana", "custom")

DIVERGENCE_GUARD = 1e12


class RateInvalidError(ValueError):
    pass


@dataclass(frozen=True)
class DerivedParams:
    """Contraction constants derived from the compressor certificates."""

    r: float
    r_av: float
    s_star: float
    theta_star: float
    s_ncvx: float
    theta_ncvx: float


def derived_params(eta: float, omega: float, omega_ran: float,
                   lam: float, nu: float) -> DerivedParams:
    """Closed-form r, r_av, s*, theta* (and their nonconvex variants).

    r must come out below 1 for the linear-rate theory to apply; the
    no-compression limit r = 0 reports infinite s*.
    """
    if not 0.0 < lam <= 1.0 or not 0.0 < nu <= 1.0:
        raise ValueError("lam and nu must lie in (0, 1]")
    r = (1.0 - lam + lam * eta) ** 2 + lam**2 * omega
    r_av = (1.0 - nu + nu * eta) ** 2 + nu**2 * omega_ran
    if r >= 1.0:
        raise RateInvalidError(f"r = {r:.6g} >= 1 for lam = {lam}; scale down lam")
    if r == 0.0:
        inf = float("inf")
        return DerivedParams(0.0, r_av, inf, inf, inf, inf)
    s_star = math.sqrt((1.0 + r) / (2.0 * r)) - 1.0
    s_ncvx = 1.0 / math.sqrt(r) - 1.0
    if r_av == 0.0:
        theta_star = theta_ncvx = float("inf")
    else:
        theta_star = s_star * (1.0 + s_star) * r / r_av
        theta_ncvx = s_ncvx * (1.0 + s_ncvx) * r / r_av
    return DerivedParams(r, r_av, s_star, theta_star, s_ncvx, theta_ncvx)


def stepsize_bound(big_l: float, l_tilde: float, dp: DerivedParams,
                   regime: str = "PL") -> float:
    """Largest stepsize admitted by the convergence theorems."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    lead = 2.0 * big_l if regime == "KL" else big_l
    if dp.r == 0.0:
        return 1.0 / lead  # reverts to (proximal) gradient descent
    s = dp.s_ncvx if regime == "nonconvex" else dp.s_star
    return 1.0 / (lead + l_tilde * math.sqrt(dp.r_av / dp.r) / s)


@dataclass
class EfbvConfig:
    ensemble: compressors.EnsembleSpec
    lam: float
    nu: float
    gamma: float
    rounds: int
    seed: int
    regularizer: Regularizer = ZERO_REG
    mode: str = "custom"
    x0: Optional[np.ndarray] = None
    h0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "ef21" and self.nu != self.lam:
            raise ValueError("ef21 mode requires nu == lam")
        if self.mode == "diana" and self.nu != 1.0:
            raise ValueError("diana mode requires nu == 1")
        if self.gamma <= 0 or self.rounds < 1:
            raise ValueError("gamma must be positive and rounds >= 1")


def theory_config(p: Problem, ensemble: compressors.EnsembleSpec, rounds: int,
                  seed: int, mode: str = "efbv", regime: str = "PL",
                  regularizer: Regularizer = ZERO_REG,
                  l_convention: str = "mean") -> EfbvConfig:
    """Config with the defaults the theory recommends; nothing left to tune.

    ``l_convention`` selects which aggregate smoothness constant feeds
    the stepsize formula: "mean" for sqrt((1/n) sum L_i^2), "sum" for
    sqrt(sum L_i^2).
    """
    eta, omega = ensemble.certified
    w_ran = compressors.omega_ran(ensemble)
    lam = compressors.optimal_scaling(eta, omega)
    if mode == "efbv":
        nu = compressors.optimal_scaling(eta, w_ran)
    elif mode == "ef21":
        nu, w_ran = lam, omega  # no knowledge of the averaged variance
    elif mode == "diana":
        nu = 1.0
    else:
        raise ValueError("theory_config covers efbv/ef21/diana")
    dp = derived_params(eta, omega, w_ran, lam, nu)
    consts = p.constants()
    l_tilde = consts.l_tilde if l_convention == "mean" else consts.l_tilde_sum
    gamma = stepsize_bound(l_tilde, l_tilde, dp, regime)
    return EfbvConfig(ensemble, lam, nu, gamma, rounds, seed,
                      regularizer=regularizer, mode=mode)


@dataclass
class EfbvState:
    x: np.ndarray
    h: np.ndarray          # (n, d) control variates
    h_bar: np.ndarray      # incrementally maintained average of h
    round: int
    scalars_sent: float

    def h_bar_drift(self) -> float:
        return float(np.max(np.abs(self.h_bar - self.h.mean(axis=0))))


@dataclass(frozen=True)
class References:
    """Ground truth used only for trace metrics, never for the dynamics."""

    x_star: Optional[np.ndarray] = None
    f_star: Optional[float] = None
    mu_pl: Optional[float] = None


def lyapunov(p: Problem, x: np.ndarray, h: np.ndarray, gamma: float,
             theta: float, f_star: float, reg: Regularizer = ZERO_REG) -> float:
    """Objective gap plus the control-variate mismatch term."""
    gaps = p.grad_all(x) - h
    mismatch = float(np.mean(np.sum(gaps**2, axis=1)))
    gap = p.full_loss(x) + reg_value(reg, x) - f_star
    if math.isinf(theta):
        return gap
    return gap + gamma / (2.0 * theta) * mismatch


def run(p: Problem, cfg: EfbvConfig, refs: Optional[References] = None,
        return_state: bool = False, probe=None,
        target_gap: Optional[float] = None):
    """Run the compressed error-feedback loop for ``cfg.rounds`` rounds.

    Row t of the trace describes the iterate x^t before the round-t
    update; scalars_sent counts transmission through round t-1.
    ``probe(t, x)`` is called on every iterate for instrumentation only.
    With ``target_gap`` the loop stops once the recorded objective gap
    reaches the target (requires references).  Deterministic per seed.
    """
    n, d = p.n, p.dim
    if cfg.ensemble.n != n:
        raise ValueError(f"ensemble size {cfg.ensemble.n} != client count {n}")
    eta, omega = cfg.ensemble.certified
    w_ran = compressors.omega_ran(cfg.ensemble)
    dp = derived_params(eta, omega, w_ran, cfg.lam, cfg.nu)

    x = np.zeros(d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float).copy()
    h = p.grad_all(x) if cfg.h0 is None else np.asarray(cfg.h0, dtype=float).copy()
    h_bar = h.mean(axis=0)
    scalars = 0.0

    refs = refs or References()
    if target_gap is not None and refs.f_star is None:
        raise ValueError("target_gap needs a reference objective value")
    trace = Trace(meta={"algorithm": cfg.mode, "seed": cfg.seed})

    def record(t: int, grads: np.ndarray) -> float:
        f_gap = math.nan
        lyap = math.nan
        dist = math.nan
        if refs.f_star is not None:
            f_gap = p.full_loss(x) + reg_value(cfg.regularizer, x) - refs.f_star
            lyap = f_gap
            if not math.isinf(dp.theta_star):
                mismatch = float(np.mean(np.sum((grads - h) ** 2, axis=1)))
                lyap = f_gap + cfg.gamma / (2.0 * dp.theta_star) * mismatch
            if f_gap > DIVERGENCE_GUARD or not math.isfinite(f_gap):
                raise DivergenceError(f"objective gap blew up at round {t}")
        if refs.x_star is not None:
            dist = float(np.sum((x - refs.x_star) ** 2))
        trace.add(round=t, f_gap=f_gap, dist_sq=dist, lyapunov=lyap,
                  scalars_sent=scalars)
        return f_gap

    for t in range(cfg.rounds):
        grads = p.grad_all(x)
        gap = record(t, grads)
        if target_gap is not None and gap <= target_gap:
            if return_state:
                return trace, EfbvState(x=x, h=h, h_bar=h_bar, round=t,
                                        scalars_sent=scalars)
            return trace
        if probe is not None:
            probe(t, x)
        diffs, sent = compressors.apply_ensemble(cfg.ensemble, grads - h, cfg.seed, t)
        g = (h + cfg.nu * diffs).mean(axis=0)
        h = h + cfg.lam * diffs
        h_bar = h_bar + (cfg.lam * diffs).mean(axis=0)
        scalars += sent
        x = prox_reg(cfg.regularizer, cfg.gamma, x - cfg.gamma * g)
        if not np.isfinite(x).all():
            raise DivergenceError(f"iterate not finite at round {t}")
    record(cfg.rounds, p.grad_all(x))

    if return_state:
        return trace, EfbvState(x=x, h=h, h_bar=h_bar, round=cfg.rounds,
                                scalars_sent=scalars)
    return trace


def scalars_to_gap(trace: Trace, eps: float) -> Optional[float]:
    """Transmitted scalars at the first recorded gap <= eps."""
    row = trace.first_round_at("f_gap", eps)
    return None if row is None else row.scalars_sent
