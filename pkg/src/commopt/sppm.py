"""Stochastic proximal point with arbitrary cohort sampling.

A sampling scheme selects a cohort of clients each global round; the
iterate moves to the proximal point of the reweighted cohort objective.
Exact enumeration of every scheme's contraction constant and
optimum-gradient variance is provided alongside the closed forms, plus
approximate prox solvers, theory-bound evaluators, averaging-style
variants, local-GD baselines, and hierarchical communication-cost
accounting.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import datasets, rng as rngmod
from .problems import DivergenceError, Problem, minimize_gd
from .trace import Trace

SCHEME_KINDS = ("full", "nonuniform", "nice", "block", "stratified")
SOLVER_KINDS = ("closed_form_quadratic", "gradient_descent",
                "conjugate_gradient", "quasi_newton")

ENUM_MAX_N = 20
BRUTE_FORCE_MAX_N = 10
ENUM_CAP = 500_000
DIVERGENCE_GUARD = 1e12


class EnumerationGuardError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sampling schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingScheme:
    """A proper, nonvacuous distribution over cohorts of [n]."""

    kind: str
    n: int
    tau: int = 0
    probs: tuple[float, ...] = ()           # nonuniform: selection probability of {i}
    blocks: tuple[tuple[int, ...], ...] = ()  # block / stratified partition
    q: tuple[float, ...] = ()               # block selection probabilities

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kind == "nice" and not 1 <= self.tau <= self.n:
            raise ValueError(f"tau={self.tau} out of range for n={self.n}")
        if self.kind == "nonuniform":
            probs = np.asarray(self.probs)
            if len(probs) != self.n or (probs <= 0).any():
                raise ValueError("nonuniform sampling must be proper (all p_i > 0)")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError("singleton probabilities must sum to 1")
        if self.kind in ("block", "stratified"):
            flat = [i for blk in self.blocks for i in blk]
            if sorted(flat) != list(range(self.n)) or any(len(b) == 0 for b in self.blocks):
                raise ValueError("blocks must partition [n] into nonempty parts")
        if self.kind == "block":
            q = np.asarray(self.q)
            if len(q) != len(self.blocks) or (q <= 0).any():
                raise ValueError("block sampling must be proper (all q_j > 0)")
            if abs(q.sum() - 1.0) > 1e-12:
                raise ValueError("block probabilities must sum to 1")

    def inclusion_probs(self) -> np.ndarray:
        """p_i = Prob(i in cohort)."""
        if self.kind == "full":
            return np.ones(self.n)
        if self.kind == "nonuniform":
            return np.asarray(self.probs)
        if self.kind == "nice":
            return np.full(self.n, self.tau / self.n)
        p = np.empty(self.n)
        for j, blk in enumerate(self.blocks):
            p[list(blk)] = self.q[j] if self.kind == "block" else 1.0 / len(blk)
        return p

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        if self.kind == "full":
            return tuple(range(self.n))
        if self.kind == "nonuniform":
            return (int(rng.choice(self.n, p=np.asarray(self.probs))),)
        if self.kind == "nice":
            return tuple(sorted(rng.choice(self.n, self.tau, replace=False).tolist()))
        if self.kind == "block":
            j = int(rng.choice(len(self.blocks), p=np.asarray(self.q)))
            return tuple(sorted(self.blocks[j]))
        picks = [int(blk[rng.integers(len(blk))]) for blk in self.blocks]
        return tuple(sorted(picks))


def full(n: int) -> SamplingScheme:
    return SamplingScheme("full", n)


def nonuniform(probs: Sequence[float]) -> SamplingScheme:
    return SamplingScheme("nonuniform", len(probs), probs=tuple(float(p) for p in probs))


def nice(n: int, tau: int) -> SamplingScheme:
    return SamplingScheme("nice", n, tau=tau)


def block(blocks: Iterable[Iterable[int]], q: Optional[Sequence[float]] = None) -> SamplingScheme:
    blocks = tuple(tuple(int(i) for i in blk) for blk in blocks)
    n = sum(len(b) for b in blocks)
    if q is None:
        q = [len(b) / n for b in blocks]  # size-proportional default
    return SamplingScheme("block", n, blocks=blocks, q=tuple(float(v) for v in q))


def stratified(blocks: Iterable[Iterable[int]]) -> SamplingScheme:
    blocks = tuple(tuple(int(i) for i in blk) for blk in blocks)
    n = sum(len(b) for b in blocks)
    return SamplingScheme("stratified", n, blocks=blocks)


def cohorts_with_probs(scheme: SamplingScheme) -> list[tuple[tuple[int, ...], float]]:
    """Every supported cohort with its probability (exact enumeration)."""
    if scheme.kind == "full":
        return [(tuple(range(scheme.n)), 1.0)]
    if scheme.kind == "nonuniform":
        return [((i,), float(p)) for i, p in enumerate(scheme.probs)]
    if scheme.kind == "nice":
        if scheme.n > ENUM_MAX_N:
            raise EnumerationGuardError(f"n={scheme.n} exceeds enumeration guard {ENUM_MAX_N}")
        count = math.comb(scheme.n, scheme.tau)
        if count > ENUM_CAP:
            raise EnumerationGuardError(f"{count} cohorts exceed the enumeration cap")
        return [(c, 1.0 / count)
                for c in itertools.combinations(range(scheme.n), scheme.tau)]
    if scheme.kind == "block":
        return [(tuple(sorted(blk)), float(qj))
                for blk, qj in zip(scheme.blocks, scheme.q)]
    count = math.prod(len(b) for b in scheme.blocks)
    if count > ENUM_CAP:
        raise EnumerationGuardError(f"{count} cohorts exceed the enumeration cap")
    prob = 1.0 / count
    out = []
    for picks in itertools.product(*scheme.blocks):
        out.append((tuple(sorted(picks)), prob))
    return out


def sample_cohort(scheme: SamplingScheme,
                  rng: np.random.Generator) -> tuple[tuple[int, ...], np.ndarray]:
    """Draw a cohort and the debiasing weights 1 / (n p_i) of its members."""
    cohort = scheme.sample(rng)
    p = scheme.inclusion_probs()
    weights = 1.0 / (scheme.n * p[list(cohort)])
    return cohort, weights


# ---------------------------------------------------------------------------
# cohort objectives
# ---------------------------------------------------------------------------

class CohortObjective:
    """f_C(x) = sum_{i in C} w_i f_i(x) with w_i = 1 / (n p_i)."""

    def __init__(self, p: Problem, cohort: Sequence[int], weights: Sequence[float]):
        if len(cohort) == 0:
            raise ValueError("empty cohort")
        weights = np.asarray(weights, dtype=float)
        if (weights <= 0).any() or len(weights) != len(cohort):
            raise ValueError("weights must be positive, one per member")
        self.p = p
        self.cohort = tuple(int(i) for i in cohort)
        self.weights = weights
        consts = p.constants()
        self.mu_c = float(np.sum(weights * consts.mu_i[list(self.cohort)]))
        self.l_c = float(np.sum(weights * consts.l_i[list(self.cohort)]))

    def value(self, x: np.ndarray) -> float:
        return float(sum(w * self.p.loss(i, x) for i, w in zip(self.cohort, self.weights)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.p.dim)
        for i, w in zip(self.cohort, self.weights):
            out += w * self.p.grad(i, x)
        return out

    @property
    def is_quadratic(self) -> bool:
        return self.p.kind == "quadratic"

    def quad_terms(self) -> tuple[float, np.ndarray]:
        """(sum w_i mu_i, sum w_i mu_i c_i) for closed-form prox steps."""
        idx = list(self.cohort)
        wm = self.weights * self.p.quad_mu[idx]
        return float(wm.sum()), (wm[:, None] * self.p.quad_centers[idx]).sum(axis=0)

    def argmin(self) -> np.ndarray:
        if not self.is_quadratic:
            raise ValueError("closed-form argmin needs quadratic clients")
        m, c = self.quad_terms()
        return c / m


def cohort_objective(p: Problem, cohort: Sequence[int],
                     weights: Sequence[float]) -> CohortObjective:
    return CohortObjective(p, cohort, weights)


def cohort_for(p: Problem, scheme: SamplingScheme, cohort: Sequence[int]) -> CohortObjective:
    probs = scheme.inclusion_probs()
    weights = 1.0 / (scheme.n * probs[list(cohort)])
    return CohortObjective(p, cohort, weights)


# ---------------------------------------------------------------------------
# scheme statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingStats:
    mu_as: float
    sigma_star_sq: float
    per_cluster_sigma_sq: tuple[float, ...]
    method_tag: str


def mu_as(scheme: SamplingScheme, mu_i: Sequence[float],
          method: str = "closed_form") -> float:
    """Worst-cohort strong convexity min_C sum_{i in C} mu_i / (n p_i)."""
    mu_i = np.asarray(mu_i, dtype=float)
    if len(mu_i) != scheme.n:
        raise ValueError("mu_i length must match the scheme")
    if method == "enumeration":
        p = scheme.inclusion_probs()
        return min(
            float(np.sum(mu_i[list(c)] / (scheme.n * p[list(c)])))
            for c, _ in cohorts_with_probs(scheme)
        )
    if scheme.kind == "full":
        return float(np.mean(mu_i))
    if scheme.kind == "nonuniform":
        return float(np.min(mu_i / (scheme.n * np.asarray(scheme.probs))))
    if scheme.kind == "nice":
        smallest = np.sort(mu_i)[: scheme.tau]
        return float(np.mean(smallest))
    if scheme.kind == "block":
        return min(
            float(mu_i[list(blk)].sum() / (scheme.n * qj))
            for blk, qj in zip(scheme.blocks, scheme.q)
        )
    return sum(float(mu_i[list(blk)].min()) * len(blk) / scheme.n
               for blk in scheme.blocks)


def sigma_star_as(scheme: SamplingScheme, grads_at_opt: np.ndarray,
                  method: str = "enumeration") -> float:
    """Optimum-gradient variance sum_C p_C ||grad f_C(x*)||^2.

    ``grads_at_opt`` must be the client gradients at the optimum; their
    mean has to vanish.
    """
    g = np.asarray(grads_at_opt, dtype=float)
    if g.shape[0] != scheme.n:
        raise ValueError("need one gradient row per client")
    if float(np.linalg.norm(g.mean(axis=0))) > 1e-8:
        raise ValueError("gradients at the optimum must average to ~zero")
    if scheme.kind == "full":
        return 0.0
    if method == "closed_form" and scheme.kind == "nice":
        sigma1 = float(np.mean((g**2).sum(axis=1)))
        if scheme.n == 1:
            return 0.0
        return (scheme.n / scheme.tau - 1.0) / (scheme.n - 1.0) * sigma1
    if method == "closed_form" and scheme.kind == "nonuniform":
        p = np.asarray(scheme.probs)
        return float(np.mean((g**2).sum(axis=1) / (scheme.n * p)))
    p = scheme.inclusion_probs()
    total = 0.0
    for cohort, p_c in cohorts_with_probs(scheme):
        idx = list(cohort)
        gc = (g[idx] / (scheme.n * p[idx])[:, None]).sum(axis=0)
        total += p_c * float(gc @ gc)
    return total


def per_cluster_sigma_sq(scheme: SamplingScheme, grads_at_opt: np.ndarray) -> tuple[float, ...]:
    """Max squared distance of a gradient from its cluster mean, per cluster."""
    if scheme.kind not in ("block", "stratified"):
        return ()
    g = np.asarray(grads_at_opt, dtype=float)
    out = []
    for blk in scheme.blocks:
        rows = g[list(blk)]
        center = rows.mean(axis=0)
        out.append(float(np.max(((rows - center) ** 2).sum(axis=1))))
    return tuple(out)


def sampling_stats(scheme: SamplingScheme, mu_i: Sequence[float],
                   grads_at_opt: np.ndarray) -> SamplingStats:
    """Enumerated statistics, cross-checked against closed forms where known."""
    mu_enum = mu_as(scheme, mu_i, method="enumeration")
    mu_closed = mu_as(scheme, mu_i, method="closed_form")
    if abs(mu_enum - mu_closed) > 1e-12 * max(1.0, abs(mu_closed)):
        raise AssertionError("enumerated and closed-form mu_AS disagree")
    sigma = sigma_star_as(scheme, grads_at_opt, method="enumeration")
    if scheme.kind in ("nice", "nonuniform", "full"):
        closed = sigma_star_as(scheme, grads_at_opt, method="closed_form")
        if abs(sigma - closed) > 1e-12 * max(1.0, abs(closed)):
            raise AssertionError("enumerated and closed-form sigma disagree")
    return SamplingStats(mu_as=mu_enum, sigma_star_sq=sigma,
                         per_cluster_sigma_sq=per_cluster_sigma_sq(scheme, grads_at_opt),
                         method_tag="enumeration")


# ---------------------------------------------------------------------------
# theory bounds
# ---------------------------------------------------------------------------

def convergence_bound(gamma: float, mu: float, sigma_sq: float,
                      dist0_sq: float, t: int) -> tuple[float, float]:
    """Distance bound after t rounds and the asymptotic neighborhood."""
    if gamma <= 0 or mu <= 0 or sigma_sq < 0 or dist0_sq < 0:
        raise ValueError("inputs must be positive (sigma_sq, dist0_sq >= 0)")
    neighborhood = gamma * sigma_sq / (gamma * mu**2 + 2.0 * mu)
    value = (1.0 / (1.0 + gamma * mu)) ** (2 * t) * dist0_sq + neighborhood
    return value, neighborhood


def iteration_complexity(eps: float, mu: float, sigma_sq: float,
                         dist0_sq: float) -> tuple[float, float, bool]:
    """Recommended (gamma, T) for eps accuracy; flags the regime check.

    Outside the regime eps <= sigma^2 / mu^2 the formulas are still
    returned, with regime_ok False.
    """
    if eps <= 0 or mu <= 0 or sigma_sq <= 0 or dist0_sq <= 0:
        raise ValueError("inputs must be positive")
    regime_ok = eps <= sigma_sq / mu**2
    gamma = eps * mu / sigma_sq
    t_rec = (sigma_sq / (2.0 * eps * mu**2) + 0.5) * math.log(2.0 * dist0_sq / eps)
    return gamma, t_rec, regime_ok


def inexact_bound(gamma: float, mu: float, sigma_sq: float, b_inexact: float,
                  s: float, t: int, dist0_sq: float) -> float:
    """Distance bound when each prox is computed up to squared error b."""
    if b_inexact < 0:
        raise ValueError("b_inexact must be >= 0")
    limit = gamma**2 * mu**2 + 2.0 * gamma * mu
    if not 0.0 < s < limit:
        raise ValueError(f"s must lie in (0, {limit:.6g})")
    rate = (1.0 + s) / (1.0 + gamma * mu) ** 2
    tail = (1.0 + s) * (gamma**2 * sigma_sq + b_inexact * (1.0 + gamma * mu) ** 2 / s)
    return rate**t * dist0_sq + tail / (limit - s)


def fedprox_constants(scheme: SamplingScheme, mu_i: Sequence[float],
                      grads_at_opt: np.ndarray, gamma: float) -> tuple[float, float]:
    """(A_S, B_S): cohort-averaged contraction and noise of proximal averaging."""
    mu_i = np.asarray(mu_i, dtype=float)
    g = np.asarray(grads_at_opt, dtype=float)
    a_s = 0.0
    b_s = 0.0
    for cohort, p_c in cohorts_with_probs(scheme):
        idx = list(cohort)
        a_s += p_c * float(np.mean(1.0 / (1.0 + gamma * mu_i[idx])))
        b_s += p_c * float(np.mean(
            gamma / ((1.0 + gamma * mu_i[idx]) * mu_i[idx]) * (g[idx] ** 2).sum(axis=1)))
    return a_s, b_s


def fedprox_bound(scheme: SamplingScheme, mu_i: Sequence[float],
                  grads_at_opt: np.ndarray, gamma: float, dist0_sq: float,
                  t: int) -> float:
    a_s, b_s = fedprox_constants(scheme, mu_i, grads_at_opt, gamma)
    return a_s**t * dist0_sq + b_s / (1.0 - a_s)


# ---------------------------------------------------------------------------
# prox solvers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProxSolverSpec:
    kind: str
    rounds: int = 1          # local communication rounds (gradient exchanges)
    inner_tol: float = 0.0   # optional early stop on the subproblem gradient

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown prox solver {self.kind!r}")
        if self.rounds < 1:
            raise ValueError("local communication rounds must be >= 1")
        if self.inner_tol < 0:
            raise ValueError("inner_tol must be >= 0")


def exact_prox(kind: str = "closed_form_quadratic") -> ProxSolverSpec:
    return ProxSolverSpec(kind)


def prox_solve(obj: CohortObjective, gamma: float, anchor: np.ndarray,
               solver: ProxSolverSpec) -> tuple[np.ndarray, int]:
    """Minimize f_C(z) + ||z - anchor||^2 / (2 gamma).

    Returns the approximate prox point and the number of local
    communication rounds used (one synchronized cohort pass each).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    anchor = np.asarray(anchor, dtype=float)
    if solver.kind == "closed_form_quadratic":
        if not obj.is_quadratic:
            raise ValueError("closed-form prox requires quadratic cohorts")
        m, c = obj.quad_terms()
        return (anchor / gamma + c) / (1.0 / gamma + m), 0

    def phi_grad(z: np.ndarray) -> np.ndarray:
        return obj.grad(z) + (z - anchor) / gamma

    def phi_value(z: np.ndarray) -> float:
        diff = z - anchor
        return obj.value(z) + float(diff @ diff) / (2.0 * gamma)

    if solver.kind == "gradient_descent":
        step = 1.0 / (obj.l_c + 1.0 / gamma)
        z = anchor.copy()
        used = 0
        for _ in range(solver.rounds):
            g = phi_grad(z)
            used += 1
            if float(np.linalg.norm(g)) <= solver.inner_tol:
                break
            z = z - step * g
        return z, used

    if solver.kind == "conjugate_gradient":
        return _nonlinear_cg(phi_value, phi_grad, anchor,
                             1.0 / (obj.l_c + 1.0 / gamma),
                             solver.rounds, solver.inner_tol)
    return _lbfgs(phi_value, phi_grad, anchor, solver.rounds, solver.inner_tol)


def _nonlinear_cg(value, grad, x0, step0, max_rounds, tol):
    """Polak-Ribiere+ conjugate gradient with Armijo line search.

    One gradient exchange per round; the line-searched step after each
    exchange is local arithmetic.
    """
    z = x0.copy()
    g = grad(z)
    used = 1
    direction = -g
    step = step0
    while float(np.linalg.norm(g)) > tol:
        f0 = value(z)
        slope = float(g @ direction)
        if slope >= 0:  # restart on a non-descent direction
            direction = -g
            slope = float(g @ direction)
        alpha = step
        for _ in range(40):
            cand = z + alpha * direction
            if value(cand) <= f0 + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        z = z + alpha * direction
        if used == max_rounds:
            break
        g_new = grad(z)
        used += 1
        beta = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
        direction = -g_new + beta * direction
        g = g_new
        step = min(2.0 * alpha, 1e6 * step0)
    return z, used


def _lbfgs(value, grad, x0, max_rounds, tol, memory=10):
    """Limited-memory secant method with a Wolfe line search.

    Same round accounting as the conjugate-gradient solver.
    """
    z = x0.copy()
    g = grad(z)
    used = 1
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    while float(np.linalg.norm(g)) > tol:
        direction = -_two_loop(g, s_list, y_list)
        if float(g @ direction) >= 0:
            direction = -g
        alpha = _wolfe(value, grad, z, direction, g)
        z_new = z + alpha * direction
        if used == max_rounds:
            return z_new, used
        g_new = grad(z_new)
        used += 1
        s, y = z_new - z, g_new - g
        if float(s @ y) > 1e-16:
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        z, g = z_new, g_new
    return z, used


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if y_list:
        y = y_list[-1]
        q *= float(s_list[-1] @ y) / float(y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _wolfe(value, grad, z, direction, g, c1=1e-4, c2=0.9, max_iter=25):
    f0 = value(z)
    slope0 = float(g @ direction)
    alpha, lo, hi = 1.0, 0.0, math.inf
    for _ in range(max_iter):
        cand = z + alpha * direction
        if value(cand) > f0 + c1 * alpha * slope0:
            hi = alpha
        else:
            slope = float(grad(cand) @ direction)
            if slope < c2 * slope0:
                lo = alpha
            else:
                return alpha
        alpha = (lo + hi) / 2.0 if math.isfinite(hi) else 2.0 * alpha
    return alpha


# ---------------------------------------------------------------------------
# cost model and runners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """c1 per local (client-hub) round, c2 per global (hub-server) round."""

    c1: float = 1.0
    c2: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.c1) and math.isfinite(self.c2)):
            raise ValueError("costs must be finite")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("costs must be >= 0")


def comm_cost(trace: Trace, cost: CostModel) -> float:
    """Total (c1 K_t + c2) over the global rounds recorded in the trace."""
    total = 0.0
    for row in trace.rows:
        if row.round >= 1:
            total += cost.c1 * row.K_used + cost.c2
    return total


def _record(trace, t, x, x_star, k_used, cost_cum):
    dist = math.nan if x_star is None else float(np.sum((x - x_star) ** 2))
    if x_star is not None and (not math.isfinite(dist) or dist > DIVERGENCE_GUARD):
        raise DivergenceError(f"iterate distance blew up at round {t}")
    trace.add(round=t, dist_sq=dist, K_used=k_used, cost_cum=cost_cum)
    return dist


def run_sppm_as(p: Problem, scheme: SamplingScheme, gamma: float, rounds: int,
                solver: ProxSolverSpec, cost: CostModel = CostModel(),
                seed: int = 0, x0: Optional[np.ndarray] = None,
                x_star: Optional[np.ndarray] = None,
                target_dist_sq: Optional[float] = None) -> Trace:
    """Prox steps on freshly sampled cohort objectives.

    Row t carries the squared distance at x_t, the local rounds spent in
    round t-1 and the cost accumulated so far.  Stops early once the
    distance target is met.
    """
    x = np.zeros(p.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    probs = scheme.inclusion_probs()
    trace = Trace(meta={"algorithm": "sppm_as", "seed": seed})
    cost_cum = 0.0
    dist = _record(trace, 0, x, x_star, 0, cost_cum)
    for t in range(rounds):
        if target_dist_sq is not None and dist <= target_dist_sq:
            break
        cohort = scheme.sample(rngmod.stream(seed, rngmod.COHORT, t))
        weights = 1.0 / (scheme.n * probs[list(cohort)])
        obj = CohortObjective(p, cohort, weights)
        x, used = prox_solve(obj, gamma, x, solver)
        cost_cum += cost.c1 * used + cost.c2
        dist = _record(trace, t + 1, x, x_star, used, cost_cum)
    return trace


def run_localgd(p: Problem, scheme: SamplingScheme, stepsize: float,
                local_steps: int, rounds: int, cost: CostModel = CostModel(),
                seed: int = 0, x0: Optional[np.ndarray] = None,
                x_star: Optional[np.ndarray] = None,
                target_dist_sq: Optional[float] = None) -> Trace:
    """Minibatch local GD: sampled cohort, local steps, uniform average.

    One upload and one download per global round, so each round costs
    c1 + c2 regardless of the local step count.
    """
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    if stepsize <= 0:
        raise ValueError("stepsize must be positive")
    x = np.zeros(p.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    trace = Trace(meta={"algorithm": "localgd", "seed": seed})
    cost_cum = 0.0
    dist = _record(trace, 0, x, x_star, 0, cost_cum)
    for t in range(rounds):
        if target_dist_sq is not None and dist <= target_dist_sq:
            break
        cohort = scheme.sample(rngmod.stream(seed, rngmod.COHORT, t))
        locals_ = []
        for i in cohort:
            z = x.copy()
            for _ in range(local_steps):
                z = z - stepsize * p.grad(i, z)
            locals_.append(z)
        x = np.mean(locals_, axis=0)
        cost_cum += cost.c1 + cost.c2
        dist = _record(trace, t + 1, x, x_star, 1, cost_cum)
    return trace


_TIGHT_PROX = ProxSolverSpec("gradient_descent", rounds=100_000, inner_tol=1e-12)


def _member_prox(p: Problem, i: int, gamma: float, anchor: np.ndarray) -> np.ndarray:
    """prox_{gamma f_i}(anchor), exact for quadratics, tight GD otherwise."""
    obj = CohortObjective(p, (i,), (1.0,))
    if obj.is_quadratic:
        z, _ = prox_solve(obj, gamma, anchor, ProxSolverSpec("closed_form_quadratic"))
    else:
        z, _ = prox_solve(obj, gamma, anchor, _TIGHT_PROX)
    return z


def run_fedprox_sppm(p: Problem, scheme: SamplingScheme, gamma: float, k: int,
                     rounds: int, seed: int = 0,
                     x0: Optional[np.ndarray] = None,
                     x_star: Optional[np.ndarray] = None) -> Trace:
    """Per-member prox averaging, repeated k times per cohort."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.zeros(p.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    trace = Trace(meta={"algorithm": "fedprox_sppm", "seed": seed})
    cost_cum = 0.0
    _record(trace, 0, x, x_star, 0, cost_cum)
    for t in range(rounds):
        cohort = scheme.sample(rngmod.stream(seed, rngmod.COHORT, t))
        for _ in range(k):
            x = np.mean([_member_prox(p, i, gamma, x) for i in cohort], axis=0)
        cost_cum += float(k)
        _record(trace, t + 1, x, x_star, k, cost_cum)
    return trace


def run_fedavg_sppm(p: Problem, scheme: SamplingScheme, gamma: float,
                    alpha_loc: float, k: int, rounds: int, seed: int = 0,
                    x0: Optional[np.ndarray] = None,
                    x_star: Optional[np.ndarray] = None) -> Trace:
    """Averaged proxes of the anchored local objectives f_i + ||.-x_t||^2/(2 gamma).

    Each inner prox minimizes f_i(z) + ||z - x_t||^2/(2 gamma)
    + ||z - x_k||^2/(2 alpha_loc); large alpha_loc recovers the exact
    prox of the anchored objective.
    """
    if alpha_loc <= 0:
        raise ValueError("alpha_loc must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.zeros(p.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    trace = Trace(meta={"algorithm": "fedavg_sppm", "seed": seed})
    cost_cum = 0.0
    _record(trace, 0, x, x_star, 0, cost_cum)
    for t in range(rounds):
        cohort = scheme.sample(rngmod.stream(seed, rngmod.COHORT, t))
        anchor_t = x.copy()
        z = x.copy()
        for _ in range(k):
            z = np.mean([_anchored_member_prox(p, i, gamma, anchor_t, alpha_loc, z)
                         for i in cohort], axis=0)
        x = z
        cost_cum += float(k)
        _record(trace, t + 1, x, x_star, k, cost_cum)
    return trace


def _anchored_member_prox(p: Problem, i: int, gamma: float, anchor_t: np.ndarray,
                          alpha_loc: float, z_k: np.ndarray) -> np.ndarray:
    if p.kind == "quadratic":
        mu = p.quad_mu[i]
        num = mu * p.quad_centers[i] + anchor_t / gamma + z_k / alpha_loc
        return num / (mu + 1.0 / gamma + 1.0 / alpha_loc)

    def fg(z):
        value = (p.loss(i, z)
                 + float(np.sum((z - anchor_t) ** 2)) / (2.0 * gamma)
                 + float(np.sum((z - z_k) ** 2)) / (2.0 * alpha_loc))
        grad = p.grad(i, z) + (z - anchor_t) / gamma + (z - z_k) / alpha_loc
        return value, grad

    lip = float(p.constants().l_i[i]) + 1.0 / gamma + 1.0 / alpha_loc
    z, _ = minimize_gd(fg, z_k, 1e-12, lipschitz=lip)
    return z


# ---------------------------------------------------------------------------
# clustering for stratified sampling
# ---------------------------------------------------------------------------

def equal_partitions(n: int, b: int):
    """Canonical enumeration of partitions of range(n) into b blocks of n/b."""
    if n % b != 0:
        raise ValueError("n must be divisible by b for equal blocks")
    size = n // b

    def rec(remaining: tuple[int, ...]):
        if not remaining:
            yield ()
            return
        head = remaining[0]
        for others in itertools.combinations(remaining[1:], size - 1):
            blk = (head,) + others
            rest = tuple(i for i in remaining if i not in blk)
            for tail in rec(rest):
                yield (blk,) + tail

    yield from rec(tuple(range(n)))


def optimal_stratified_clustering(grads_at_opt: np.ndarray, b: int,
                                  mode: str = "brute_force",
                                  seed: int = 0) -> tuple[tuple[int, ...], ...]:
    """Equal-block clustering minimizing the stratified variance.

    brute_force enumerates every equal partition (n <= 10); kmeans
    clusters the gradient vectors as the practical heuristic (natural
    cluster sizes).
    """
    g = np.asarray(grads_at_opt, dtype=float)
    n = len(g)
    if mode == "kmeans":
        labels = datasets.kmeans(g, b, seed)
        return tuple(tuple(np.flatnonzero(labels == j).tolist()) for j in range(b))
    if mode != "brute_force":
        raise ValueError(f"unknown clustering mode {mode!r}")
    if n > BRUTE_FORCE_MAX_N:
        raise EnumerationGuardError(f"n={n} exceeds brute-force guard {BRUTE_FORCE_MAX_N}")
    best = None
    best_sigma = math.inf
    for blocks in equal_partitions(n, b):
        sigma = sigma_star_as(stratified(blocks), g)
        if sigma < best_sigma - 1e-15:
            best, best_sigma = blocks, sigma
    return best
