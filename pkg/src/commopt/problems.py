"""Finite-sum objectives with per-client oracles and constants.

Three kinds are supported: l2-regularized logistic regression, logistic
regression with a nonconvex bounded regularizer, and per-client
quadratics with known optimum.  Problems are immutable; constants are
computed once and cached.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

KINDS = ("l2_logistic", "nonconvex_logistic", "quadratic")


class DivergenceError(RuntimeError):
    """A solver exceeded its iteration or magnitude guard."""


@dataclass(frozen=True)
class Regularizer:
    """Composite-term regularizer with an easy proximity operator."""

    kind: str = "zero"  # zero | l2
    strength: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "l2"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.strength < 0:
            raise ValueError("regularizer strength must be >= 0")


ZERO_REG = Regularizer()


def prox_reg(reg: Regularizer, gamma: float, x: np.ndarray) -> np.ndarray:
    """prox_{gamma R}: identity for zero, shrinkage x / (1 + gamma s) for l2."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if reg.kind == "zero" or reg.strength == 0.0:
        return x
    return x / (1.0 + gamma * reg.strength)


def reg_value(reg: Regularizer, x: np.ndarray) -> float:
    if reg.kind == "zero" or reg.strength == 0.0:
        return 0.0
    return 0.5 * reg.strength * float(x @ x)


@dataclass(frozen=True)
class ProblemConstants:
    """Per-client smoothness/curvature and their aggregates.

    ``l_tilde`` follows the root-mean convention sqrt((1/n) sum L_i^2);
    ``l_tilde_sum`` is the plain-sum variant sqrt(sum L_i^2).  Both
    conventions are in common use, so both are exposed.
    """

    l_i: np.ndarray
    mu_i: np.ndarray
    l_tilde: float
    l_tilde_sum: float
    l_max: float
    l_global: float
    kappa_max: float
    mu_pl: Optional[float]  # strong-convexity / PL constant of the average f

    def to_json_dict(self) -> dict:
        return {
            "l_i": self.l_i.tolist(),
            "mu_i": self.mu_i.tolist(),
            "l_tilde": self.l_tilde,
            "l_tilde_sum": self.l_tilde_sum,
            "l_max": self.l_max,
            "l_global": self.l_global,
            "kappa_max": self.kappa_max,
            "mu_pl": self.mu_pl,
        }


class Problem:
    """A finite-sum objective f = (1/n) sum_i f_i with client oracles."""

    def __init__(self, kind: str, *, a_blocks=None, b_blocks=None, mu: float = 0.0,
                 quad_mu=None, quad_centers=None):
        if kind not in KINDS:
            raise ValueError(f"unknown problem kind {kind!r}")
        self.kind = kind
        self.mu = float(mu)
        if kind == "quadratic":
            self.quad_mu = np.asarray(quad_mu, dtype=float)
            self.quad_centers = np.asarray(quad_centers, dtype=float)
            if (self.quad_mu <= 0).any():
                raise ValueError("quadratic curvatures must be positive")
            self._n = len(self.quad_mu)
            self._dim = self.quad_centers.shape[1]
        else:
            if kind == "l2_logistic" and self.mu <= 0:
                raise ValueError("l2_logistic requires mu > 0")
            if kind == "nonconvex_logistic" and self.mu <= 0:
                raise ValueError("nonconvex_logistic requires lambda > 0")
            self.a_blocks = [np.asarray(a, dtype=float) for a in a_blocks]
            self.b_blocks = [np.asarray(b, dtype=float) for b in b_blocks]
            if len(self.a_blocks) != len(self.b_blocks):
                raise ValueError("mismatched client blocks")
            self._n = len(self.a_blocks)
            self._dim = self.a_blocks[0].shape[1]
        self._constants: Optional[ProblemConstants] = None
        self._lock = threading.Lock()

    # -- constructors -------------------------------------------------

    @classmethod
    def quadratic(cls, mu_list, centers) -> "Problem":
        return cls("quadratic", quad_mu=mu_list, quad_centers=centers)

    @classmethod
    def logistic_arrays(cls, a_blocks, b_blocks, mu: float,
                        kind: str = "l2_logistic") -> "Problem":
        return cls(kind, a_blocks=a_blocks, b_blocks=b_blocks, mu=mu)

    @classmethod
    def from_dataset(cls, ds, part, mu: float, kind: str = "l2_logistic") -> "Problem":
        """Build a logistic problem from a parsed dataset and a partition."""
        dense = ds.to_dense()
        a_blocks = [dense[idx] for idx in part.assignments]
        b_blocks = [ds.labels[idx].astype(float) for idx in part.assignments]
        return cls(kind, a_blocks=a_blocks, b_blocks=b_blocks, mu=mu)

    # -- basic properties ---------------------------------------------

    @property
    def n(self) -> int:
        return self._n

    @property
    def dim(self) -> int:
        return self._dim

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self._dim,):
            raise ValueError(f"x has shape {x.shape}, expected ({self._dim},)")
        return x

    # -- oracles -------------------------------------------------------

    def loss(self, client: int, x: np.ndarray) -> float:
        x = self._check_x(x)
        if self.kind == "quadratic":
            diff = x - self.quad_centers[client]
            return 0.5 * self.quad_mu[client] * float(diff @ diff)
        a, b = self.a_blocks[client], self.b_blocks[client]
        margins = b * (a @ x)
        data = float(np.mean(np.logaddexp(0.0, -margins)))
        if self.kind == "l2_logistic":
            return data + 0.5 * self.mu * float(x @ x)
        return data + self.mu * float(np.sum(x**2 / (1.0 + x**2)))

    def grad(self, client: int, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        if self.kind == "quadratic":
            return self.quad_mu[client] * (x - self.quad_centers[client])
        a, b = self.a_blocks[client], self.b_blocks[client]
        margins = b * (a @ x)
        sig = _sigmoid(-margins)
        data = -(a.T @ (b * sig)) / len(b)
        if self.kind == "l2_logistic":
            return data + self.mu * x
        return data + self.mu * 2.0 * x / (1.0 + x**2) ** 2

    def grad_all(self, x: np.ndarray) -> np.ndarray:
        """All client gradients, stacked (n, d)."""
        x = self._check_x(x)
        if self.kind == "quadratic":
            return self.quad_mu[:, None] * (x[None, :] - self.quad_centers)
        return np.stack([self.grad(i, x) for i in range(self._n)])

    def grad_rows(self, xs: np.ndarray) -> np.ndarray:
        """Gradient of client i at row i of ``xs``; shape (n, d)."""
        if xs.shape != (self._n, self._dim):
            raise ValueError(f"xs has shape {xs.shape}, expected ({self._n}, {self._dim})")
        if self.kind == "quadratic":
            return self.quad_mu[:, None] * (xs - self.quad_centers)
        return np.stack([self.grad(i, xs[i]) for i in range(self._n)])

    def loss_rows(self, xs: np.ndarray) -> np.ndarray:
        """Loss of client i at row i of ``xs``; shape (n,)."""
        if xs.shape != (self._n, self._dim):
            raise ValueError(f"xs has shape {xs.shape}, expected ({self._n}, {self._dim})")
        if self.kind == "quadratic":
            sq = ((xs - self.quad_centers) ** 2).sum(axis=1)
            return 0.5 * self.quad_mu * sq
        return np.array([self.loss(i, xs[i]) for i in range(self._n)])

    def full_loss(self, x: np.ndarray) -> float:
        if self.kind == "quadratic":
            x = self._check_x(x)
            sq = ((x[None, :] - self.quad_centers) ** 2).sum(axis=1)
            return 0.5 * float(np.mean(self.quad_mu * sq))
        return float(np.mean([self.loss(i, x) for i in range(self._n)]))

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.grad_all(x).mean(axis=0)

    def sample_grad(self, client: int, j: int, x: np.ndarray) -> np.ndarray:
        """Gradient of the j-th local datum's loss (regularizer included)."""
        if self.kind == "quadratic":
            raise ValueError("quadratic clients have no per-datum sampling")
        x = self._check_x(x)
        a = self.a_blocks[client][j]
        b = self.b_blocks[client][j]
        sig = _sigmoid(-b * float(a @ x))
        data = -b * sig * a
        if self.kind == "l2_logistic":
            return data + self.mu * x
        return data + self.mu * 2.0 * x / (1.0 + x**2) ** 2

    def client_size(self, client: int) -> int:
        if self.kind == "quadratic":
            return 1
        return len(self.b_blocks[client])

    # -- constants ------------------------------------------------------

    def constants(self) -> ProblemConstants:
        if self._constants is None:
            with self._lock:
                if self._constants is None:
                    self._constants = self._compute_constants()
        return self._constants

    def _compute_constants(self) -> ProblemConstants:
        if self.kind == "quadratic":
            l_i = self.quad_mu.copy()
            mu_i = self.quad_mu.copy()
            mu_pl = float(np.mean(self.quad_mu))
        else:
            sq = np.array([np.mean((a**2).sum(axis=1)) / 4.0 for a in self.a_blocks])
            if self.kind == "l2_logistic":
                l_i = sq + self.mu
                mu_i = np.full(self._n, self.mu)
                mu_pl = self.mu
            else:
                # bounded regularizer: second derivative of x^2/(1+x^2) lies in [-2, 2]
                l_i = sq + 2.0 * self.mu
                mu_i = np.zeros(self._n)
                mu_pl = None
        l_tilde = float(np.sqrt(np.mean(l_i**2)))
        l_tilde_sum = float(np.sqrt(np.sum(l_i**2)))
        kappa = float(np.max(l_i / mu_i)) if (mu_i > 0).all() else float("inf")
        return ProblemConstants(
            l_i=l_i, mu_i=mu_i, l_tilde=l_tilde, l_tilde_sum=l_tilde_sum,
            l_max=float(l_i.max()), l_global=l_tilde, kappa_max=kappa, mu_pl=mu_pl,
        )

    # -- smoothness constant of a single local datum (expected smoothness) --

    def sample_l_max(self, client: int) -> float:
        """max_j smoothness of the j-th datum's loss at this client."""
        if self.kind == "quadratic":
            return float(self.quad_mu[client])
        sq = (self.a_blocks[client] ** 2).sum(axis=1) / 4.0
        extra = self.mu if self.kind == "l2_logistic" else 2.0 * self.mu
        return float(sq.max() + extra)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def minimize_gd(value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
                x0: np.ndarray, tol: float, max_iter: int = 500_000,
                guard: float = 1e30, lipschitz: float | None = None) -> tuple[np.ndarray, int]:
    """Deterministic gradient descent to gradient norm below ``tol``.

    With a known smoothness constant the stepsize is fixed at its
    inverse; otherwise Armijo backtracking is used.  Backtracking stalls
    at the float resolution of objective *values*, so tight tolerances
    should pass ``lipschitz``.  Raises DivergenceError when the guard
    trips or iterations run out.
    """
    x = np.asarray(x0, dtype=float).copy()
    value, grad = value_and_grad(x)
    step = 1.0 if lipschitz is None else 1.0 / lipschitz
    last = math.inf
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return x, it
        if not np.isfinite(value) or abs(value) > guard:
            raise DivergenceError(f"objective magnitude exceeded guard at iter {it}")
        if lipschitz is not None:
            cand = x - step * grad
            if np.array_equal(cand, x):
                last = min(last, gnorm)  # float fixed point reached
                break
            x = cand
            value, grad = value_and_grad(x)
            continue
        while True:
            cand = x - step * grad
            cand_value, cand_grad = value_and_grad(cand)
            if cand_value <= value - 1e-4 * step * gnorm**2:
                break
            step *= 0.5
            if step < 1e-20:
                raise DivergenceError("line search collapsed")
        x, value, grad = cand, cand_value, cand_grad
        step *= 2.0
    raise DivergenceError(f"no convergence to tol={tol} in {max_iter} iterations"
                          + (f" (gradient floor {last:.3g})" if math.isfinite(last) else ""))


def reference_solution(p: Problem, reg: Regularizer = ZERO_REG,
                       tol: float = 1e-12, max_iter: int = 200_000) -> np.ndarray:
    """High-precision minimizer of f + R (convex kinds only).

    Closed form for quadratics; full-gradient descent with backtracking
    otherwise.  The returned point satisfies ||grad|| <= tol.
    """
    if p.kind == "nonconvex_logistic":
        raise ValueError("no global reference for the nonconvex kind")
    if p.kind == "quadratic":
        wsum = p.quad_mu.sum()
        xbar = (p.quad_mu[:, None] * p.quad_centers).sum(axis=0) / wsum
        if reg.kind == "l2" and reg.strength > 0:
            mbar = wsum / p.n
            return (mbar / (mbar + reg.strength)) * xbar
        return xbar

    def fg(x):
        value = p.full_loss(x) + reg_value(reg, x)
        grad = p.full_grad(x)
        if reg.kind == "l2" and reg.strength > 0:
            grad = grad + reg.strength * x
        return value, grad

    lip = p.constants().l_max + (reg.strength if reg.kind == "l2" else 0.0)
    x, _ = minimize_gd(fg, np.zeros(p.dim), tol, max_iter, lipschitz=lip)
    return x


def local_minimizer(p: Problem, client: int, eps_loc: float = 1e-6,
                    max_iter: int = 200_000) -> tuple[np.ndarray, int]:
    """Approximate argmin of f_i with certificate ||grad f_i|| < eps_loc.

    Returns the point and the number of iterations spent, which supports
    the inexactness ablations.  Quadratic clients are solved in closed
    form.
    """
    if p.kind == "nonconvex_logistic":
        raise ValueError("local minimizers are only defined for convex kinds")
    if eps_loc <= 0:
        raise ValueError("eps_loc must be positive")
    if p.kind == "quadratic":
        return p.quad_centers[client].copy(), 0
    x, iters = minimize_gd(lambda x: (p.loss(client, x), p.grad(client, x)),
                           np.zeros(p.dim), eps_loc, max_iter,
                           lipschitz=float(p.constants().l_i[client]))
    return x, iters
