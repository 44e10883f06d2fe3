"""Shared test oracles: finite differences, quadrature, fixtures."""

from __future__ import annotations

import numpy as np

from commopt.problems import Problem


def fd_gradient(fun, x, h=1e-6):
    """Central finite differences, the independent gradient oracle."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return out


def line_integral_value(grad, x, points=5):
    """int_0^1 <grad(t x), x> dt by Gauss-Legendre quadrature."""
    nodes, weights = np.polynomial.legendre.leggauss(points)
    t = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    return float(sum(wi * np.dot(grad(ti * x), x) for ti, wi in zip(t, w)))


def unit_cross_gradients():
    """a1..a4: the unit-cross vectors of the stratified counterexample."""
    return np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]])


def unit_cross_problem() -> Problem:
    """Quadratic clients whose optimum gradients are exactly a1..a4."""
    a = unit_cross_gradients()
    return Problem.quadratic(np.ones(4), -a)  # x* = 0, grad_i(x*) = a_i


def make_logistic(n_clients=4, per_client=12, dim=3, seed=0, mu=0.1,
                  kind="l2_logistic", separation=2.0) -> Problem:
    """Synthetic Gaussian-blob logistic problem split evenly."""
    from commopt import datasets

    ds = datasets.synth_logistic_dataset(n_clients * per_client, dim, seed,
                                         separation=separation)
    part = datasets.partition(ds, "iid", n_clients, seed)
    return Problem.from_dataset(ds, part, mu=mu, kind=kind)


def mean_with_slack(samples: np.ndarray) -> tuple[float, float]:
    """(sample mean, 3 * standard error) for Monte-Carlo bound checks."""
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(len(samples)) if len(samples) > 1 else 0.0
    return float(samples.mean()), 3.0 * float(se)
