import math

import numpy as np
import pytest

from _util import fd_gradient, line_integral_value, make_logistic
from commopt.problems import (DivergenceError, Problem, Regularizer, ZERO_REG,
                              local_minimizer, minimize_gd, prox_reg,
                              reference_solution, reg_value)


@pytest.fixture(scope="module")
def logistic():
    return make_logistic(n_clients=4, per_client=12, dim=3, seed=0, mu=0.1)


@pytest.fixture(scope="module")
def nonconvex():
    return make_logistic(n_clients=3, per_client=10, dim=3, seed=1, mu=0.1,
                         kind="nonconvex_logistic")


@pytest.fixture(scope="module")
def quad():
    rng = np.random.default_rng(5)
    return Problem.quadratic(np.array([0.5, 1.0, 2.0]), rng.normal(size=(3, 4)))


class TestLoss:
    def test_logistic_at_zero(self, logistic):
        assert logistic.loss(0, np.zeros(3)) == pytest.approx(math.log(2.0))

    def test_quadratic_at_center(self, quad):
        assert quad.loss(1, quad.quad_centers[1]) == 0.0

    @pytest.mark.parametrize("client", [0, 1, 2])
    def test_matches_line_integral_of_gradient(self, logistic, client):
        # f(x) - f(0) must equal the 5-point quadrature of <grad(tx), x>
        rng = np.random.default_rng(client)
        x = rng.normal(size=3)
        lhs = logistic.loss(client, x) - logistic.loss(client, np.zeros(3))
        rhs = line_integral_value(lambda z: logistic.grad(client, z), x)
        assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_nonconvex_line_integral(self, nonconvex):
        rng = np.random.default_rng(9)
        x = 0.7 * rng.normal(size=3)
        lhs = nonconvex.loss(0, x) - nonconvex.loss(0, np.zeros(3))
        rhs = line_integral_value(lambda z: nonconvex.grad(0, z), x, points=12)
        assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_dimension_mismatch(self, logistic):
        with pytest.raises(ValueError):
            logistic.loss(0, np.zeros(5))


class TestGrad:
    @pytest.mark.parametrize("kind", ["l2_logistic", "nonconvex_logistic"])
    def test_finite_differences(self, kind, logistic, nonconvex):
        p = logistic if kind == "l2_logistic" else nonconvex
        rng = np.random.default_rng(3)
        for _ in range(100):
            client = int(rng.integers(p.n))
            x = rng.normal(size=p.dim)
            g = p.grad(client, x)
            fd = fd_gradient(lambda z: p.loss(client, z), x)
            assert np.linalg.norm(g - fd) <= 1e-4 * max(1.0, np.linalg.norm(g))

    def test_quadratic_exact(self, quad):
        x = np.ones(4)
        for i in range(quad.n):
            expect = quad.quad_mu[i] * (x - quad.quad_centers[i])
            assert np.array_equal(quad.grad(i, x), expect)

    def test_first_order_optimality_at_reference(self, logistic):
        x_star = reference_solution(logistic, tol=1e-12)
        assert np.linalg.norm(logistic.full_grad(x_star)) <= 1e-12

    def test_grad_rows_consistency(self, logistic):
        xs = np.random.default_rng(0).normal(size=(logistic.n, logistic.dim))
        rows = logistic.grad_rows(xs)
        for i in range(logistic.n):
            assert np.array_equal(rows[i], logistic.grad(i, xs[i]))


class TestConstants:
    def test_single_datum_plugin(self):
        p = Problem.logistic_arrays([np.array([[2.0, 0.0]])], [np.array([1.0])], mu=0.1)
        assert p.constants().l_i[0] == pytest.approx(1.1)

    def test_equal_clients_collapse(self):
        a = np.array([[1.0, 1.0], [0.0, 2.0]])
        b = np.array([1.0, -1.0])
        p = Problem.logistic_arrays([a, a, a], [b, b, b], mu=0.1)
        c = p.constants()
        assert c.l_tilde == pytest.approx(c.l_max)
        assert c.l_i[0] == pytest.approx(c.l_max)
        assert c.l_tilde_sum == pytest.approx(math.sqrt(3) * c.l_max)

    def test_deterministic_across_builds(self):
        p1 = make_logistic(n_clients=5, per_client=8, dim=4, seed=7)
        p2 = make_logistic(n_clients=5, per_client=8, dim=4, seed=7)
        assert np.array_equal(p1.constants().l_i, p2.constants().l_i)
        assert p1.constants().l_tilde == p2.constants().l_tilde

    def test_smoothness_dominates_curvature(self, logistic):
        c = logistic.constants()
        assert (c.l_i >= c.mu_i).all()
        assert c.l_tilde <= c.l_max + 1e-15
        assert c.mu_pl == pytest.approx(0.1)

    def test_cached_object_identity(self, logistic):
        assert logistic.constants() is logistic.constants()

    def test_concurrent_first_calls_share_one_value(self):
        from concurrent.futures import ThreadPoolExecutor

        p = make_logistic(n_clients=6, per_client=20, dim=4, seed=11)
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: p.constants(), range(32)))
        assert all(r is results[0] for r in results)


class TestReferenceSolution:
    def test_quadratic_closed_form(self):
        p = Problem.quadratic([1.0, 1.0], [[0.0], [2.0]])
        assert reference_solution(p) == pytest.approx([1.0])

    def test_warm_start_is_fixed_point(self, logistic):
        x_star = reference_solution(logistic, tol=1e-10)
        again, iters = minimize_gd(
            lambda x: (logistic.full_loss(x), logistic.full_grad(x)), x_star, 1e-10)
        assert iters == 0
        assert np.array_equal(again, x_star)

    def test_agrees_with_independent_solver(self, logistic):
        # oracle: plain fixed-step gradient descent run far past the target
        x_star = reference_solution(logistic, tol=1e-12)
        l_bound = logistic.constants().l_max
        x = np.zeros(logistic.dim)
        for _ in range(60_000):
            x = x - (1.0 / l_bound) * logistic.full_grad(x)
        assert np.linalg.norm(x - x_star) <= 1e-8

    def test_nonconvex_rejected(self, nonconvex):
        with pytest.raises(ValueError):
            reference_solution(nonconvex)

    def test_l2_regularized_quadratic(self):
        p = Problem.quadratic([2.0, 2.0], [[1.0], [3.0]])
        reg = Regularizer("l2", 2.0)
        x_star = reference_solution(p, reg)
        # stationarity of f + R
        grad = p.full_grad(x_star) + reg.strength * x_star
        assert np.linalg.norm(grad) <= 1e-12


class TestLocalMinimizer:
    def test_quadratic_closed_form(self, quad):
        x, iters = local_minimizer(quad, 2)
        assert np.array_equal(x, quad.quad_centers[2])
        assert iters == 0

    def test_looser_tolerance_is_cheaper(self, logistic):
        _, hi = local_minimizer(logistic, 0, eps_loc=1e-6)
        _, lo = local_minimizer(logistic, 0, eps_loc=1e-1)
        assert lo < hi

    def test_certificate_holds(self, logistic):
        for eps in (1e-2, 1e-6):
            x, _ = local_minimizer(logistic, 1, eps_loc=eps)
            assert np.linalg.norm(logistic.grad(1, x)) < eps

    def test_bad_eps_rejected(self, logistic):
        with pytest.raises(ValueError):
            local_minimizer(logistic, 0, eps_loc=0.0)


class TestProxReg:
    def test_zero_is_identity(self):
        x = np.array([1.0, -2.0])
        assert prox_reg(ZERO_REG, 0.5, x) is x

    def test_l2_closed_form(self):
        assert prox_reg(Regularizer("l2", 1.0), 1.0, np.array([2.0])) == pytest.approx([1.0])

    def test_nonexpansive_on_random_pairs(self):
        reg = Regularizer("l2", 0.7)
        rng = np.random.default_rng(11)
        for _ in range(50):
            x, y = rng.normal(size=(2, 6))
            gamma = float(rng.uniform(0.01, 10.0))
            dist = np.linalg.norm(prox_reg(reg, gamma, x) - prox_reg(reg, gamma, y))
            assert dist <= np.linalg.norm(x - y) * (1.0 + 1e-12)

    def test_reg_value(self):
        assert reg_value(Regularizer("l2", 2.0), np.array([3.0])) == pytest.approx(9.0)


class TestWitnesses:
    def test_strong_convexity(self, logistic):
        mu_i = logistic.constants().mu_i
        rng = np.random.default_rng(2)
        for _ in range(40):
            i = int(rng.integers(logistic.n))
            x, y = rng.normal(size=(2, logistic.dim))
            lower = (logistic.loss(i, y)
                     + float(logistic.grad(i, y) @ (x - y))
                     + 0.5 * mu_i[i] * float(np.sum((x - y) ** 2)))
            assert logistic.loss(i, x) >= lower - 1e-10

    @pytest.mark.parametrize("kind", ["l2_logistic", "nonconvex_logistic", "quadratic"])
    def test_smoothness(self, kind, logistic, nonconvex, quad):
        p = {"l2_logistic": logistic, "nonconvex_logistic": nonconvex,
             "quadratic": quad}[kind]
        l_i = p.constants().l_i
        rng = np.random.default_rng(4)
        for _ in range(40):
            i = int(rng.integers(p.n))
            x, y = rng.normal(size=(2, p.dim))
            lhs = np.linalg.norm(p.grad(i, x) - p.grad(i, y))
            assert lhs <= l_i[i] * np.linalg.norm(x - y) * (1.0 + 1e-10)


class TestMinimizeGd:
    def test_divergence_guard(self):
        # maximize instead of minimize: value explodes immediately
        with pytest.raises(DivergenceError):
            minimize_gd(lambda x: (-float(x @ x), -2.0 * x), np.ones(2), 1e-12,
                        max_iter=1000, guard=1e6)
