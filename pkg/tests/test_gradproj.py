import numpy as np
import pytest

from grcl.gradproj import (ConstraintSet, QPSolverError, check_violation,
                           default_eps_feas, oracle_project, project)


def random_instance(rng, P=None, k=None):
    P = P or int(rng.choice([2, 8, 32, 64]))
    k = k or int(rng.choice([1, 2, 5]))
    return ConstraintSet(rng.normal(size=P), rng.normal(size=(k, P)))


class TestCheckViolation:
    def test_zero_inner_product_not_violated(self):
        cs = ConstraintSet(np.array([1.0, 0.0]), np.array([[0.0, 1.0]]))
        assert not check_violation(cs, 1e-9).any()

    def test_parallel_not_violated(self):
        g = np.array([1.0, 2.0])
        cs = ConstraintSet(g, g[None, :])
        assert not check_violation(cs, 1e-9).any()

    def test_antiparallel_violated(self):
        g = np.array([1.0, 2.0])
        cs = ConstraintSet(g, -g[None, :])
        assert check_violation(cs, 1e-9).all()

    def test_per_row_flags(self):
        cs = ConstraintSet(np.array([1.0, -1.0]),
                           np.array([[1.0, 0.0], [0.0, 1.0]]))
        flags = check_violation(cs, 1e-9)
        assert list(flags) == [False, True]


class TestProjectFixtures:
    def test_feasible_input_unchanged(self):
        cs = ConstraintSet(np.array([1.0, 1.0]), np.array([[1.0, 0.0]]))
        res = project(cs)
        assert np.array_equal(res.projected, cs.proposed)
        assert np.all(res.multipliers == 0.0)
        assert res.distortion == 0.0

    def test_halfspace_example(self):
        cs = ConstraintSet(np.array([1.0, -2.0]), np.array([[0.0, 1.0]]))
        res = project(cs)
        np.testing.assert_allclose(res.projected, [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(res.multipliers, [2.0], atol=1e-12)
        # closed form: g - (<g, gs>/|gs|^2) gs
        g, gs = cs.proposed, cs.constraint_grads[0]
        closed = g - (g @ gs) / (gs @ gs) * gs
        np.testing.assert_allclose(res.projected, closed, atol=1e-12)

    def test_orthant_example(self):
        cs = ConstraintSet(np.array([1.0, -1.0]),
                           np.array([[0.0, 1.0], [1.0, 0.0]]),
                           labels=["source", "domain-memory"])
        res = project(cs)
        np.testing.assert_allclose(res.projected, [1.0, 0.0], atol=1e-10)
        np.testing.assert_allclose(res.multipliers, [1.0, 0.0], atol=1e-10)
        assert list(res.active) == [True, False]

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            ConstraintSet(np.array([np.nan, 0.0]), np.array([[1.0, 0.0]]))


class TestOracle:
    def test_feasible_returns_input(self):
        cs = ConstraintSet(np.array([2.0, 3.0]), np.array([[1.0, 1.0]]))
        np.testing.assert_array_equal(oracle_project(cs), cs.proposed)

    def test_orthant(self):
        cs = ConstraintSet(np.array([1.0, -1.0]),
                           np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(oracle_project(cs), [1.0, 0.0], atol=1e-12)

    def test_constraint_bound(self):
        rng = np.random.default_rng(0)
        cs = ConstraintSet(rng.normal(size=4), rng.normal(size=(13, 4)))
        with pytest.raises(ValueError):
            oracle_project(cs)

    def test_cross_validation_random(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            cs = random_instance(rng)
            res = project(cs)
            z = oracle_project(cs)
            assert np.max(np.abs(res.projected - z)) <= 1e-6
            d_project = np.linalg.norm(cs.proposed - res.projected)
            d_oracle = np.linalg.norm(cs.proposed - z)
            assert abs(d_project - d_oracle) <= 1e-6


class TestProjectionProperties:
    @pytest.mark.parametrize("seed", range(8))
    def test_kkt_properties(self, seed):
        rng = np.random.default_rng(seed)
        cs = random_instance(rng)
        g, G = cs.proposed, cs.constraint_grads
        res = project(cs)
        eps = default_eps_feas(g)
        # feasibility
        assert np.all(G @ res.projected >= -eps)
        # multipliers nonnegative
        assert np.all(res.multipliers >= 0.0)
        # reconstruction z = G'u + g
        np.testing.assert_allclose(res.projected, G.T @ res.multipliers + g,
                                   atol=1e-8)
        # complementary slackness
        slack = np.abs(res.multipliers * (G @ res.projected))
        assert np.all(slack <= 1e-6 * (1.0 + g @ g))
        # optimality vs oracle
        assert np.linalg.norm(g - res.projected) <= \
            np.linalg.norm(g - oracle_project(cs)) + 1e-6

    def test_correction_in_row_space(self):
        rng = np.random.default_rng(21)
        cs = random_instance(rng, P=32, k=5)
        res = project(cs)
        delta = res.projected - cs.proposed
        G = cs.constraint_grads
        # residual after projecting delta onto the row space of G
        coeff, *_ = np.linalg.lstsq(G.T, delta, rcond=None)
        residual = delta - G.T @ coeff
        assert np.linalg.norm(residual) <= 1e-8

    def test_idempotence(self):
        rng = np.random.default_rng(33)
        for _ in range(20):
            cs = random_instance(rng)
            first = project(cs)
            again = project(ConstraintSet(first.projected, cs.constraint_grads))
            np.testing.assert_allclose(again.projected, first.projected, atol=1e-9)
            assert np.all(again.multipliers == 0.0)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(44)
        cs = random_instance(rng, P=16, k=2)
        res = project(cs)
        for c in (0.01, 3.0, 1e4):
            scaled = ConstraintSet(c * cs.proposed, c * cs.constraint_grads)
            res_c = project(scaled)
            np.testing.assert_allclose(res_c.projected, c * res.projected,
                                       rtol=1e-9, atol=1e-12 * c)

    def test_parallel_constraints_ridge_path(self):
        rng = np.random.default_rng(55)
        base = rng.normal(size=8)
        g = rng.normal(size=8)
        G = np.vstack([base, 2.0 * base])
        cs = ConstraintSet(g, G)
        res = project(cs)
        assert np.all(G @ res.projected >= -default_eps_feas(g))
        z = oracle_project(cs)
        assert abs(np.linalg.norm(g - res.projected)
                   - np.linalg.norm(g - z)) <= 1e-6

    def test_distortion_field(self):
        cs = ConstraintSet(np.array([1.0, -2.0]), np.array([[0.0, 1.0]]))
        res = project(cs)
        assert res.distortion == pytest.approx(2.0, abs=1e-12)

    def test_solver_error_carries_best_iterate(self):
        from grcl.gradproj import _solve_nonneg_qp
        H = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([-1.0, -1.0])
        with pytest.raises(QPSolverError) as err:
            _solve_nonneg_qp(H, b, scale=1.0, max_sweeps=0)
        assert err.value.best_u.shape == (2,)
        assert err.value.residual > 0.0
