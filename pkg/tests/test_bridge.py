"""Bridge-core: shrinkage kernel, posterior assembly, barrier wrap, bounds."""

import numpy as np
import pytest
from scipy.optimize import brentq

from gradbridge import (
    BarrierConstraint,
    DomainViolation,
    KernelConfig,
    barrier_wrap,
    check_gradient,
    gauss_newton_root,
    grad_log_posterior,
    log_posterior,
    shrinkage_log_kernel,
    theorem1_bound,
)
from gradbridge.models.normal_means import NormalMeansModel, normal_means_problem


@pytest.fixture(scope="module")
def ex1():
    """Example-1 style problem: tau=1, y=2, beta sampled on log scale."""
    return normal_means_problem(NormalMeansModel(tau=1.0, y=np.array([2.0])))


@pytest.fixture(scope="module")
def ex1_fixed():
    return normal_means_problem(NormalMeansModel(tau=1.0, y=np.array([2.0])), fix_beta=1.0)


class TestShrinkageKernel:
    def test_zero_at_minimizer(self, ex1_fixed):
        # zhat = {1 - tau/(tau+beta)} y = 1 at tau=beta=1, y=2
        val = shrinkage_log_kernel(ex1_fixed, np.array([]), np.array([1.0]), KernelConfig(lam=1.0))
        assert val == pytest.approx(0.0, abs=1e-14)

    def test_lambda_zero_disables(self, ex1_fixed):
        val = shrinkage_log_kernel(ex1_fixed, np.array([]), np.array([0.3]), KernelConfig(lam=0.0))
        assert val == 0.0

    def test_z0_value(self, ex1_fixed):
        # grad_h = (z-y)/tau + z/beta = -2 at z=0 -> kernel = -lambda * 4
        val = shrinkage_log_kernel(ex1_fixed, np.array([]), np.array([0.0]), KernelConfig(lam=1.0))
        assert val == pytest.approx(-4.0, rel=1e-12)

    def test_nonpositive_and_monotone_in_lambda(self, ex1_fixed):
        rng = np.random.default_rng(0)
        for _ in range(25):
            z = rng.normal(size=1) * 3
            prev = 0.0
            for lam in (0.0, 0.5, 1.0, 5.0, 50.0):
                v = shrinkage_log_kernel(ex1_fixed, np.array([]), z, KernelConfig(lam=lam))
                assert v <= 0.0
                assert v <= prev + 1e-15
                prev = v

    def test_lambda_additivity(self, ex1_fixed):
        z = np.array([0.7])
        k = lambda lam: shrinkage_log_kernel(ex1_fixed, np.array([]), z, KernelConfig(lam=lam))
        assert k(1.3) + k(2.4) == pytest.approx(k(3.7), rel=1e-12)

    def test_purity(self, ex1):
        beta, z = np.array([0.2]), np.array([0.6])
        cfg = KernelConfig(lam=2.0)
        assert shrinkage_log_kernel(ex1, beta, z, cfg) == shrinkage_log_kernel(ex1, beta, z, cfg)


class TestLogPosterior:
    def test_lambda_zero_is_g_plus_prior(self, ex1):
        beta, z = np.array([0.1]), np.array([1.4])
        lp0 = log_posterior(ex1, beta, z, KernelConfig(lam=0.0))
        expected = ex1.log_g(beta, z, ex1.data) + ex1.log_prior(beta)
        assert lp0 == pytest.approx(expected, rel=1e-12)

    def test_example1_quadratic_form_differences(self, ex1_fixed):
        # displayed conditional: -(a/2)||z-zhat||^2 - lambda a^2 ||z-zhat||^2, a = 1/tau + 1/beta
        tau = beta = 1.0
        a = 1.0 / tau + 1.0 / beta
        zhat = (1.0 - tau / (tau + beta)) * 2.0
        lam = 3.0
        cfg = KernelConfig(lam=lam)
        disp = lambda z: -0.5 * a * (z - zhat) ** 2 - lam * a * a * (z - zhat) ** 2
        for z, zp in [(0.3, 1.9), (-1.0, 0.5), (2.5, 1.0)]:
            lhs = log_posterior(ex1_fixed, np.array([]), np.array([z]), cfg) - log_posterior(
                ex1_fixed, np.array([]), np.array([zp]), cfg
            )
            assert lhs == pytest.approx(disp(z) - disp(zp), rel=1e-10)

    def test_domain_violation_returns_neg_inf(self, ex1_fixed):
        bad = np.array([np.nan])
        assert log_posterior(ex1_fixed, np.array([]), bad, KernelConfig()) == -np.inf

    def test_grad_kernel_zero_at_minimizer(self, ex1_fixed):
        cfg = KernelConfig(lam=7.0)
        g_on = grad_log_posterior(ex1_fixed, np.array([]), np.array([1.0]), cfg)
        g_off = grad_log_posterior(ex1_fixed, np.array([]), np.array([1.0]), KernelConfig(lam=0.0))
        np.testing.assert_allclose(g_on, g_off, atol=1e-13)


class TestBarrierWrap:
    def test_no_constraints_identity(self):
        base = lambda z: np.array([1.5 * z[0]])
        wrapped = barrier_wrap(base, [], t=1000.0)
        np.testing.assert_allclose(wrapped.grad_h(np.array([0.4])), base(np.array([0.4])))

    def test_single_constraint_value(self):
        # r(z) = z, base gradient 0, t=1000, z=0.5 -> -(1/1000)/0.5 = -0.002
        c = BarrierConstraint(r=lambda z: float(z[0]), grad_r=lambda z: np.array([1.0]))
        wrapped = barrier_wrap(lambda z: np.array([0.0]), [c], t=1000.0)
        assert wrapped.grad_h(np.array([0.5]))[0] == pytest.approx(-0.002, rel=1e-12)

    def test_interior_root_of_linear_objective(self):
        # h_tilde(z) = -z on (0, 1), t=1000: root at z = t/(t+1) = 0.999001...
        t = 1000.0
        cs = [
            BarrierConstraint(r=lambda z: float(z[0]), grad_r=lambda z: np.array([1.0])),
            BarrierConstraint(r=lambda z: 1.0 - float(z[0]), grad_r=lambda z: np.array([-1.0])),
        ]
        wrapped = barrier_wrap(lambda z: np.array([-1.0]), cs, t=t)
        root = brentq(lambda z: wrapped.grad_h(np.array([z]))[0], 0.5, 1 - 1e-12, xtol=1e-14)
        assert root == pytest.approx(0.999000999999, abs=1e-9)
        assert 0.0 < root < 1.0

    def test_wrapped_hessian_matches_fd(self):
        t = 50.0
        cs = [
            BarrierConstraint(r=lambda z: float(z[0]), grad_r=lambda z: np.array([1.0, 0.0])),
            BarrierConstraint(
                r=lambda z: 4.0 - float(z[0] ** 2 + z[1] ** 2),
                grad_r=lambda z: np.array([-2.0 * z[0], -2.0 * z[1]]),
                hess_r=lambda z: -2.0 * np.eye(2),
            ),
        ]
        base_g = lambda z: np.array([2.0 * z[0], -1.0])
        base_h = lambda z: np.array([[2.0, 0.0], [0.0, 0.0]])
        wrapped = barrier_wrap(base_g, cs, t=t, base_hess_zz=base_h)
        z0 = np.array([0.7, -0.4])
        H = wrapped.hess_zz(z0)
        fd = np.zeros((2, 2))
        h = 1e-6
        for i in range(2):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += h
            zm[i] -= h
            fd[:, i] = (wrapped.grad_h(zp) - wrapped.grad_h(zm)) / (2 * h)
        np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-8)

    def test_infeasible_raises(self):
        c = BarrierConstraint(r=lambda z: float(z[0]), grad_r=lambda z: np.array([1.0]))
        wrapped = barrier_wrap(lambda z: np.array([0.0]), [c], t=10.0)
        with pytest.raises(DomainViolation):
            wrapped.grad_h(np.array([-0.1]))


class TestCheckGradient:
    def test_exact_quadratic_passes_tight(self):
        A = np.array([[2.0, 0.3], [0.3, 1.0]])
        f = lambda x: 0.5 * x @ A @ x
        g = lambda x: A @ x
        rep = check_gradient(f, g, np.array([0.4, -1.2]), step=1e-6, rtol=1e-8)
        assert rep.passed

    def test_perturbed_gradient_fails(self):
        A = np.eye(2)
        f = lambda x: 0.5 * x @ A @ x
        g = lambda x: A @ x + 1e-2
        rep = check_gradient(f, g, np.array([0.4, -1.2]), rtol=1e-5)
        assert not rep.passed

    def test_untestable_coordinate_marked(self):
        def f(x):
            if abs(x[0]) > 0.5:
                raise ValueError("outside")
            return float(x[0] ** 2 + x[1] ** 2)

        rep = check_gradient(f, lambda x: 2 * x, np.array([0.5, 0.0]), step=1e-2)
        assert rep.n_untestable >= 1


class TestTheorem1Bound:
    def test_eps_zero(self):
        assert theorem1_bound(np.eye(3), k=0.5, eps=0.0) == 0.0

    def test_identity(self):
        assert theorem1_bound(np.eye(4), k=0.0, eps=0.3) == pytest.approx(0.3)

    def test_example1_hessian(self):
        # H = (1/tau + 1/beta) I = 2I at tau=beta=1; eps=0.1 -> 0.05; matches
        # closed-form inversion ||z - zhat|| = eps / (1/tau + 1/beta)
        H = 2.0 * np.eye(5)
        assert theorem1_bound(H, k=0.0, eps=0.1) == pytest.approx(0.05)
        eps = 0.1
        rng = np.random.default_rng(1)
        zhat = rng.normal(size=5)
        g = rng.normal(size=5)
        g *= eps / np.linalg.norm(g)
        z = zhat + np.linalg.solve(H, g)
        assert np.linalg.norm(z - zhat) == pytest.approx(eps / 2.0, rel=1e-12)

    def test_argument_errors(self):
        with pytest.raises(ValueError):
            theorem1_bound(-np.eye(2), k=0.0, eps=0.1)
        with pytest.raises(ValueError):
            theorem1_bound(np.eye(2), k=1.0, eps=0.1)

    def test_quadratic_bound_holds_on_random_draws(self):
        # constant Hessian => k = 0 exactly; 1000 random z with ||grad|| <= eps
        rng = np.random.default_rng(7)
        A = rng.normal(size=(4, 4))
        H = A @ A.T + 0.5 * np.eye(4)
        lam_min = np.linalg.eigvalsh(H)[0]
        zhat = rng.normal(size=4)
        eps = 0.3
        bound = theorem1_bound(H, k=0.0, eps=eps)
        assert bound == pytest.approx(eps / lam_min, rel=1e-12)
        ok = 0
        for _ in range(1000):
            g = rng.normal(size=4)
            g *= eps * rng.random() ** 0.25 / np.linalg.norm(g)
            z = zhat + np.linalg.solve(H, g)
            assert np.linalg.norm(H @ (z - zhat)) <= eps + 1e-12
            ok += np.linalg.norm(z - zhat) <= bound + 1e-12
        assert ok == 1000


class TestGaussNewtonRoot:
    def test_linear_system(self):
        A = np.array([[3.0, 1.0], [0.0, 2.0]])
        b = np.array([1.0, -2.0])
        res = gauss_newton_root(lambda x: A @ x - b, lambda x: A, np.zeros(2))
        assert res.converged
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-9)

    def test_respects_guard(self):
        # root of log(x) = 0 at x=1 with positivity guard
        res = gauss_newton_root(
            lambda x: np.array([np.log(x[0])]),
            lambda x: np.array([[1.0 / x[0]]]),
            np.array([5.0]),
            guard=lambda x: x[0] > 0,
        )
        assert res.converged
        assert res.x[0] == pytest.approx(1.0, rel=1e-8)
