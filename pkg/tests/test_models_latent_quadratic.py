"""Latent quadratic dual model: kernel matrix, duality mapping, no inversion."""

import numpy as np
import pytest

from gradbridge import DomainViolation, KernelConfig, check_gradient, grad_log_posterior, log_posterior, posterior_callables
from gradbridge.models.latent_quadratic import (
    LatentQuadraticModel,
    dual_root,
    gaussian_kernel_matrix,
    latent_quadratic_dual,
    latent_quadratic_problem,
    primal_latent_minimizer,
    simulate_latent_binary,
)


class TestKernelMatrix:
    def test_diagonal_equals_tau(self):
        x = np.random.default_rng(0).normal(size=12)
        Q = gaussian_kernel_matrix(x, 2.5, 1.3)
        np.testing.assert_allclose(np.diag(Q), 2.5)

    def test_distance_2b_entry(self):
        b = 0.7
        x = np.array([0.0, np.sqrt(2 * b)])
        Q = gaussian_kernel_matrix(x, 3.0, b)
        assert Q[0, 1] == pytest.approx(3.0 * np.exp(-1.0))

    def test_psd(self):
        x = np.random.default_rng(1).normal(size=(15, 2))
        Q = gaussian_kernel_matrix(x, 1.0, 0.5)
        assert np.linalg.eigvalsh(Q)[0] > -1e-10

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            gaussian_kernel_matrix([0.0], -1.0, 1.0)


class TestDual:
    def test_gradient_matches_fd_n20(self):
        rng = np.random.default_rng(2)
        n = 20
        x, y, _ = simulate_latent_binary(n, seed=5)
        Q = gaussian_kernel_matrix(x, 1.2, 0.9)
        alpha = rng.uniform(0.05, 0.95, size=n) - y
        _, grad = latent_quadratic_dual(alpha, y, Q)
        rep = check_gradient(
            lambda a: latent_quadratic_dual(a, y, Q)[0],
            lambda a: latent_quadratic_dual(a, y, Q)[1],
            alpha,
            rtol=1e-5,
        )
        assert rep.passed, rep.max_rel_err

    def test_boundary_violation(self):
        y = np.array([0.0, 1.0])
        Q = np.eye(2)
        with pytest.raises(DomainViolation):
            latent_quadratic_dual(np.array([1.0, 0.0]), y, Q)

    def test_q_zero_root(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        alpha = dual_root(np.zeros((4, 4)), y)
        np.testing.assert_allclose(alpha + y, 0.5, atol=1e-10)

    def test_dual_root_maps_to_primal_minimizer_n50(self):
        x, y, _ = simulate_latent_binary(50, seed=6)
        Q = gaussian_kernel_matrix(x, 1.1, 0.6) + 1e-8 * np.eye(50)
        alpha_hat = dual_root(Q, y)
        z_dual = -Q @ alpha_hat
        z_primal = primal_latent_minimizer(Q, y)
        assert np.max(np.abs(z_dual - z_primal)) < 1e-4

    def test_strong_duality_values_match(self):
        x, y, _ = simulate_latent_binary(15, seed=7)
        Q = gaussian_kernel_matrix(x, 0.9, 0.8) + 1e-8 * np.eye(15)
        alpha_hat = dual_root(Q, y)
        dual_val, _ = latent_quadratic_dual(alpha_hat, y, Q)
        z = primal_latent_minimizer(Q, y)
        Q_inv = np.linalg.inv(Q)
        primal_val = float(0.5 * z @ Q_inv @ z + np.sum(-y * z + np.logaddexp(0.0, z)))
        assert dual_val == pytest.approx(primal_val, abs=1e-7)


@pytest.fixture(scope="module")
def problem():
    x, y, _ = simulate_latent_binary(16, seed=8)
    return latent_quadratic_problem(LatentQuadraticModel(x=x, y=y))


class TestSamplingModel:
    def test_gradient_check(self, problem):
        logpost, grad = posterior_callables(problem, KernelConfig(lam=1.5))
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = problem.init + 0.3 * rng.standard_normal(problem.init.shape)
            rep = check_gradient(logpost, grad, x, rtol=1e-5)
            assert rep.passed, rep.max_rel_err

    def test_hess_blocks_match_fd(self, problem):
        rng = np.random.default_rng(4)
        x = problem.init + 0.2 * rng.standard_normal(problem.init.shape)
        bvec, w = x[:2], x[2:]
        n = w.shape[0]
        h = 1e-6
        Jz = problem.hess_zz(bvec, w, None)
        for i in range(0, n, 5):
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            fd = (problem.grad_h(bvec, wp, None) - problem.grad_h(bvec, wm, None)) / (2 * h)
            np.testing.assert_allclose(Jz[:, i], fd, rtol=1e-4, atol=1e-7)
        Jb = problem.hess_zbeta(bvec, w, None)
        for i in range(2):
            bp, bm = bvec.copy(), bvec.copy()
            bp[i] += h
            bm[i] -= h
            fd = (problem.grad_h(bp, w, None) - problem.grad_h(bm, w, None)) / (2 * h)
            np.testing.assert_allclose(Jb[:, i], fd, rtol=1e-4, atol=1e-7)

    def test_no_dense_inversion_in_evaluation_path(self, problem, monkeypatch):
        import scipy.linalg

        def forbidden(*args, **kwargs):
            raise AssertionError("dense inversion in the bridged evaluation path")

        for name in ("inv", "solve", "pinv", "lstsq", "cholesky", "tensorsolve"):
            monkeypatch.setattr(np.linalg, name, forbidden)
        for name in ("inv", "solve", "solve_triangular", "cho_factor", "cho_solve", "lu_solve"):
            monkeypatch.setattr(scipy.linalg, name, forbidden)
        cfg = KernelConfig(lam=2.0)
        x = problem.init
        bvec, w = x[:2], x[2:]
        log_posterior(problem, bvec, w, cfg)
        grad_log_posterior(problem, bvec, w, cfg)
        problem.grad_h(bvec, w, None)
        problem.hess_zz(bvec, w, None)
        problem.hess_zbeta(bvec, w, None)

    def test_simulator_determinism(self):
        a = simulate_latent_binary(30, seed=11)
        b = simulate_latent_binary(30, seed=11)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
