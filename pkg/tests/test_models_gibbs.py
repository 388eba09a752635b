"""Gibbs comparators: plain and joint-shrinkage baselines."""

import numpy as np
import pytest

from gradbridge import BridgeProblem, KernelConfig, ParameterLayout, find_posterior_mode, posterior_callables
from gradbridge.models.gibbs import gibbs_baseline
from gradbridge.models.normal_means import NormalMeansModel, normal_means_problem


def intro_toy_problem(tau1=1.0, tau2=1.0, y=1.3):
    """h(beta, z; y) = tau1 (z-beta)^2 + tau2 (y-z)^2 / 2, flat everything else."""
    layout = ParameterLayout((("beta", 1), ("z", 1)))
    return BridgeProblem(
        dim_beta=1,
        dim_z=1,
        log_g=lambda b, z, d: 0.0,
        grad_log_g=lambda b, z, d: np.zeros(2),
        grad_h=lambda b, z, d: np.array([2 * tau1 * (z[0] - b[0]) + tau2 * (z[0] - y)]),
        hess_zz=lambda b, z, d: np.array([[2 * tau1 + tau2]]),
        hess_zbeta=lambda b, z, d: np.array([[-2 * tau1]]),
        log_prior=lambda b: 0.0,
        grad_log_prior=lambda b: np.zeros(1),
        domain_guard=lambda b, z: True,
        layout=layout,
        h=lambda b, z, d: float(tau1 * (z[0] - b[0]) ** 2 + tau2 * (y - z[0]) ** 2 / 2),
        grad_h_beta=lambda b, z, d: np.array([-2 * tau1 * (z[0] - b[0])]),
    )


class TestPlain:
    def test_plain_equals_lambda_zero(self):
        prob = normal_means_problem(NormalMeansModel(tau=1.0, y=np.array([2.0, 0.3])))
        plain = gibbs_baseline(prob, "plain")
        lp_plain, _ = posterior_callables(plain, KernelConfig(lam=50.0))
        lp_base, _ = posterior_callables(prob, KernelConfig(lam=0.0))
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=3)
            assert lp_plain(x) == pytest.approx(lp_base(x), rel=1e-13)

    def test_joint_lambda_zero_equals_plain(self):
        prob = intro_toy_problem()
        plain = gibbs_baseline(prob, "plain")
        joint0 = gibbs_baseline(prob, "joint_shrinkage", lam=0.0)
        lp_a, _ = posterior_callables(plain, KernelConfig(lam=1.0))
        lp_b, _ = posterior_callables(joint0, KernelConfig(lam=1.0))
        x = np.array([0.4, -0.2])
        assert lp_a(x) == lp_b(x)


class TestJointShrinkage:
    def test_intro_toy_mode_at_y(self):
        # joint shrinkage of the two-term loss concentrates at beta = z = y
        y = 1.3
        prob = intro_toy_problem(y=y)
        joint = gibbs_baseline(prob, "joint_shrinkage", lam=50.0)
        logpost, grad = posterior_callables(joint, KernelConfig(lam=0.0))
        res = find_posterior_mode(logpost, grad, np.zeros(2), max_iters=5000, gtol=1e-10)
        assert res.converged
        np.testing.assert_allclose(res.x, [y, y], atol=1e-6)

    def test_bridged_mode_differs_from_joint(self):
        # the gradient-bridged posterior instead peaks at the partial
        # minimizer z = (2 tau1 beta + tau2 y)/(2 tau1 + tau2) for each beta
        prob = intro_toy_problem(y=1.3)
        cfg = KernelConfig(lam=50.0)
        logpost, grad = posterior_callables(prob, cfg)
        beta = np.array([0.5])
        z_grid = np.linspace(-1, 2, 2001)
        vals = [logpost(np.array([beta[0], z])) for z in z_grid]
        z_star = z_grid[int(np.argmax(vals))]
        expected = (2 * 0.5 + 1.3) / 3.0
        assert z_star == pytest.approx(expected, abs=2e-3)

    def test_requires_h(self):
        prob = intro_toy_problem()
        from dataclasses import replace

        with pytest.raises(ValueError):
            gibbs_baseline(replace(prob, h=None), "joint_shrinkage", lam=1.0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            gibbs_baseline(intro_toy_problem(), "other", 1.0)
