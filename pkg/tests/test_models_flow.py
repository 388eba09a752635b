"""Flow model: reparameterization, barrier blocks, mode against the oracle."""

import numpy as np
import pytest

from gradbridge import KernelConfig, check_gradient, posterior_callables
from gradbridge.lp_oracle import max_flow
from gradbridge.models.flow import (
    BUNDLED_BETA0,
    FlowDataset,
    FlowModelParams,
    FlowNetworkSpec,
    barrier_stationary_flows,
    bundled_network,
    conservation_residual,
    flow_problem,
    free_flow_coordinates,
    reparameterize_flows,
    strictly_feasible_free_flows,
)
from gradbridge.sampler import make_rng


def make_dataset(noise_sd=0.5, c_noise_sd=0.5, n_obs=60, seed=99, y_center=None):
    spec = bundled_network()
    beta0 = np.array(BUNDLED_BETA0)
    z0 = max_flow(spec, beta0).flow
    rng = make_rng(seed, 0)
    center = z0 if y_center is None else y_center
    y = center + noise_sd * rng.standard_normal((n_obs, spec.n_edges))
    c = beta0 + c_noise_sd * rng.standard_normal(spec.n_edges)
    return FlowDataset(spec=spec, beta0=beta0, z0=z0, c=c, y=y, noise_sd=noise_sd, c_noise_sd=c_noise_sd, seed=seed)


@pytest.fixture(scope="module")
def problem():
    ds = make_dataset()
    return flow_problem(ds.spec, FlowModelParams(), KernelConfig(lam=100.0), ds)


class TestReparameterization:
    def test_single_path(self):
        spec = FlowNetworkSpec(
            nodes=("s", "a", "t"), source="s", sink="t",
            edges=(("s", "a"), ("a", "t")), designed_capacity=(2.0, 2.0),
        )
        z = reparameterize_flows(spec, np.array([1.7]))
        np.testing.assert_allclose(z, [1.7, 1.7])

    def test_diamond_by_hand(self):
        spec = FlowNetworkSpec(
            nodes=("s", "a", "b", "t"), source="s", sink="t",
            edges=(("s", "a"), ("s", "b"), ("a", "b"), ("a", "t"), ("b", "t")),
            designed_capacity=(2.0, 2.0, 1.0, 1.0, 3.0),
        )
        # free flows z_at=1, z_ab=1, z_bt=3 -> z_sa=2, z_sb=2
        z = reparameterize_flows(spec, np.array([1.0, 1.0, 3.0]))
        np.testing.assert_allclose(z, [2.0, 2.0, 1.0, 1.0, 3.0])
        assert np.all(conservation_residual(spec, z) == 0.0)

    def test_conservation_exactly_zero_100_random(self):
        spec = bundled_network()
        rng = np.random.default_rng(123)
        for _ in range(100):
            free = rng.uniform(-5.0, 5.0, size=5)
            z = reparameterize_flows(spec, free)
            assert np.all(conservation_residual(spec, z) == 0.0)

    def test_free_coordinate_roundtrip(self):
        spec = bundled_network()
        sol = max_flow(spec, np.array(BUNDLED_BETA0))
        rebuilt = reparameterize_flows(spec, free_flow_coordinates(spec, sol.flow))
        np.testing.assert_allclose(rebuilt, sol.flow, atol=1e-12)

    def test_cyclic_elimination_rejected(self):
        # both internal nodes eliminate the edge arriving from the other one
        with pytest.raises(ValueError, match="cyclic"):
            FlowNetworkSpec(
                nodes=("s", "a", "b", "t"), source="s", sink="t",
                edges=(("s", "a"), ("a", "b"), ("b", "a"), ("a", "t"), ("b", "t")),
                designed_capacity=(1.0,) * 5,
                free_edge_map=((("a"), 2), (("b"), 1)),
            )

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            FlowNetworkSpec(nodes=(0, 1, 2), source=0, sink=2, edges=((0, 1),), designed_capacity=(1.0,))


class TestFlowProblem:
    def test_lambda_zero_reduces_to_gaussian_model(self, problem):
        logpost0, _ = posterior_callables(problem, KernelConfig(lam=0.0))
        x = problem.init
        nb = problem.dim_beta
        expected = problem.log_g(x[:nb], x[nb:], problem.data) + problem.log_prior(x[:nb])
        assert logpost0(x) == pytest.approx(expected, rel=1e-12)

    def test_gradient_check_random_interior(self, problem):
        logpost, grad = posterior_callables(problem, KernelConfig(lam=100.0))
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(40):
            x = problem.init + 0.02 * rng.standard_normal(problem.init.shape)
            if not problem.domain_guard(x[: problem.dim_beta], x[problem.dim_beta :]):
                continue
            rep = check_gradient(logpost, grad, x, rtol=1e-5)
            assert rep.passed, rep.max_rel_err
            checked += 1
            if checked == 20:
                break
        assert checked == 20

    def test_hess_zz_symmetric(self, problem):
        x = problem.init
        Jz = problem.hess_zz(x[: problem.dim_beta], x[problem.dim_beta :], None)
        assert np.allclose(Jz, Jz.T, atol=1e-10)

    def test_infeasible_point_guarded(self, problem):
        x = problem.init.copy()
        x[problem.dim_beta :] = 100.0  # exceeds all capacities
        assert not problem.domain_guard(x[: problem.dim_beta], x[problem.dim_beta :])
        logpost, _ = posterior_callables(problem, KernelConfig(lam=1.0))
        assert logpost(x) == -np.inf

    def test_feasible_init(self, problem):
        assert problem.domain_guard(problem.init[: problem.dim_beta], problem.init[problem.dim_beta :])


class TestBarrierOracle:
    def test_barrier_root_strictly_interior(self):
        spec = bundled_network()
        beta0 = np.array(BUNDLED_BETA0)
        zb = barrier_stationary_flows(spec, beta0, 1000.0)
        assert np.all(zb > 0.0)
        assert np.all(beta0 - zb > 0.0)

    def test_posterior_z_mode_matches_barrier_optimum(self):
        # data centered at the barrier optimum with sigma_y -> 0: posterior
        # z-mode lands within 1e-2 per edge of the lp-oracle + interior-point
        # refinement answer
        spec = bundled_network()
        beta0 = np.array(BUNDLED_BETA0)
        zb = barrier_stationary_flows(spec, beta0, 1000.0)
        ds = make_dataset(noise_sd=0.0, c_noise_sd=0.0, n_obs=200, seed=1, y_center=zb)
        cfg = KernelConfig(lam=1000.0)
        prob = flow_problem(spec, FlowModelParams(), cfg, ds)
        bvec = np.concatenate([np.log(beta0), [np.log(1e-4), np.log(0.25)]])

        from gradbridge import grad_log_posterior

        def zgrad(z):
            return grad_log_posterior(prob, bvec, z, cfg)[prob.dim_beta :]

        # damped Newton on the z block with a finite-difference Jacobian
        z = strictly_feasible_free_flows(spec, beta0)
        for _ in range(60):
            g = zgrad(z)
            if np.linalg.norm(g, ord=np.inf) < 1e-8:
                break
            J = np.zeros((5, 5))
            h = 1e-6
            for i in range(5):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                J[:, i] = (zgrad(zp) - zgrad(zm)) / (2 * h)
            step = np.linalg.solve(J, -g)
            t = 1.0
            while t > 1e-10 and not prob.domain_guard(bvec, z + t * step):
                t *= 0.5
            z = z + t * step
        z_full = reparameterize_flows(spec, z)
        assert np.max(np.abs(z_full - zb)) < 1e-2

    def test_strictly_feasible_construction(self):
        spec = bundled_network()
        rng = np.random.default_rng(2)
        for _ in range(10):
            beta = rng.uniform(1.0, 5.0, size=10)
            free = strictly_feasible_free_flows(spec, beta)
            z = reparameterize_flows(spec, free)
            assert np.all(z > 0) and np.all(beta - z > 0)


class TestSerialization:
    def test_spec_json_roundtrip(self, tmp_path):
        spec = bundled_network()
        path = tmp_path / "net.json"
        spec.to_json(path)
        again = FlowNetworkSpec.from_json(path)
        assert again.edges == spec.edges
        assert again.designed_capacity == spec.designed_capacity
        assert again.source == spec.source and again.sink == spec.sink

    def test_dataset_json_roundtrip(self, tmp_path):
        ds = make_dataset(n_obs=7)
        path = tmp_path / "data.json"
        ds.to_json(path)
        again = FlowDataset.from_json(path)
        np.testing.assert_allclose(again.y, ds.y)
        np.testing.assert_allclose(again.c, ds.c)
        np.testing.assert_allclose(again.beta0, ds.beta0)
        assert again.spec.edges == ds.spec.edges
