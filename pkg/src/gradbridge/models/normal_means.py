"""Normal means model: y_i ~ No(z_i, tau), z_i ~ No(0, beta).

Sub-problem loss h(beta, z; y) = ||z-y||^2/(2 tau) + ||z||^2/(2 beta) with
closed-form minimizer zhat = {1 - tau/(tau+beta)} y, which makes this the
fully tractable member of the zoo: the conditional posterior of z given
beta is Gaussian for every shrinkage strength.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from ..bridge import BridgeProblem
from ..layout import ParameterLayout

PRIOR_SCALE = 10.0  # half-normal prior sd for beta in the joint model


@dataclass(frozen=True)
class NormalMeansModel:
    tau: float
    y: np.ndarray

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))


def conditional_z_posterior_params(beta: float, y, tau: float, lam: float):
    """Gaussian conditional of z | beta: mean zhat, per-coordinate variance.

    Precision is a + 2*lam*a^2 with a = 1/tau + 1/beta; lam=0 recovers
    No(zhat, a^{-1}) and the variance shrinks to 0 as lam grows.
    """
    if beta <= 0 or tau <= 0:
        raise ValueError("beta and tau must be positive")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = 1.0 / tau + 1.0 / beta
    mean = (1.0 - tau / (tau + beta)) * y
    variance = 1.0 / (a + 2.0 * lam * a * a)
    return mean, variance


def normal_means_problem(model: NormalMeansModel, fix_beta: float | None = None) -> BridgeProblem:
    """BridgeProblem for the normal means model.

    With fix_beta the variance parameter is pinned (conditional sampling of
    z only); otherwise beta is a free parameter on the log scale with a
    half-normal No+(0, 10^2) prior, Jacobian included.
    """
    tau = model.tau
    y = model.y
    n = y.shape[0]

    if fix_beta is not None:
        if fix_beta <= 0:
            raise ValueError("fix_beta must be positive")
        beta0 = float(fix_beta)
        layout = ParameterLayout((("z", n),))

        def log_g(beta, z, data):
            return float(-np.sum((z - y) ** 2) / (2 * tau) - np.sum(z**2) / (2 * beta0))

        def grad_log_g(beta, z, data):
            return -(z - y) / tau - z / beta0

        def grad_h(beta, z, data):
            return (z - y) / tau + z / beta0

        def hess_zz(beta, z, data):
            return (1.0 / tau + 1.0 / beta0) * np.eye(n)

        def hess_zbeta(beta, z, data):
            return np.zeros((n, 0))

        def h(beta, z, data):
            return float(np.sum((z - y) ** 2) / (2 * tau) + np.sum(z**2) / (2 * beta0))

        zhat = (1.0 - tau / (tau + beta0)) * y
        return BridgeProblem(
            dim_beta=0,
            dim_z=n,
            log_g=log_g,
            grad_log_g=grad_log_g,
            grad_h=grad_h,
            hess_zz=hess_zz,
            hess_zbeta=hess_zbeta,
            log_prior=lambda beta: 0.0,
            grad_log_prior=lambda beta: np.zeros(0),
            domain_guard=lambda beta, z: bool(np.all(np.isfinite(z))),
            layout=layout,
            h=h,
            grad_h_beta=lambda beta, z, data: np.zeros(0),
            refine_z=lambda beta, z0, data: zhat.copy(),
            init=np.zeros(n),
        )

    layout = ParameterLayout((("log_beta", 1), ("z", n)))

    def log_g(bvec, z, data):
        beta = np.exp(bvec[0])
        return float(-np.sum((z - y) ** 2) / (2 * tau) - np.sum(z**2) / (2 * beta) - 0.5 * n * bvec[0])

    def grad_log_g(bvec, z, data):
        beta = np.exp(bvec[0])
        out = np.empty(1 + n)
        out[0] = np.sum(z**2) / (2 * beta) - 0.5 * n
        out[1:] = -(z - y) / tau - z / beta
        return out

    def grad_h(bvec, z, data):
        beta = np.exp(bvec[0])
        return (z - y) / tau + z / beta

    def hess_zz(bvec, z, data):
        beta = np.exp(bvec[0])
        return (1.0 / tau + 1.0 / beta) * np.eye(n)

    def hess_zbeta(bvec, z, data):
        # d grad_h / d log beta = -(z / beta^2) * beta
        beta = np.exp(bvec[0])
        return (-z / beta)[:, None]

    def log_prior(bvec):
        beta = np.exp(bvec[0])
        return float(-(beta**2) / (2 * PRIOR_SCALE**2) + bvec[0])

    def grad_log_prior(bvec):
        beta = np.exp(bvec[0])
        return np.array([-(beta**2) / PRIOR_SCALE**2 + 1.0])

    def h(bvec, z, data):
        beta = np.exp(bvec[0])
        return float(np.sum((z - y) ** 2) / (2 * tau) + np.sum(z**2) / (2 * beta))

    def grad_h_beta(bvec, z, data):
        beta = np.exp(bvec[0])
        return np.array([-np.sum(z**2) / (2 * beta)])

    def refine_z(bvec, z0, data):
        beta = np.exp(bvec[0])
        return (1.0 - tau / (tau + beta)) * y

    beta_init = max(float(np.var(y) - tau), 0.1)
    init = np.concatenate([[np.log(beta_init)], (1.0 - tau / (tau + beta_init)) * y])
    return BridgeProblem(
        dim_beta=1,
        dim_z=n,
        log_g=log_g,
        grad_log_g=grad_log_g,
        grad_h=grad_h,
        hess_zz=hess_zz,
        hess_zbeta=hess_zbeta,
        log_prior=log_prior,
        grad_log_prior=grad_log_prior,
        domain_guard=lambda bvec, z: bool(np.all(np.isfinite(bvec)) and np.all(np.isfinite(z))),
        layout=layout,
        h=h,
        grad_h_beta=grad_h_beta,
        refine_z=refine_z,
        init=init,
    )


def calibration_m(beta: float, tau: float, lam: float) -> float:
    """Marginalization calibration m(beta) = tau beta {tau beta + 2 lam (tau+beta)}^{-1/2}.

    Replacing the per-observation normalizer beta^{-1/2} of the likelihood
    kernel with m(beta)^{-1} makes the one-step marginalization integral
    constant in beta.
    """
    if beta <= 0 or tau <= 0 or lam < 0:
        raise ValueError("need beta, tau > 0 and lam >= 0")
    return float(tau * beta / np.sqrt(tau * beta + 2.0 * lam * (tau + beta)))


def marginalization_integral(beta: float, tau: float, lam: float, calibrated: bool) -> float:
    """Adaptive quadrature of the one-step marginalization integrand.

    Integrates the per-observation likelihood-ratio kernel over the next
    (y, z) pair. With calibrated=True the beta-dependent normalizer is
    m(beta)^{-1}; the result is then constant in beta.
    """
    if calibrated:
        m = calibration_m(beta, tau, lam)
        norm = 1.0 / (np.sqrt(2 * np.pi * tau) * np.sqrt(2 * np.pi) * m)
    else:
        norm = 1.0 / (np.sqrt(2 * np.pi * tau) * np.sqrt(2 * np.pi * beta))

    def integrand(z, y):
        grad = (z - y) / tau + z / beta
        return norm * np.exp(-((y - z) ** 2) / (2 * tau) - z**2 / (2 * beta) - lam * grad**2)

    val, _ = integrate.dblquad(integrand, -np.inf, np.inf, -np.inf, np.inf, epsabs=1e-11, epsrel=1e-9)
    return float(val)
