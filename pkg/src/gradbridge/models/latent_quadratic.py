"""Latent quadratic model in dual form.

Binary responses with a latent Gaussian field z ~ No(0, Q(beta; x)),
Q_ij = tau exp(-||x_i - x_j||^2 / (2b)). Variable splitting gives the dual

    hdag(beta, alpha; y) = -1/2 alpha^T Q alpha
        - sum_i [(a_i+y_i) log(a_i+y_i) + (1-a_i-y_i) log(1-a_i-y_i)]

over alpha with alpha_i + y_i in (0,1), whose gradient -Q alpha -
log(alpha+y) + log(1-alpha-y) never touches Q^{-1}. Strong duality maps the
dual root back to the primal minimizer through z = -Q alpha.

Sampling coordinates: alpha goes through the logit-type transform
alpha + y = sigmoid(w) (Jacobian folded into log_g), tau and b on the log
scale with inverse-gamma(2, 0.1) priors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bridge import BridgeProblem, DomainViolation, gauss_newton_root
from ..layout import ParameterLayout

PRIOR_SHAPE, PRIOR_SCALE = 2.0, 0.1  # inverse-gamma prior on tau and b


def gaussian_kernel_matrix(x, tau_k: float, b: float) -> np.ndarray:
    """n x n covariance Q_ij = tau exp(-||x_i-x_j||^2/(2b))."""
    if tau_k <= 0 or b <= 0:
        raise ValueError("tau and b must be positive")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    return tau_k * np.exp(-sq / (2.0 * b))


def _sq_dists(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)


def latent_quadratic_dual(alpha, y, Q):
    """Dual objective and its gradient at alpha (requires alpha+y in (0,1))."""
    alpha = np.asarray(alpha, dtype=float)
    y = np.asarray(y, dtype=float)
    a = alpha + y
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise DomainViolation("alpha", "alpha + y must lie in (0,1)")
    Qa = Q @ alpha
    value = float(-0.5 * alpha @ Qa - np.sum(a * np.log(a) + (1 - a) * np.log(1 - a)))
    grad = -Qa - np.log(a) + np.log(1 - a)
    return value, grad


def dual_root(Q, y, tol: float = 1e-11) -> np.ndarray:
    """Root of the dual gradient (the dual maximizer), by damped Gauss-Newton."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]

    def residual(alpha):
        return latent_quadratic_dual(alpha, y, Q)[1]

    def jac(alpha):
        a = alpha + y
        return -Q - np.diag(1.0 / a + 1.0 / (1.0 - a))

    def guard(alpha):
        a = alpha + y
        return bool(np.all(a > 0) and np.all(a < 1))

    res = gauss_newton_root(residual, jac, 0.5 - y, tol=tol, max_iters=300, guard=guard)
    if not res.converged:
        raise RuntimeError(f"dual root solve failed (|r|={res.residual_norm:.3g})")
    return res.x


def primal_latent_minimizer(Q, y, tol: float = 1e-8) -> np.ndarray:
    """Independent primal oracle: damped Newton descent on
    h(z) = 1/2 z^T Q^{-1} z + sum_i [-y_i z_i + log(1+e^{z_i})].

    Test-side only; deliberately uses the dense inverse the dual path
    avoids. Ill-conditioned kernels floor the achievable gradient norm, so
    the solve stops at tol or at numerical stall, whichever comes first.
    """
    y = np.asarray(y, dtype=float)
    Q_inv = np.linalg.inv(Q)
    z = np.zeros_like(y)

    def h(z):
        return float(0.5 * z @ Q_inv @ z + np.sum(-y * z + np.logaddexp(0.0, z)))

    val = h(z)
    gn = np.inf
    for _ in range(200):
        sig = 1.0 / (1.0 + np.exp(-z))
        g = Q_inv @ z - y + sig
        gn = float(np.linalg.norm(g, ord=np.inf))
        if gn <= tol:
            return z
        H = Q_inv + np.diag(sig * (1 - sig))
        step = np.linalg.solve(H, -g)
        t = 1.0
        z_new, val_new = z + step, h(z + step)
        while t > 1e-12 and not (np.isfinite(val_new) and val_new < val):
            t *= 0.5
            z_new, val_new = z + t * step, h(z + t * step)
        if not (np.isfinite(val_new) and val_new < val):
            break  # numerical stall
        z, val = z_new, val_new
    if gn > 1e-3:
        raise RuntimeError(f"primal Newton stalled far from stationarity (|g|={gn:.3g})")
    return z


@dataclass(frozen=True)
class LatentQuadraticModel:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("responses must be binary")
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y length mismatch")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]


def latent_quadratic_problem(model: LatentQuadraticModel) -> BridgeProblem:
    """BridgeProblem in dual form; no evaluation touches Q^{-1}.

    The identity log(a) - log(1-a) = w for a = sigmoid(w) collapses the
    dual gradient to -Q alpha - w in the sampled coordinates.
    """
    n = model.n
    y = model.y
    D = _sq_dists(model.x)
    layout = ParameterLayout((("log_tau", 1), ("log_b", 1), ("w", n)), z_block="w")

    def kernel_mats(bvec):
        tau, b = np.exp(bvec[0]), np.exp(bvec[1])
        Q = tau * np.exp(-D / (2.0 * b))
        return tau, b, Q

    def alpha_of(w):
        sig = 1.0 / (1.0 + np.exp(-w))
        return sig - y, sig

    def log_g(bvec, w, data):
        _, _, Q = kernel_mats(bvec)
        alpha, sig = alpha_of(w)
        Qa = Q @ alpha
        z = -Qa
        val = -0.5 * float(alpha @ Qa)
        val += float(np.sum(y * z - np.logaddexp(0.0, z)))
        val += float(np.sum(np.log(sig) + np.log1p(-sig)))  # w -> alpha Jacobian
        return val

    def grad_log_g(bvec, w, data):
        _, b, Q = kernel_mats(bvec)
        alpha, sig = alpha_of(w)
        Qa = Q @ alpha
        z = -Qa
        resid_y = y - 1.0 / (1.0 + np.exp(-z))
        Mb = Q * (D / (2.0 * b))
        out = np.empty(2 + n)
        out[0] = -0.5 * float(alpha @ Qa) - float(resid_y @ Qa)
        out[1] = -0.5 * float(alpha @ (Mb @ alpha)) - float(resid_y @ (Mb @ alpha))
        d_alpha = -Qa - Q @ resid_y
        out[2:] = sig * (1 - sig) * d_alpha + (1.0 - 2.0 * sig)
        return out

    def grad_h(bvec, w, data):
        _, _, Q = kernel_mats(bvec)
        alpha, _ = alpha_of(w)
        return -Q @ alpha - w

    def hess_zz(bvec, w, data):
        _, _, Q = kernel_mats(bvec)
        _, sig = alpha_of(w)
        return -Q * (sig * (1 - sig))[None, :] - np.eye(n)

    def hess_zbeta(bvec, w, data):
        _, b, Q = kernel_mats(bvec)
        alpha, _ = alpha_of(w)
        out = np.empty((n, 2))
        out[:, 0] = -Q @ alpha
        out[:, 1] = -(Q * (D / (2.0 * b))) @ alpha
        return out

    def log_prior(bvec):
        tau, b = np.exp(bvec[0]), np.exp(bvec[1])
        return float(
            -PRIOR_SHAPE * bvec[0] - PRIOR_SCALE / tau - PRIOR_SHAPE * bvec[1] - PRIOR_SCALE / b
        )

    def grad_log_prior(bvec):
        tau, b = np.exp(bvec[0]), np.exp(bvec[1])
        return np.array([-PRIOR_SHAPE + PRIOR_SCALE / tau, -PRIOR_SHAPE + PRIOR_SCALE / b])

    off = D[~np.eye(n, dtype=bool)]
    b0 = max(float(np.median(off)) / 2.0, 1e-2) if off.size else 1.0
    init = np.concatenate([[0.0, np.log(b0)], np.zeros(n)])

    return BridgeProblem(
        dim_beta=2,
        dim_z=n,
        log_g=log_g,
        grad_log_g=grad_log_g,
        grad_h=grad_h,
        hess_zz=hess_zz,
        hess_zbeta=hess_zbeta,
        log_prior=log_prior,
        grad_log_prior=grad_log_prior,
        domain_guard=lambda bvec, w: bool(np.all(np.isfinite(bvec)) and np.all(np.isfinite(w))),
        layout=layout,
        data=None,
        init=init,
    )


def simulate_latent_binary(n: int, seed: int, x_range=(-6.0, 6.0), n_knots: int = 20, z_range=(-3.0, 3.0)):
    """Spline ground truth: knots evenly spaced with uniform heights, binary
    draws through the logistic link at uniform locations."""
    from scipy.interpolate import CubicSpline

    from ..sampler import make_rng

    rng = make_rng(seed, stream=23)
    x = np.sort(rng.uniform(x_range[0], x_range[1], size=n))
    knots = np.linspace(x_range[0], x_range[1], n_knots)
    heights = rng.uniform(z_range[0], z_range[1], size=n_knots)
    z_true = CubicSpline(knots, heights)(x)
    p = 1.0 / (1.0 + np.exp(-z_true))
    y = (rng.random(n) < p).astype(float)
    return x, y, z_true
