"""Gradient-bridged posterior assembly.

A gradient-bridged posterior over (beta, z) combines a likelihood kernel g,
a prior on beta, and a shrinkage kernel exp(-lambda * ||grad_z h||^2) built
from the partial gradient of a differentiable sub-problem loss h(beta, z; y).
The kernel concentrates posterior mass near first-order stationary points
z ~ zhat_beta = argmin_z h without ever solving the sub-problem inside the
sampler.

Models supply analytic derivative blocks:

    grad_h      residual vector being shrunk (grad_z h, or a dual gradient)
    hess_zz     d(grad_h)/dz       (the z-z Hessian block for primal models)
    hess_zbeta  d(grad_h)/dbeta

All evaluators are pure functions of (beta, z, data) in the *sampled*
coordinates; transformed parameters carry their Jacobians inside the model's
log_g / log_prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from .layout import ParameterLayout

Array = np.ndarray

NEG_INF = float("-inf")


class DomainViolation(Exception):
    """Raised when an evaluation point leaves the open feasible region."""

    def __init__(self, block: str, message: str = ""):
        self.block = block
        super().__init__(message or f"domain violation in block {block!r}")


@dataclass(frozen=True)
class KernelConfig:
    """Shrinkage-kernel hyperparameters.

    lam is the shrinkage strength (lambda >= 0); barrier_t the log-barrier
    scale used when a loss needs interior-point adjustment.
    """

    lam: float = 100.0
    barrier_t: float = 1000.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.barrier_t <= 0:
            raise ValueError("barrier_t must be positive")


@dataclass(frozen=True)
class BarrierConstraint:
    """One inequality constraint r(z) >= 0, feasible iff r(z) > 0.

    hess_r is the constraint Hessian map; None means affine (zero curvature).
    """

    r: Callable[[Array], float]
    grad_r: Callable[[Array], Array]
    hess_r: Optional[Callable[[Array], Array]] = None


@dataclass(frozen=True)
class BridgeProblem:
    """Evaluable pieces of one gradient-bridged model.

    dim_k is the residual length; it equals dim_z for primal models and may
    differ for dual-form kernels. `h` (scalar loss) and `grad_h_beta` are
    optional and only required by the joint-shrinkage Gibbs comparator and
    finite-difference tests. `grad_kernel` optionally overrides the generic
    Jacobian-transpose assembly of grad ||grad_h||^2 with a closed form.
    `refine_z` optionally maps (beta, z0, data) to the sub-problem stationary
    point; used when freezing the mass matrix.
    """

    dim_beta: int
    dim_z: int
    log_g: Callable[[Array, Array, Any], float]
    grad_log_g: Callable[[Array, Array, Any], Array]
    grad_h: Callable[[Array, Array, Any], Array]
    hess_zz: Callable[[Array, Array, Any], Array]
    hess_zbeta: Callable[[Array, Array, Any], Array]
    log_prior: Callable[[Array], float]
    grad_log_prior: Callable[[Array], Array]
    domain_guard: Callable[[Array, Array], bool]
    layout: ParameterLayout
    data: Any = None
    dim_k: int = -1
    h: Optional[Callable[[Array, Array, Any], float]] = None
    grad_h_beta: Optional[Callable[[Array, Array, Any], Array]] = None
    grad_kernel: Optional[Callable[[Array, Array, Any], Array]] = None
    refine_z: Optional[Callable[[Array, Array, Any], Array]] = None
    fused_logpost_grad: Optional[Callable[[Array, Array, Any, float], tuple]] = None
    init: Optional[Array] = None

    def __post_init__(self):
        if self.dim_k < 0:
            object.__setattr__(self, "dim_k", self.dim_z)
        if self.layout.dim_beta != self.dim_beta or self.layout.dim_z != self.dim_z:
            raise ValueError("layout dims do not match dim_beta/dim_z")

    def resolve_data(self, data):
        return self.data if data is None else data

    def with_data(self, data) -> "BridgeProblem":
        return replace(self, data=data)


def shrinkage_log_kernel(problem: BridgeProblem, beta: Array, z: Array, cfg: KernelConfig, data=None) -> float:
    """log of the shrinkage kernel, -lambda * ||grad_h||^2 (always <= 0)."""
    data = problem.resolve_data(data)
    if not problem.domain_guard(beta, z):
        raise DomainViolation(problem.layout.z_block)
    if cfg.lam == 0.0:
        return 0.0
    r = problem.grad_h(beta, z, data)
    return -cfg.lam * float(np.dot(r, r))


def log_posterior(problem: BridgeProblem, beta: Array, z: Array, cfg: KernelConfig, data=None) -> float:
    """log g + shrinkage kernel + log prior, up to an additive constant.

    Domain violations return -inf (the sampler treats that as a rejected
    state) instead of raising.
    """
    data = problem.resolve_data(data)
    if not problem.domain_guard(beta, z):
        return NEG_INF
    val = problem.log_g(beta, z, data) + problem.log_prior(beta)
    if cfg.lam != 0.0:
        r = problem.grad_h(beta, z, data)
        val -= cfg.lam * float(np.dot(r, r))
    return float(val)


def grad_log_posterior(problem: BridgeProblem, beta: Array, z: Array, cfg: KernelConfig, data=None) -> Array:
    """Gradient of log_posterior over the (beta, z) layout.

    Kernel part is -2 lambda [hess_zbeta, hess_zz]^T grad_h, which stays
    numerically stable as ||grad_h|| -> 0.
    """
    data = problem.resolve_data(data)
    if not problem.domain_guard(beta, z):
        raise DomainViolation(problem.layout.z_block)
    nb = problem.dim_beta
    out = np.asarray(problem.grad_log_g(beta, z, data), dtype=float).copy()
    if nb:
        out[:nb] += problem.grad_log_prior(beta)
    if cfg.lam != 0.0 and problem.dim_k:
        if problem.grad_kernel is not None:
            out -= cfg.lam * problem.grad_kernel(beta, z, data)
        else:
            r = problem.grad_h(beta, z, data)
            if nb:
                out[:nb] -= 2.0 * cfg.lam * (problem.hess_zbeta(beta, z, data).T @ r)
            out[nb:] -= 2.0 * cfg.lam * (problem.hess_zz(beta, z, data).T @ r)
    return out


def posterior_callables(problem: BridgeProblem, cfg: KernelConfig):
    """(logpost, grad) closures over flat parameter vectors for the sampler."""
    nb = problem.dim_beta

    def logpost(vec: Array) -> float:
        return log_posterior(problem, vec[:nb], vec[nb:], cfg)

    def grad(vec: Array) -> Array:
        return grad_log_posterior(problem, vec[:nb], vec[nb:], cfg)

    return logpost, grad


def posterior_value_and_grad(problem: BridgeProblem, cfg: KernelConfig):
    """Fused (logpost, grad) evaluation over flat vectors.

    Uses the model's hand-fused implementation when provided (sharing the
    expensive intermediates), otherwise composes the two generic calls.
    Returns (-inf, None) outside the domain.
    """
    nb = problem.dim_beta
    if problem.fused_logpost_grad is not None:
        fused = problem.fused_logpost_grad
        data = problem.data

        def value_and_grad(vec: Array):
            return fused(vec[:nb], vec[nb:], data, cfg.lam)

        return value_and_grad

    def value_and_grad(vec: Array):
        beta, z = vec[:nb], vec[nb:]
        if not problem.domain_guard(beta, z):
            return NEG_INF, None
        return (
            log_posterior(problem, beta, z, cfg),
            grad_log_posterior(problem, beta, z, cfg),
        )

    return value_and_grad


@dataclass(frozen=True)
class BarrierWrapped:
    """Gradient (and optional Hessian) of h_tilde - (1/t) sum_j log r_j."""

    grad_h: Callable[[Array], Array]
    hess_zz: Optional[Callable[[Array], Array]] = None


def barrier_wrap(
    base_grad_h: Callable[[Array], Array],
    constraints: list[BarrierConstraint],
    t: float,
    base_hess_zz: Optional[Callable[[Array], Array]] = None,
) -> BarrierWrapped:
    """Compose a gradient map with log-barrier terms for constraints r_j(z) >= 0.

    Wrapped gradient: grad h_tilde - (1/t) sum_j grad r_j / r_j. The wrapped
    Hessian adds (1/t) sum_j [grad r_j grad r_j^T / r_j^2 - hess r_j / r_j]
    (hess r_j is zero for affine constraints). Any r_j(z) <= 0 raises.
    """
    if t <= 0:
        raise ValueError("barrier scale t must be positive")

    def _values(z):
        vals = []
        for j, c in enumerate(constraints):
            rv = float(c.r(z))
            if rv <= 0.0:
                raise DomainViolation("z", f"constraint {j} nonpositive: r(z)={rv}")
            vals.append(rv)
        return vals

    def wrapped_grad(z: Array) -> Array:
        g = np.atleast_1d(np.asarray(base_grad_h(z), dtype=float)).copy()
        for c, rv in zip(constraints, _values(z)):
            g -= np.atleast_1d(np.asarray(c.grad_r(z), dtype=float)) / (t * rv)
        return g

    def wrapped_hess(z: Array) -> Array:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        d = z.shape[0]
        H = np.zeros((d, d)) if base_hess_zz is None else np.array(base_hess_zz(z), dtype=float)
        for c, rv in zip(constraints, _values(z)):
            gr = np.atleast_1d(np.asarray(c.grad_r(z), dtype=float))
            H += np.outer(gr, gr) / (t * rv * rv)
            if c.hess_r is not None:
                H -= np.asarray(c.hess_r(z), dtype=float) / (t * rv)
        return H

    return BarrierWrapped(grad_h=wrapped_grad, hess_zz=wrapped_hess)


@dataclass
class CoordinateCheck:
    index: int
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    ok: bool
    testable: bool = True


@dataclass
class GradientCheckReport:
    coords: list[CoordinateCheck]
    rtol: float
    step: float

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.coords if c.testable)

    @property
    def max_rel_err(self) -> float:
        errs = [c.rel_err for c in self.coords if c.testable]
        return max(errs) if errs else float("nan")

    @property
    def n_untestable(self) -> int:
        return sum(not c.testable for c in self.coords)


def check_gradient(
    f: Callable[[Array], float],
    g: Callable[[Array], Array],
    point: Array,
    step: float = 1e-6,
    rtol: float = 1e-5,
    atol: float = 1e-8,
) -> GradientCheckReport:
    """Central-difference comparison of an analytic gradient, per coordinate.

    Step for coordinate i is step * (1 + |x_i|). Coordinates whose perturbed
    evaluations fail (exception or non-finite f) are marked untestable.
    """
    point = np.asarray(point, dtype=float)
    analytic = np.atleast_1d(np.asarray(g(point), dtype=float))
    coords = []
    for i in range(point.shape[0]):
        hi = step * (1.0 + abs(point[i]))
        xp, xm = point.copy(), point.copy()
        xp[i] += hi
        xm[i] -= hi
        try:
            fp, fm = float(f(xp)), float(f(xm))
            testable = np.isfinite(fp) and np.isfinite(fm)
        except Exception:
            fp = fm = float("nan")
            testable = False
        if testable:
            num = (fp - fm) / (2.0 * hi)
            a = float(analytic[i])
            abs_err = abs(a - num)
            rel_err = abs_err / max(abs(a), abs(num), atol)
            ok = abs_err <= atol + rtol * max(abs(a), abs(num))
        else:
            num, abs_err, rel_err, ok = float("nan"), float("nan"), float("nan"), False
        coords.append(CoordinateCheck(i, float(analytic[i]), num, abs_err, rel_err, ok, testable))
    return GradientCheckReport(coords=coords, rtol=rtol, step=step)


def theorem1_bound(hess_at_opt: Array, k: float, eps: float) -> float:
    """Displacement bound eps / ((1-k) * lambda_min(H)) for ||grad_z h|| <= eps.

    H must be the symmetric positive-definite z-Hessian at the minimizer and
    0 <= k < 1 the Hessian-neighborhood contraction constant.
    """
    H = np.asarray(hess_at_opt, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or not np.allclose(H, H.T, atol=1e-10):
        raise ValueError("hess_at_opt must be a symmetric square matrix")
    if not 0.0 <= k < 1.0:
        raise ValueError("k must satisfy 0 <= k < 1")
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    lam_min = float(np.linalg.eigvalsh(H)[0])
    if lam_min <= 0.0:
        raise ValueError("hess_at_opt must be positive definite")
    return eps / ((1.0 - k) * lam_min)


@dataclass
class RootResult:
    x: Array
    residual_norm: float
    converged: bool
    n_iters: int


def gauss_newton_root(
    residual: Callable[[Array], Array],
    jacobian: Callable[[Array], Array],
    x0: Array,
    tol: float = 1e-10,
    max_iters: int = 200,
    guard: Optional[Callable[[Array], bool]] = None,
) -> RootResult:
    """Damped Gauss-Newton (Levenberg-Marquardt) solve of residual(x) = 0.

    Used to polish sub-problem stationary points; handles the stiff barrier
    Jacobians where plain gradient steps stall. `guard` rejects steps outside
    the open feasible region (step halving).
    """
    x = np.asarray(x0, dtype=float).copy()
    r = np.atleast_1d(np.asarray(residual(x), dtype=float))
    best = 0.5 * float(np.dot(r, r))
    mu = 1e-8
    it = 0
    for it in range(1, max_iters + 1):
        nrm = float(np.linalg.norm(r, ord=np.inf))
        if nrm <= tol:
            return RootResult(x, nrm, True, it - 1)
        J = np.atleast_2d(np.asarray(jacobian(x), dtype=float))
        A = J.T @ J
        g = J.T @ r
        step_ok = False
        for _ in range(40):
            try:
                delta = np.linalg.solve(A + mu * np.eye(A.shape[0]), -g)
            except np.linalg.LinAlgError:
                mu = max(mu * 10.0, 1e-10)
                continue
            x_new = x + delta
            if guard is not None and not guard(x_new):
                mu = max(mu * 10.0, 1e-10)
                continue
            try:
                r_new = np.atleast_1d(np.asarray(residual(x_new), dtype=float))
            except DomainViolation:
                mu = max(mu * 10.0, 1e-10)
                continue
            obj_new = 0.5 * float(np.dot(r_new, r_new))
            if np.isfinite(obj_new) and obj_new < best:
                x, r, best = x_new, r_new, obj_new
                mu = max(mu * 0.3, 1e-12)
                step_ok = True
                break
            mu = max(mu * 10.0, 1e-10)
        if not step_ok:
            break
    return RootResult(x, float(np.linalg.norm(r, ord=np.inf)), float(np.linalg.norm(r, ord=np.inf)) <= tol, it)


def refine_subproblem(problem: BridgeProblem, beta: Array, z0: Array, data=None, tol: float = 1e-9) -> Array:
    """Stationary point of the sub-problem residual at fixed beta.

    Dispatches to the model's closed form when provided, otherwise runs the
    Gauss-Newton root solve on (grad_h, hess_zz).
    """
    data = problem.resolve_data(data)
    if problem.refine_z is not None:
        return np.asarray(problem.refine_z(beta, z0, data), dtype=float)
    res = gauss_newton_root(
        lambda z: problem.grad_h(beta, z, data),
        lambda z: problem.hess_zz(beta, z, data),
        z0,
        tol=tol,
        guard=lambda z: problem.domain_guard(beta, z),
    )
    return res.x
