"""Gibbs-posterior comparators.

plain: loss-free generalized posterior, log g + log prior (the lambda = 0
baseline). joint_shrinkage: penalizes the loss *value*, log g + log prior -
lambda h(beta, z; y), shrinking jointly in (beta, z) instead of toward the
partial minimizer. Both return BridgeProblems with an empty kernel residual
so they run through the identical sampler path.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..bridge import BridgeProblem

VARIANTS = ("plain", "joint_shrinkage")


def gibbs_baseline(problem: BridgeProblem, variant: str, lam: float = 0.0) -> BridgeProblem:
    """Comparator posterior built from a gradient-bridged problem.

    joint_shrinkage requires the base problem to supply the scalar loss h,
    its beta gradient, and a residual that is the true z gradient
    (dim_k == dim_z).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    nb, nz = problem.dim_beta, problem.dim_z
    empty = dict(
        dim_k=0,
        grad_h=lambda beta, z, data: np.zeros(0),
        hess_zz=lambda beta, z, data: np.zeros((0, nz)),
        hess_zbeta=lambda beta, z, data: np.zeros((0, nb)),
        grad_kernel=None,
        fused_logpost_grad=None,  # fused closures capture the base density
    )
    if variant == "plain":
        return replace(problem, **empty)

    if problem.h is None or problem.grad_h_beta is None:
        raise ValueError("joint_shrinkage needs a scalar h evaluator and its beta gradient")
    if problem.dim_k != problem.dim_z:
        raise ValueError("joint_shrinkage needs the residual to be the z gradient of h")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    base_log_g = problem.log_g
    base_grad_log_g = problem.grad_log_g
    base_h = problem.h
    base_gh_beta = problem.grad_h_beta
    base_gh_z = problem.grad_h

    def log_g(beta, z, data):
        return base_log_g(beta, z, data) - lam * base_h(beta, z, data)

    def grad_log_g(beta, z, data):
        out = np.asarray(base_grad_log_g(beta, z, data), dtype=float).copy()
        if lam != 0.0:
            out[:nb] -= lam * base_gh_beta(beta, z, data)
            out[nb:] -= lam * base_gh_z(beta, z, data)
        return out

    return replace(problem, log_g=log_g, grad_log_g=grad_log_g, **empty)
