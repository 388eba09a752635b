"""Gradient-bridged posterior sampling for models with optimization sub-problems."""

from .bridge import (
    BarrierConstraint,
    BridgeProblem,
    DomainViolation,
    KernelConfig,
    barrier_wrap,
    check_gradient,
    gauss_newton_root,
    grad_log_posterior,
    log_posterior,
    posterior_callables,
    refine_subproblem,
    shrinkage_log_kernel,
    theorem1_bound,
)
from .layout import ParameterLayout
from .sampler import (
    Chain,
    MassSpec,
    SamplerConfig,
    acceptance_ratio,
    build_mass_inverse,
    find_posterior_mode,
    leapfrog_step,
    make_rng,
    nuts_sample,
)

__version__ = "0.1.0"
