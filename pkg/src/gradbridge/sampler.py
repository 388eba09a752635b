"""No-U-Turn sampler with an implicit-function-aware mass matrix.

The transition kernel is multinomial NUTS: binary tree doubling with
log-sum-exp state weights, the generalized (velocity-based) U-turn
criterion dq . M^{-1} p < 0, and divergence pruning at dH > 1000. Step
size is adapted during burn-in by dual averaging toward a target
acceptance statistic, then frozen.

One leapfrog step with step size eps:

    p_half = p + (eps/2) grad log Pi(theta)
    theta' = theta + eps M^{-1} p_half
    p'     = p_half + (eps/2) grad log Pi(theta')

The preconditioner for gradient-bridged targets is the ridged null-space
projection M^{-1} = (1+tau) I - G (G^T G)^{-1} G^T with G the stacked
cross/z Hessian blocks of the sub-problem loss at a frozen reference
point, damping momentum components that leave the implicit-function
manifold. A Stan-style windowed diagonal adaptation is available as the
"default" comparator.

All randomness comes from a counter-based Philox generator keyed by
(seed, stream), so identical configs give bit-identical chains.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg

from .bridge import DomainViolation
from .layout import ParameterLayout

Array = np.ndarray

DELTA_MAX = 1000.0  # energy error that flags a divergent trajectory
DA_GAMMA, DA_T0, DA_KAPPA = 0.05, 10.0, 0.75


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, stream)."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class SamplerConfig:
    """Run schedule and adaptation settings (defaults mirror the synthetic
    flow experiment: 12000 iterations, 2000 burn-in, thinning 10)."""

    n_iterations: int = 12000
    n_burnin: int = 2000
    thin: int = 10
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    stream: int = 0
    init: Optional[Array] = None

    def __post_init__(self):
        if not self.n_burnin < self.n_iterations:
            raise ValueError("n_burnin must be smaller than n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0,1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")

    @property
    def n_kept(self) -> int:
        return (self.n_iterations - self.n_burnin) // self.thin

    def echo(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "n_burnin": self.n_burnin,
            "thin": self.thin,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "seed": int(self.seed),
            "stream": int(self.stream),
        }


@dataclass
class MassSpec:
    """Inverse mass matrix with the factor used for momentum draws.

    mass_chol is the lower-triangular factor of M (not of M^{-1}), so
    momenta are mass_chol @ standard_normal.
    """

    inv_mass: Array
    mass_chol: Array
    mode: str = "identity"

    @classmethod
    def identity(cls, dim: int) -> "MassSpec":
        eye = np.eye(dim)
        return cls(inv_mass=eye.copy(), mass_chol=eye.copy(), mode="identity")

    @classmethod
    def from_inv_diag(cls, inv_diag: Array, mode: str = "diag") -> "MassSpec":
        inv_diag = np.asarray(inv_diag, dtype=float)
        if np.any(inv_diag <= 0):
            raise ValueError("inverse-mass diagonal must be positive")
        return cls(
            inv_mass=np.diag(inv_diag),
            mass_chol=np.diag(1.0 / np.sqrt(inv_diag)),
            mode=mode,
        )

    @property
    def dim(self) -> int:
        return self.inv_mass.shape[0]

    def validate(self, rtol: float = 1e-8, min_eig: float = 0.0) -> None:
        if not np.allclose(self.inv_mass, self.inv_mass.T, atol=1e-12):
            raise ValueError("inv_mass must be symmetric")
        eigs = np.linalg.eigvalsh(self.inv_mass)
        if eigs[0] <= min_eig:
            raise ValueError(f"inv_mass eigenvalues must exceed {min_eig}")
        M = self.mass_chol @ self.mass_chol.T
        if not np.allclose(M @ self.inv_mass, np.eye(self.dim), rtol=rtol, atol=rtol):
            raise ValueError("mass_chol mass_chol^T must invert inv_mass")

    def kinetic(self, p: Array) -> float:
        return 0.5 * float(p @ (self.inv_mass @ p))

    def draw_momentum(self, rng: np.random.Generator) -> Array:
        return self.mass_chol @ rng.standard_normal(self.dim)


def build_mass_inverse(G_hat: Array, tau_ridge: float = 1e-3) -> MassSpec:
    """Ridged null-space projection M^{-1} = (1+tau) I - G (G^T G)^{-1} G^T.

    The column space of G_hat is extracted with a pivoted QR factorization
    (no explicit (G^T G)^{-1}); rank-deficient inputs are pruned with a
    warning, and a zero-column G_hat degrades to a scaled identity.
    """
    if tau_ridge <= 0:
        raise ValueError("tau_ridge must be positive")
    G = np.asarray(G_hat, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    n, k = G.shape
    rank = 0
    Q1 = None
    if k > 0 and np.any(G):
        Q, R, _ = scipy.linalg.qr(G, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(n, k) * np.finfo(float).eps * diag[0]
        rank = int(np.sum(diag > tol))
        if 0 < rank < k:
            warnings.warn(f"rank-deficient G_hat: kept {rank} of {k} columns", RuntimeWarning)
        Q1 = Q[:, :rank]
    if rank == 0:
        inv_mass = (1.0 + tau_ridge) * np.eye(n)
        chol = np.eye(n) / math.sqrt(1.0 + tau_ridge)
        return MassSpec(inv_mass=inv_mass, mass_chol=chol, mode="identity")
    P = Q1 @ Q1.T
    eye = np.eye(n)
    inv_mass = (1.0 + tau_ridge) * eye - P
    M = (eye - P) / (1.0 + tau_ridge) + P / tau_ridge
    chol = np.linalg.cholesky(M)
    spec = MassSpec(inv_mass=inv_mass, mass_chol=chol, mode="projection")
    spec.validate(min_eig=0.5 * tau_ridge)
    return spec


class LeapfrogResult(NamedTuple):
    position: Array
    momentum: Array
    valid: bool


def leapfrog_step(position, momentum, eps, inv_mass, grad_logpost) -> LeapfrogResult:
    """One reversible, volume-preserving leapfrog step.

    A non-finite gradient at the new position marks the result invalid
    (divergence flag for the caller).
    """
    position = np.asarray(position, dtype=float)
    momentum = np.asarray(momentum, dtype=float)
    inv_mass = np.asarray(inv_mass, dtype=float)
    try:
        g0 = np.asarray(grad_logpost(position), dtype=float)
    except DomainViolation:
        return LeapfrogResult(position, momentum, False)
    p_half = momentum + 0.5 * eps * g0
    pos_new = position + eps * (inv_mass @ p_half)
    try:
        g1 = np.asarray(grad_logpost(pos_new), dtype=float)
    except DomainViolation:
        return LeapfrogResult(pos_new, p_half, False)
    if not np.all(np.isfinite(g1)):
        return LeapfrogResult(pos_new, p_half, False)
    p_new = p_half + 0.5 * eps * g1
    return LeapfrogResult(pos_new, p_new, True)


def acceptance_ratio(H_current: float, H_proposed: float) -> float:
    """min(1, exp(H_current - H_proposed)); +inf proposals are rejected."""
    if not np.isfinite(H_current):
        raise ValueError("current Hamiltonian must be finite")
    if H_proposed == np.inf:
        return 0.0
    if not np.isfinite(H_proposed):
        raise ValueError("proposed Hamiltonian must be finite or +inf")
    d = H_current - H_proposed
    return 1.0 if d >= 0 else float(math.exp(d))


@dataclass
class ModeResult:
    x: Array
    value: float
    grad_norm: float
    converged: bool
    n_iters: int
    n_grad_evals: int


def find_posterior_mode(
    logpost: Callable[[Array], float],
    grad: Callable[[Array], Array],
    init: Array,
    max_iters: int = 1000,
    gtol: float = 1e-6,
) -> ModeResult:
    """Gradient ascent with Armijo backtracking (step halving).

    Stops when the sup-norm of the gradient drops below gtol; exceeding
    max_iters returns the best point with converged=False so callers can
    fall back to an identity mass.
    """
    x = np.asarray(init, dtype=float).copy()
    f = float(logpost(x))
    if not np.isfinite(f):
        raise ValueError("log posterior is not finite at the initial point")
    g = np.asarray(grad(x), dtype=float)
    n_grad = 1
    step = 1.0
    it = 0
    for it in range(1, max_iters + 1):
        gn = float(np.linalg.norm(g, ord=np.inf))
        if gn <= gtol:
            return ModeResult(x, f, gn, True, it - 1, n_grad)
        slope = float(np.dot(g, g))
        s = step
        accepted = False
        for _ in range(60):
            x_new = x + s * g
            f_new = float(logpost(x_new))
            if np.isfinite(f_new) and f_new >= f + 1e-4 * s * slope:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        x, f = x_new, f_new
        g = np.asarray(grad(x), dtype=float)
        n_grad += 1
        step = min(s * 2.0, 1e6)
    gn = float(np.linalg.norm(g, ord=np.inf))
    return ModeResult(x, f, gn, gn <= gtol, it, n_grad)


@dataclass
class Chain:
    """Kept posterior draws with per-iteration sampler metadata."""

    samples: Array
    log_densities: Array
    tree_depths: Array
    accept_stats: Array
    divergences: Array
    layout: ParameterLayout
    info: dict = field(default_factory=dict)

    @property
    def n_kept(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def block(self, name: str) -> Array:
        return self.samples[:, self.layout.block_slice(name)]

    def to_csv(self, path) -> None:
        names = self.layout.coordinate_names()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names + ["log_density", "tree_depth", "accept_stat", "divergent"])
            for i in range(self.n_kept):
                row = [f"{v:.17g}" for v in self.samples[i]]
                row += [
                    f"{self.log_densities[i]:.17g}",
                    int(self.tree_depths[i]),
                    f"{self.accept_stats[i]:.17g}",
                    int(self.divergences[i]),
                ]
                w.writerow(row)

    def write_sidecar(self, path) -> None:
        meta = {
            "config": self.info.get("config", {}),
            "seed": self.info.get("config", {}).get("seed"),
            "mass_mode": self.info.get("mass_mode"),
            "adaptation": {
                "step_size_initial": self.info.get("step_size_initial"),
                "step_size_final": self.info.get("step_size_final"),
                "mass_updates": self.info.get("mass_updates", 0),
            },
            "n_grad_evals": self.info.get("n_grad_evals"),
            "divergence_count": self.info.get("divergence_count"),
            "quality_warning": self.info.get("quality_warning", False),
            "layout": [[name, size] for name, size in self.layout.blocks],
        }
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


class _Tree:
    __slots__ = (
        "pos_minus", "mom_minus", "grad_minus",
        "pos_plus", "mom_plus", "grad_plus",
        "prop", "prop_lp", "log_w",
        "alpha_sum", "n_alpha", "n_steps",
        "turning", "diverged",
    )

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _uturn(pos_minus, pos_plus, mom_minus, mom_plus, inv_mass) -> bool:
    dq = pos_plus - pos_minus
    return bool(dq @ (inv_mass @ mom_minus) < 0.0) or bool(dq @ (inv_mass @ mom_plus) < 0.0)


class _NutsKernel:
    """Single-chain NUTS transition; holds the target and counters."""

    def __init__(self, value_and_grad, mass: MassSpec, max_depth: int, rng):
        self.value_and_grad = value_and_grad
        self.mass = mass
        self.max_depth = max_depth
        self.rng = rng
        self.n_grad_evals = 0

    def _vg(self, x):
        self.n_grad_evals += 1
        try:
            lp, g = self.value_and_grad(x)
        except DomainViolation:
            return -np.inf, None
        if g is not None and not np.all(np.isfinite(g)):
            return -np.inf, None
        return float(lp), g

    def _leaf(self, pos, mom, grad_pos, eps, H0) -> _Tree:
        invalid = _Tree(
            pos_minus=pos, mom_minus=mom, grad_minus=grad_pos,
            pos_plus=pos, mom_plus=mom, grad_plus=grad_pos,
            prop=pos, prop_lp=-np.inf, log_w=-np.inf,
            alpha_sum=0.0, n_alpha=1, n_steps=1, turning=False, diverged=True,
        )
        p_half = mom + 0.5 * eps * grad_pos
        pos1 = pos + eps * (self.mass.inv_mass @ p_half)
        lp1, g1 = self._vg(pos1)
        if g1 is None:
            return invalid
        mom1 = p_half + 0.5 * eps * g1
        H1 = -lp1 + self.mass.kinetic(mom1) if np.isfinite(lp1) else np.inf
        dH = H1 - H0
        diverged = (not np.isfinite(dH)) or dH > DELTA_MAX
        log_w = -dH if np.isfinite(dH) else -np.inf
        alpha = float(np.exp(min(0.0, -dH))) if np.isfinite(dH) else 0.0
        return _Tree(
            pos_minus=pos1, mom_minus=mom1, grad_minus=g1,
            pos_plus=pos1, mom_plus=mom1, grad_plus=g1,
            prop=pos1, prop_lp=lp1, log_w=log_w,
            alpha_sum=alpha, n_alpha=1, n_steps=1, turning=False, diverged=diverged,
        )

    def _build(self, pos, mom, grad_pos, depth, direction, eps, H0) -> _Tree:
        if depth == 0:
            return self._leaf(pos, mom, grad_pos, eps * direction, H0)
        first = self._build(pos, mom, grad_pos, depth - 1, direction, eps, H0)
        if first.turning or first.diverged:
            return first
        if direction == 1:
            second = self._build(first.pos_plus, first.mom_plus, first.grad_plus, depth - 1, direction, eps, H0)
            first.pos_plus, first.mom_plus, first.grad_plus = second.pos_plus, second.mom_plus, second.grad_plus
        else:
            second = self._build(first.pos_minus, first.mom_minus, first.grad_minus, depth - 1, direction, eps, H0)
            first.pos_minus, first.mom_minus, first.grad_minus = second.pos_minus, second.mom_minus, second.grad_minus
        total = np.logaddexp(first.log_w, second.log_w)
        if second.log_w > -np.inf and math.log(self.rng.random()) < second.log_w - total:
            first.prop, first.prop_lp = second.prop, second.prop_lp
        first.log_w = total
        first.alpha_sum += second.alpha_sum
        first.n_alpha += second.n_alpha
        first.n_steps += second.n_steps
        first.diverged = second.diverged
        first.turning = second.turning or _uturn(
            first.pos_minus, first.pos_plus, first.mom_minus, first.mom_plus, self.mass.inv_mass
        )
        return first

    def transition(self, pos, lp, grad_pos, eps):
        mom0 = self.mass.draw_momentum(self.rng)
        H0 = -lp + self.mass.kinetic(mom0)
        pos_minus = pos_plus = pos
        mom_minus = mom_plus = mom0
        grad_minus = grad_plus = grad_pos
        prop, prop_lp, prop_grad = pos, lp, grad_pos
        log_w = 0.0
        alpha_sum, n_alpha = 0.0, 0
        diverged_any = False
        depth = 0
        while depth < self.max_depth:
            direction = 1 if self.rng.random() < 0.5 else -1
            if direction == 1:
                sub = self._build(pos_plus, mom_plus, grad_plus, depth, 1, eps, H0)
            else:
                sub = self._build(pos_minus, mom_minus, grad_minus, depth, -1, eps, H0)
            alpha_sum += sub.alpha_sum
            n_alpha += sub.n_alpha
            diverged_any = diverged_any or sub.diverged
            if sub.turning or sub.diverged:
                break
            total = np.logaddexp(log_w, sub.log_w)
            if sub.log_w > -np.inf and math.log(self.rng.random()) < sub.log_w - total:
                prop, prop_lp = sub.prop, sub.prop_lp
                prop_grad = None
            log_w = total
            if direction == 1:
                pos_plus, mom_plus, grad_plus = sub.pos_plus, sub.mom_plus, sub.grad_plus
            else:
                pos_minus, mom_minus, grad_minus = sub.pos_minus, sub.mom_minus, sub.grad_minus
            depth += 1
            if _uturn(pos_minus, pos_plus, mom_minus, mom_plus, self.mass.inv_mass):
                break
        if prop_grad is None:
            _, prop_grad = self._vg(prop)
        accept_stat = alpha_sum / max(1, n_alpha)
        return prop, prop_lp, prop_grad, float(accept_stat), depth, diverged_any


class _DualAveraging:
    def __init__(self, eps0: float, target: float):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0
        self.target = target

    def update(self, accept_stat: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / DA_GAMMA * self.h_bar
        w = self.t ** (-DA_KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def final(self) -> float:
        return math.exp(self.log_eps_bar) if self.t > 0 else math.exp(self.log_eps)


def _find_initial_step(kernel: _NutsKernel, pos, lp, grad_pos, rng) -> float:
    """Double/halve eps until one leapfrog step crosses 0.5 acceptance."""
    eps = 1.0
    mom0 = kernel.mass.draw_momentum(rng)
    H0 = -lp + kernel.mass.kinetic(mom0)

    def one_step_alpha(e):
        leaf = kernel._leaf(pos, mom0, grad_pos, e, H0)
        return math.exp(min(0.0, leaf.log_w)) if leaf.log_w > -np.inf else 0.0

    alpha = one_step_alpha(eps)
    for _ in range(60):
        if alpha > 0.0:
            break
        eps *= 0.5
        alpha = one_step_alpha(eps)
    direction = 1.0 if alpha > 0.5 else -1.0
    for _ in range(60):
        eps_try = eps * (2.0 ** direction)
        if eps_try < 1e-10 or eps_try > 1e4:
            break
        alpha = one_step_alpha(eps_try)
        if (direction > 0 and alpha < 0.5) or (direction < 0 and alpha > 0.5):
            eps = eps_try if direction < 0 else eps
            break
        eps = eps_try
    return eps


def _adaptation_windows(n_burnin: int) -> list[tuple[int, int]]:
    """Stan-like doubling windows inside the burn-in for mass adaptation."""
    if n_burnin < 40:
        return []
    init_buf = max(1, int(0.15 * n_burnin))
    term_buf = max(1, int(0.10 * n_burnin))
    start, end = init_buf, n_burnin - term_buf
    if end <= start:
        return []
    win = min(25, end - start)
    out = []
    while start + win < end:
        out.append((start, start + win))
        start += win
        win = min(2 * win, end - start)
    out.append((start, end))
    return out


def nuts_sample(
    logpost: Callable[[Array], float],
    grad: Callable[[Array], Array],
    cfg: SamplerConfig,
    mass: MassSpec,
    layout: Optional[ParameterLayout] = None,
    adapt_mass: bool = False,
    value_and_grad: Optional[Callable[[Array], tuple]] = None,
) -> Chain:
    """Sample exp(logpost) with multinomial NUTS.

    Step size adapts during burn-in (dual averaging toward
    cfg.target_accept) and is then frozen. With adapt_mass=True a diagonal
    inverse mass is additionally estimated in windows during burn-in (the
    "default" comparator); otherwise the given MassSpec is used unchanged
    for the whole run. value_and_grad optionally fuses the two target
    callables into one evaluation (always equivalent, often cheaper).
    """
    if cfg.init is None:
        raise ValueError("cfg.init must be a parameter vector")
    x = np.asarray(cfg.init, dtype=float).copy()
    dim = x.shape[0]
    if layout is None:
        layout = ParameterLayout((("z", dim),))
    if layout.dim != dim:
        raise ValueError("layout dimension does not match init")
    if mass.dim != dim:
        raise ValueError("mass dimension does not match init")

    if value_and_grad is None:
        def value_and_grad(vec):
            return logpost(vec), grad(vec)

    rng = make_rng(cfg.seed, cfg.stream)
    kernel = _NutsKernel(value_and_grad, mass, cfg.max_tree_depth, rng)

    lp, g = kernel._vg(x)
    if not np.isfinite(lp) or g is None:
        raise ValueError("log posterior is not finite at the initial state")

    eps0 = _find_initial_step(kernel, x, lp, g, rng)
    da = _DualAveraging(eps0, cfg.target_accept)
    eps = eps0

    windows = _adaptation_windows(cfg.n_burnin) if adapt_mass else []
    window_ends = {end for _, end in windows}
    in_window = np.zeros(cfg.n_burnin, dtype=bool)
    for a, b in windows:
        in_window[a:b] = True
    welford_n = 0
    welford_mean = np.zeros(dim)
    welford_m2 = np.zeros(dim)
    mass_updates = 0

    n_kept = cfg.n_kept
    samples = np.empty((n_kept, dim))
    log_dens = np.empty(n_kept)
    depths = np.empty(n_kept, dtype=int)
    accepts = np.empty(n_kept)
    divs = np.zeros(n_kept, dtype=bool)

    kept = 0
    div_post = 0
    for it in range(cfg.n_iterations):
        x, lp, g, a_stat, depth, diverged = kernel.transition(x, lp, g, eps)
        if it < cfg.n_burnin:
            eps = da.update(a_stat)
            if adapt_mass and in_window[it]:
                welford_n += 1
                delta = x - welford_mean
                welford_mean += delta / welford_n
                welford_m2 += delta * (x - welford_mean)
            if (it + 1) in window_ends and welford_n > 1:
                var = welford_m2 / (welford_n - 1)
                reg = (welford_n / (welford_n + 5.0)) * var + (5.0 / (welford_n + 5.0)) * 1e-3
                kernel.mass = MassSpec.from_inv_diag(reg, mode="diag_adapt")
                mass_updates += 1
                welford_n = 0
                welford_mean[:] = 0.0
                welford_m2[:] = 0.0
                eps = da.final()
                da = _DualAveraging(max(eps, 1e-10), cfg.target_accept)
            if it + 1 == cfg.n_burnin:
                eps = da.final()
        else:
            if diverged:
                div_post += 1
            if (it - cfg.n_burnin + 1) % cfg.thin == 0 and kept < n_kept:
                samples[kept] = x
                log_dens[kept] = lp
                depths[kept] = depth
                accepts[kept] = a_stat
                divs[kept] = diverged
                kept += 1

    n_post = cfg.n_iterations - cfg.n_burnin
    quality_warning = div_post > 0.5 * n_post
    if quality_warning:
        warnings.warn("more than half of post-burn-in iterations diverged", RuntimeWarning)

    info = {
        "config": cfg.echo(),
        "mass_mode": kernel.mass.mode if not adapt_mass else "diag_adapt",
        "step_size_initial": eps0,
        "step_size_final": eps,
        "n_grad_evals": kernel.n_grad_evals,
        "divergence_count": int(div_post),
        "quality_warning": bool(quality_warning),
        "mass_updates": mass_updates,
    }
    return Chain(
        samples=samples,
        log_densities=log_dens,
        tree_depths=depths,
        accept_stats=accepts,
        divergences=divs,
        layout=layout,
        info=info,
    )
