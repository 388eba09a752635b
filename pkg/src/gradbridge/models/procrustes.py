"""Orthogonal Procrustes alignment through its Lagrangian dual.

The primal min_R ||R y - beta||_F^2 over orthonormal R is non-convex, but
its dual f(gamma) is concave with gradient -I + Rhat^T Rhat, so first-order
optimality applies. Parameterizing (gamma + y y^T)^{-1} = W W^T with a
lower-triangular positive-diagonal W avoids explicit inversion and yields
the shrinkage kernel exp{-lambda ||Rhat^T Rhat - I||_F^2}.

The batch-integration model aligns B data matrices X_b to a shared
representation u with per-batch scale s_b and near-orthonormal R_b =
s_b u X_b^T (W_b W_b^T); the same kernel is summed over batches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg

from ..bridge import BridgeProblem, gauss_newton_root
from ..layout import ParameterLayout


def procrustes_svd_solution(beta_mat, y_mat) -> np.ndarray:
    """Primal solution R = U V^T from the SVD of beta y^T (the test oracle).

    Degenerate (near-zero) singular values make the solution non-unique;
    any U V^T is still optimal, so the case is only flagged.
    """
    beta_mat = np.asarray(beta_mat, dtype=float)
    y_mat = np.asarray(y_mat, dtype=float)
    U, svals, Vt = np.linalg.svd(beta_mat @ y_mat.T)
    if svals.size and np.any(svals < 1e-12 * max(svals[0], 1.0)):
        warnings.warn("degenerate singular values: Procrustes solution is not unique", RuntimeWarning)
    return U @ Vt


def _check_w(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if not np.allclose(W, np.tril(W)):
        raise ValueError("W must be lower triangular")
    if np.any(np.diag(W) <= 0):
        raise ValueError("W must have a strictly positive diagonal")
    return W


def procrustes_dual_value(W, beta_mat, y_mat) -> float:
    """Dual objective through the W W^T parameterization.

    tr(beta^T beta) - tr(gamma) - tr{y beta^T beta y^T (gamma + y y^T)^{-1}}
    with gamma = (W W^T)^{-1} - y y^T; the only inverse is a triangular
    solve for tr((W W^T)^{-1}) = ||W^{-1}||_F^2.
    """
    W = _check_w(W)
    beta_mat = np.asarray(beta_mat, dtype=float)
    y_mat = np.asarray(y_mat, dtype=float)
    S = W @ W.T
    K = y_mat @ beta_mat.T @ beta_mat @ y_mat.T
    W_inv = scipy.linalg.solve_triangular(W, np.eye(W.shape[0]), lower=True)
    return float(
        np.sum(beta_mat * beta_mat) + np.sum(y_mat * y_mat) - np.sum(W_inv * W_inv) - np.sum(K * S)
    )


def procrustes_dual_gradient(W, beta_mat, y_mat) -> np.ndarray:
    """Gradient of the dual in gamma: -I + Rhat^T Rhat, Rhat = beta y^T W W^T."""
    W = _check_w(W)
    R = np.asarray(beta_mat, dtype=float) @ np.asarray(y_mat, dtype=float).T @ (W @ W.T)
    return -np.eye(W.shape[0]) + R.T @ R


def procrustes_shrinkage_kernel(W_list, u, s_list, X_list, lam: float) -> float:
    """-lambda sum_b ||R_b^T R_b - I||_F^2 with R_b = s_b u X_b^T (W_b W_b^T)."""
    total = 0.0
    u = np.asarray(u, dtype=float)
    for W, s, X in zip(W_list, s_list, X_list):
        W = _check_w(W)
        R = s * u @ np.asarray(X, dtype=float).T @ (W @ W.T)
        E = R.T @ R - np.eye(R.shape[1])
        total += float(np.sum(E * E))
    return -lam * total


def _tril_pairs(d: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(d) for j in range(i + 1)]


def pack_w(W) -> np.ndarray:
    """Lower-triangular coordinates; the diagonal is stored on the log scale."""
    W = np.asarray(W, dtype=float)
    d = W.shape[0]
    return np.array([np.log(W[i, i]) if i == j else W[i, j] for i, j in _tril_pairs(d)])

def unpack_w(coords, d: int) -> np.ndarray:
    W = np.zeros((d, d))
    for (i, j), c in zip(_tril_pairs(d), np.asarray(coords, dtype=float)):
        W[i, j] = np.exp(c) if i == j else c
    return W


def _w_basis(W, i, j) -> np.ndarray:
    # derivative of W w.r.t. its (i,j) sampled coordinate (log scale on diag)
    E = np.zeros_like(W)
    E[i, j] = W[i, j] if i == j else 1.0
    return E


def maximize_dual(beta_mat, y_mat, w0: Optional[np.ndarray] = None, tol: float = 1e-12):
    """Gradient-stationary dual maximizer: damped Gauss-Newton on the dual
    gradient residual Rhat^T Rhat - I over W. Returns (W*, dual value)."""
    beta_mat = np.asarray(beta_mat, dtype=float)
    y_mat = np.asarray(y_mat, dtype=float)
    p = beta_mat.shape[0]
    K = y_mat @ beta_mat.T @ beta_mat @ y_mat.T
    if w0 is None:
        w0 = np.linalg.cholesky(np.linalg.inv(y_mat @ y_mat.T + np.eye(p)))
    pairs = _tril_pairs(p)

    def residual(coords):
        W = unpack_w(coords, p)
        S = W @ W.T
        return (S @ K @ S - np.eye(p)).ravel()

    def jacobian(coords):
        W = unpack_w(coords, p)
        S = W @ W.T
        KS = K @ S
        cols = []
        for i, j in pairs:
            dW = _w_basis(W, i, j)
            dS = dW @ W.T + W @ dW.T
            dE = dS @ KS + KS.T @ dS
            cols.append(dE.ravel())
        return np.stack(cols, axis=1)

    res = gauss_newton_root(residual, jacobian, pack_w(w0), tol=tol, max_iters=500)
    W_star = unpack_w(res.x, p)
    return W_star, procrustes_dual_value(W_star, beta_mat, y_mat)


@dataclass(frozen=True)
class ProcrustesDualModel:
    """Batch-integration model: B data matrices X_b (d x n), shared u."""

    X_list: tuple
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        X_list = tuple(np.asarray(X, dtype=float) for X in self.X_list)
        object.__setattr__(self, "X_list", X_list)
        d, n = X_list[0].shape
        if any(X.shape != (d, n) for X in X_list):
            raise ValueError("all batches must share one (d, n) shape")

    @property
    def n_batches(self) -> int:
        return len(self.X_list)

    @property
    def d(self) -> int:
        return self.X_list[0].shape[0]

    @property
    def n(self) -> int:
        return self.X_list[0].shape[1]


def procrustes_problem(model: ProcrustesDualModel) -> BridgeProblem:
    """BridgeProblem for the batch-integration model.

    Sampled blocks: u entries (standard normal prior), log s_b (half-normal
    on s_b), log sigma^2 (inverse-gamma(2,1)), and per-batch W coordinates
    (dual latent, no prior). The kernel residual is vec(R_b^T R_b - I)
    stacked over batches; its closed-form gradient avoids assembling the
    Jacobian at every leapfrog step.
    """
    B, d, n = model.n_batches, model.d, model.n
    X = model.X_list
    q = d * (d + 1) // 2
    pairs = _tril_pairs(d)
    dim_u = d * n
    dim_beta = dim_u + B + 1
    dim_z = B * q
    dim_k = B * d * d
    layout = ParameterLayout((("u", dim_u), ("log_s", B), ("log_sigma2", 1), ("w", dim_z)), z_block="w")
    eye_d = np.eye(d)

    def unpack(bvec, z):
        u = bvec[:dim_u].reshape(d, n)
        s = np.exp(bvec[dim_u : dim_u + B])
        sigma2 = np.exp(bvec[dim_u + B])
        Ws = [unpack_w(z[b * q : (b + 1) * q], d) for b in range(B)]
        return u, s, sigma2, Ws

    def _batch_pieces(u, s, Ws):
        out = []
        for b in range(B):
            M = u @ X[b].T
            S = Ws[b] @ Ws[b].T
            K = M.T @ M
            E = s[b] ** 2 * S @ K @ S - eye_d
            out.append((M, S, K, E))
        return out

    def log_g(bvec, z, data):
        u, s, sigma2, Ws = unpack(bvec, z)
        val = 0.0
        for b in range(B):
            S = Ws[b] @ Ws[b].T
            F = s[b] * ((u @ X[b].T) @ S @ X[b] - u)
            val += -0.5 * d * n * np.log(sigma2) - float(np.sum(F * F)) / (2 * sigma2)
        return float(val)

    def grad_log_g(bvec, z, data):
        u, s, sigma2, Ws = unpack(bvec, z)
        g_u = np.zeros((d, n))
        g_s = np.zeros(B)
        g_sig = -0.5 * d * n * B
        g_w = np.zeros(dim_z)
        for b in range(B):
            S = Ws[b] @ Ws[b].T
            M = u @ X[b].T
            G = X[b].T @ S @ X[b] - np.eye(n)
            F = s[b] * (u @ G)
            ff = float(np.sum(F * F))
            g_u += -(s[b] / sigma2) * F @ G.T
            g_s[b] = -ff / sigma2
            g_sig += ff / (2 * sigma2)
            A = M.T @ F @ X[b].T
            GW = -(s[b] / sigma2) * (A + A.T) @ Ws[b]
            for k_, (i, j) in enumerate(pairs):
                g_w[b * q + k_] = GW[i, j] * (Ws[b][i, i] if i == j else 1.0)
        return np.concatenate([g_u.ravel(), g_s, [g_sig], g_w])

    def grad_h(bvec, z, data):
        u, s, _, Ws = unpack(bvec, z)
        return np.concatenate([E.ravel() for _, _, _, E in _batch_pieces(u, s, Ws)])

    def hess_zz(bvec, z, data):
        u, s, _, Ws = unpack(bvec, z)
        out = np.zeros((dim_k, dim_z))
        for b, (M, S, K, E) in enumerate(_batch_pieces(u, s, Ws)):
            KS = K @ S
            for k_, (i, j) in enumerate(pairs):
                dW = _w_basis(Ws[b], i, j)
                dS = dW @ Ws[b].T + Ws[b] @ dW.T
                dE = s[b] ** 2 * (dS @ KS + KS.T @ dS)
                out[b * d * d : (b + 1) * d * d, b * q + k_] = dE.ravel()
        return out

    def hess_zbeta(bvec, z, data):
        u, s, _, Ws = unpack(bvec, z)
        out = np.zeros((dim_k, dim_beta))
        pieces = _batch_pieces(u, s, Ws)
        for b, (M, S, K, E) in enumerate(pieces):
            rows = slice(b * d * d, (b + 1) * d * d)
            SX = S  # d x d
            for a in range(d):
                for l_ in range(n):
                    dM = np.zeros((d, d))
                    dM[a, :] = X[b][:, l_]
                    dK = dM.T @ M + M.T @ dM
                    dE = s[b] ** 2 * SX @ dK @ SX
                    out[rows, a * n + l_] = dE.ravel()
            out[rows, dim_u + b] = (2.0 * s[b] ** 2 * S @ K @ S).ravel()
        return out

    def grad_kernel(bvec, z, data):
        # closed-form gradient of sum_b ||E_b||_F^2 over all sampled blocks
        u, s, sigma2, Ws = unpack(bvec, z)
        g_u = np.zeros((d, n))
        g_s = np.zeros(B)
        g_w = np.zeros(dim_z)
        for b, (M, S, K, E) in enumerate(_batch_pieces(u, s, Ws)):
            SES = S @ E @ S
            g_u += 4.0 * s[b] ** 2 * M @ SES @ X[b]
            g_s[b] = 4.0 * s[b] ** 2 * float(np.sum(E * (S @ K @ S)))
            GW = 4.0 * s[b] ** 2 * (K @ S @ E + E @ S @ K) @ Ws[b]
            for k_, (i, j) in enumerate(pairs):
                g_w[b * q + k_] = GW[i, j] * (Ws[b][i, i] if i == j else 1.0)
        return np.concatenate([g_u.ravel(), g_s, [0.0], g_w])

    def log_prior(bvec):
        u = bvec[:dim_u]
        log_s = bvec[dim_u : dim_u + B]
        s = np.exp(log_s)
        u_sig = bvec[dim_u + B]
        sigma2 = np.exp(u_sig)
        val = -0.5 * float(np.sum(u * u))
        val += float(np.sum(-0.5 * s**2 + log_s))
        val += -2.0 * u_sig - 1.0 / sigma2
        return val

    def grad_log_prior(bvec):
        u = bvec[:dim_u]
        s = np.exp(bvec[dim_u : dim_u + B])
        sigma2 = np.exp(bvec[dim_u + B])
        return np.concatenate([-u, -(s**2) + 1.0, [-2.0 + 1.0 / sigma2]])

    def domain_guard(bvec, z):
        return bool(np.all(np.isfinite(bvec)) and np.all(np.isfinite(z)))

    def refine_z(bvec, z0, data):
        # closed form: s^2 S K S = I has the unique SPD solution S = K^{-1/2}/s
        u = bvec[:dim_u].reshape(d, n)
        s = np.exp(bvec[dim_u : dim_u + B])
        out = np.empty(dim_z)
        for b in range(B):
            M = u @ X[b].T
            K = M.T @ M
            w_eig, V = np.linalg.eigh(K)
            if np.any(w_eig < 1e-10 * max(w_eig[-1], 1.0)):
                out[b * q : (b + 1) * q] = z0[b * q : (b + 1) * q]
                continue
            S = (V * (w_eig**-0.5)) @ V.T / s[b]
            out[b * q : (b + 1) * q] = pack_w(np.linalg.cholesky(S))
        return out

    u0 = X[0]
    w0 = np.concatenate(
        [pack_w(np.linalg.cholesky(np.linalg.inv(X[b] @ X[b].T + np.eye(d)))) for b in range(B)]
    )
    init_beta = np.concatenate([u0.ravel(), np.zeros(B), [0.0]])
    init = np.concatenate([init_beta, w0])
    resid0 = 0.0
    for b in range(B):
        S = unpack_w(w0[b * q : (b + 1) * q], d) @ unpack_w(w0[b * q : (b + 1) * q], d).T
        F = (u0 @ X[b].T) @ S @ X[b] - u0
        resid0 += float(np.sum(F * F))
    init[dim_u + B] = np.log(max(resid0 / (d * n * B), 1e-3))

    return BridgeProblem(
        dim_beta=dim_beta,
        dim_z=dim_z,
        dim_k=dim_k,
        log_g=log_g,
        grad_log_g=grad_log_g,
        grad_h=grad_h,
        hess_zz=hess_zz,
        hess_zbeta=hess_zbeta,
        log_prior=log_prior,
        grad_log_prior=grad_log_prior,
        domain_guard=domain_guard,
        layout=layout,
        data={"X_list": X},
        grad_kernel=grad_kernel,
        refine_z=refine_z,
        init=init,
    )


def batch_rotations(problem_model: ProcrustesDualModel, bvec, z):
    """R_b matrices at one parameter point."""
    B, d, n = problem_model.n_batches, problem_model.d, problem_model.n
    q = d * (d + 1) // 2
    u = np.asarray(bvec[: d * n]).reshape(d, n)
    s = np.exp(np.asarray(bvec[d * n : d * n + B]))
    out = []
    for b in range(B):
        W = unpack_w(np.asarray(z[b * q : (b + 1) * q]), d)
        out.append(s[b] * u @ problem_model.X_list[b].T @ (W @ W.T))
    return out


def aligned_representation(model: ProcrustesDualModel, bvec, z):
    """Aligned point cloud (rows = observations) and batch labels."""
    B = model.n_batches
    s = np.exp(np.asarray(bvec[model.d * model.n : model.d * model.n + B]))
    Rs = batch_rotations(model, bvec, z)
    clouds = [(Rs[b] @ model.X_list[b] / s[b]).T for b in range(B)]
    batch_labels = np.concatenate([np.full(model.n, b) for b in range(B)])
    return np.vstack(clouds), batch_labels


def simulate_procrustes_batches(
    d: int,
    n: int,
    n_batches: int,
    n_types: int,
    noise_sd: float,
    seed: int,
):
    """Synthetic clustered batches: X_b = R0_b^T (s0_b u0 + noise).

    Returns (X_list, type_labels, truth dict). Each batch is a rotated and
    scaled noisy copy of a shared clustered representation u0.
    """
    from ..sampler import make_rng

    rng = make_rng(seed, stream=17)
    centers = 3.0 * rng.standard_normal((n_types, d))
    labels = np.arange(n) % n_types
    rng.shuffle(labels)
    u0 = centers[labels].T + 0.6 * rng.standard_normal((d, n))
    X_list = []
    truth = {"u0": u0, "labels": labels, "rotations": [], "scales": []}
    for _ in range(n_batches):
        A = rng.standard_normal((d, d))
        Q_, _ = np.linalg.qr(A)
        s0 = float(np.exp(rng.uniform(-0.25, 0.25)))
        X = Q_.T @ (s0 * u0 + noise_sd * rng.standard_normal((d, n)))
        X_list.append(X)
        truth["rotations"].append(Q_)
        truth["scales"].append(s0)
    return tuple(X_list), labels, truth
