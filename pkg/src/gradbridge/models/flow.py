"""Max-flow network model.

The sub-problem is the max-flow linear program with a log-barrier
adjustment: h(beta, z; y) = -f(z) - (1/t) sum_l log r_l(z) with objective
f(z) = sum of source outflows and constraints r = {z_e > 0, beta_e - z_e > 0}.
Flow conservation is eliminated exactly by parameterizing one designated
inflow per internal node as a function of the other flows, so the sampler
sees only the free flow coordinates.

Sampled coordinates: log beta per edge (half-normal prior on beta),
log sigma_y^2 and log sigma_c^2 (inverse-gamma priors), free flows in
natural scale guarded by 0 < z_e < beta_e on every edge. The half-normal
priors on all per-edge flows are folded into log_g (the only z-aware term).
"""

from __future__ import annotations

import json
from dataclasses import InitVar, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from ..bridge import BridgeProblem, KernelConfig
from ..layout import ParameterLayout


@dataclass(frozen=True)
class FlowNetworkSpec:
    """Directed flow network with designed capacities.

    free_edge_map maps each internal node to the index of the designated
    (eliminated) inflow edge; None selects the lowest-index inflow.
    """

    nodes: tuple
    source: object
    sink: object
    edges: tuple
    designed_capacity: tuple
    free_edge_map: Optional[tuple] = None  # tuple of (node, edge_index) pairs
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((u, v) for u, v in self.edges))
        object.__setattr__(self, "designed_capacity", tuple(float(c) for c in self.designed_capacity))
        if self.free_edge_map is not None:
            object.__setattr__(self, "free_edge_map", tuple((n, int(e)) for n, e in self.free_edge_map))
        if len(self.designed_capacity) != len(self.edges):
            raise ValueError("designed_capacity must parallel the edge list")
        if validate:
            self.check()

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def internal_nodes(self) -> tuple:
        return tuple(n for n in self.nodes if n not in (self.source, self.sink))

    def in_edges(self, node) -> list[int]:
        return [i for i, (_, v) in enumerate(self.edges) if v == node]

    def out_edges(self, node) -> list[int]:
        return [i for i, (u, _) in enumerate(self.edges) if u == node]

    def eliminated_edge(self, node) -> int:
        if self.free_edge_map is not None:
            mapping = dict(self.free_edge_map)
            if node not in mapping:
                raise ValueError(f"free_edge_map missing internal node {node!r}")
            idx = mapping[node]
            if idx not in self.in_edges(node):
                raise ValueError(f"free_edge_map entry for {node!r} is not an inflow edge")
            return idx
        return min(self.in_edges(node))

    def check(self) -> None:
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edges")
        if self.source == self.sink or self.source not in self.nodes or self.sink not in self.nodes:
            raise ValueError("source/sink must be distinct nodes of the network")
        if any(c <= 0 for c in self.designed_capacity):
            raise ValueError("designed capacities must be positive")
        for n in self.internal_nodes:
            if not self.in_edges(n) or not self.out_edges(n):
                raise ValueError(f"internal node {n!r} needs at least one inflow and one outflow")
            self.eliminated_edge(n)
        # source must reach the sink
        reach = {self.source}
        frontier = [self.source]
        while frontier:
            u = frontier.pop()
            for (a, b) in self.edges:
                if a == u and b not in reach:
                    reach.add(b)
                    frontier.append(b)
        if self.sink not in reach:
            raise ValueError("network does not connect source to sink")
        _parameterization(self)  # raises on cyclic elimination

    def to_json(self, path) -> None:
        payload = {
            "nodes": list(self.nodes),
            "source": self.source,
            "sink": self.sink,
            "edges": [list(e) for e in self.edges],
            "designed_capacity": list(self.designed_capacity),
        }
        if self.free_edge_map is not None:
            payload["free_edge_map"] = [list(p) for p in self.free_edge_map]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "FlowNetworkSpec":
        with open(path) as fh:
            payload = json.load(fh)
        edges = tuple((u, v) for u, v in payload["edges"])
        fem = payload.get("free_edge_map")
        return cls(
            nodes=tuple(payload["nodes"]),
            source=payload["source"],
            sink=payload["sink"],
            edges=edges,
            designed_capacity=tuple(payload["designed_capacity"]),
            free_edge_map=tuple((n, e) for n, e in fem) if fem is not None else None,
        )


@dataclass(frozen=True)
class _Parameterization:
    elim_edge: dict
    elim_order: tuple
    free_idx: tuple
    expand: np.ndarray  # (n_edges, n_free) linear map free flows -> all flows

    @property
    def n_free(self) -> int:
        return len(self.free_idx)


@lru_cache(maxsize=64)
def _parameterization(spec: FlowNetworkSpec) -> _Parameterization:
    elim_edge = {n: spec.eliminated_edge(n) for n in spec.internal_nodes}
    if len(set(elim_edge.values())) != len(elim_edge):
        raise ValueError("free_edge_map must designate distinct edges")
    edge_owner = {e: n for n, e in elim_edge.items()}
    # node i depends on node j when j's eliminated edge feeds i's formula
    deps = {}
    for n in spec.internal_nodes:
        used = set(spec.out_edges(n)) | (set(spec.in_edges(n)) - {elim_edge[n]})
        deps[n] = {edge_owner[e] for e in used if e in edge_owner}
    order = []
    ready = [n for n in spec.internal_nodes if not deps[n]]
    pending = {n: set(d) for n, d in deps.items()}
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m_, d in pending.items():
            if n in d:
                d.discard(n)
                if not d and m_ not in order and m_ not in ready:
                    ready.append(m_)
    if len(order) != len(spec.internal_nodes):
        raise ValueError("free_edge_map creates a cyclic elimination; choose different inflow edges")
    free_idx = tuple(i for i in range(spec.n_edges) if i not in edge_owner)
    param = _Parameterization(elim_edge=elim_edge, elim_order=tuple(order), free_idx=free_idx, expand=None)
    cols = [_reparameterize(spec, param, unit) for unit in np.eye(len(free_idx))]
    expand = np.stack(cols, axis=1) if cols else np.zeros((spec.n_edges, 0))
    object.__setattr__(param, "expand", expand)
    return param


def _reparameterize(spec: FlowNetworkSpec, param: _Parameterization, free_flows) -> np.ndarray:
    z = np.zeros(spec.n_edges)
    z[list(param.free_idx)] = np.asarray(free_flows, dtype=float)
    for n in param.elim_order:
        s_out = 0.0
        for e in spec.out_edges(n):
            s_out += z[e]
        s_in = 0.0
        for e in spec.in_edges(n):
            if e != param.elim_edge[n]:
                s_in += z[e]
        z[param.elim_edge[n]] = s_out - s_in
    return z


def reparameterize_flows(spec: FlowNetworkSpec, free_flows) -> np.ndarray:
    """Expand free flows to the full per-edge vector.

    The designated inflow of each internal node is set to (outflow sum) -
    (other inflow sum), so flow conservation holds exactly, not merely to
    rounding, as verified by conservation_residual.
    """
    param = _parameterization(spec)
    free_flows = np.asarray(free_flows, dtype=float)
    if free_flows.shape != (param.n_free,):
        raise ValueError(f"expected {param.n_free} free flows")
    return _reparameterize(spec, param, free_flows)


def conservation_residual(spec: FlowNetworkSpec, z_full) -> np.ndarray:
    """Per-internal-node conservation residual, accumulated in the same
    order as reparameterize_flows so its output is exactly zero there."""
    param = _parameterization(spec)
    z = np.asarray(z_full, dtype=float)
    out = np.empty(len(spec.internal_nodes))
    for k, n in enumerate(spec.internal_nodes):
        s_out = 0.0
        for e in spec.out_edges(n):
            s_out += z[e]
        s_in = 0.0
        for e in spec.in_edges(n):
            if e != param.elim_edge[n]:
                s_in += z[e]
        out[k] = (s_out - s_in) - z[param.elim_edge[n]]
    return out


def free_flow_coordinates(spec: FlowNetworkSpec, z_full) -> np.ndarray:
    param = _parameterization(spec)
    return np.asarray(z_full, dtype=float)[list(param.free_idx)]


def strictly_feasible_free_flows(spec: FlowNetworkSpec, beta, frac: float = 0.4) -> np.ndarray:
    """Deterministic strictly interior flow: a positive combination of one
    source-sink path through every edge, scaled to keep 0 < z < frac*beta."""
    beta = np.asarray(beta, dtype=float)

    def bfs_path(start, goal):
        parent = {start: None}
        queue = [start]
        while queue:
            u = queue.pop(0)
            if u == goal:
                break
            for idx, (a, b) in enumerate(spec.edges):
                if a == u and b not in parent:
                    parent[b] = (u, idx)
                    queue.append(b)
        if goal not in parent:
            return None
        path = []
        node = goal
        while parent[node] is not None:
            u, idx = parent[node]
            path.append(idx)
            node = u
        return path[::-1]

    counts = np.zeros(spec.n_edges)
    for idx, (u, v) in enumerate(spec.edges):
        head = bfs_path(spec.source, u)
        tail = bfs_path(v, spec.sink)
        if head is None or tail is None:
            raise ValueError(f"edge {u}->{v} lies on no source-sink path")
        for e in head + [idx] + tail:
            counts[e] += 1.0
    delta = frac * float(np.min(beta / counts))
    z_full = delta * counts
    free = free_flow_coordinates(spec, z_full)
    rebuilt = reparameterize_flows(spec, free)
    if np.any(rebuilt <= 0) or np.any(beta - rebuilt <= 0):
        raise ValueError("could not construct a strictly feasible flow")
    return free


@dataclass(frozen=True)
class FlowModelParams:
    """Prior settings: half-normal No+(0, scale^2) on beta and z, inverse
    gamma (shape, scale) on the two noise variances."""

    beta_prior_scale: float = 10.0
    z_prior_scale: float = 10.0
    sigma_y2_prior: tuple = (2.0, 5.0)
    sigma_c2_prior: tuple = (5.0, 2.0)

    def __post_init__(self):
        if self.beta_prior_scale <= 0 or self.z_prior_scale <= 0:
            raise ValueError("prior scales must be positive")


@dataclass
class FlowDataset:
    """Replicated flow observations y^s and one capacity measurement c."""

    spec: FlowNetworkSpec
    beta0: np.ndarray
    z0: np.ndarray
    c: np.ndarray
    y: np.ndarray  # (n_obs, n_edges)
    noise_sd: float
    c_noise_sd: float
    seed: int

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    def suff_stats(self):
        ybar = self.y.mean(axis=0)
        sse = ((self.y - ybar) ** 2).sum(axis=0)
        return ybar, sse

    def to_json(self, path) -> None:
        payload = {
            "spec": {
                "nodes": list(self.spec.nodes),
                "source": self.spec.source,
                "sink": self.spec.sink,
                "edges": [list(e) for e in self.spec.edges],
                "designed_capacity": list(self.spec.designed_capacity),
            },
            "beta0": self.beta0.tolist(),
            "z0": self.z0.tolist(),
            "c": self.c.tolist(),
            "y": self.y.tolist(),
            "noise_sd": self.noise_sd,
            "c_noise_sd": self.c_noise_sd,
            "seed": int(self.seed),
        }
        if self.spec.free_edge_map is not None:
            payload["spec"]["free_edge_map"] = [list(p) for p in self.spec.free_edge_map]
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "FlowDataset":
        with open(path) as fh:
            payload = json.load(fh)
        sp = payload["spec"]
        fem = sp.get("free_edge_map")
        spec = FlowNetworkSpec(
            nodes=tuple(sp["nodes"]),
            source=sp["source"],
            sink=sp["sink"],
            edges=tuple((u, v) for u, v in sp["edges"]),
            designed_capacity=tuple(sp["designed_capacity"]),
            free_edge_map=tuple((n, e) for n, e in fem) if fem is not None else None,
        )
        return cls(
            spec=spec,
            beta0=np.array(payload["beta0"]),
            z0=np.array(payload["z0"]),
            c=np.array(payload["c"]),
            y=np.array(payload["y"]),
            noise_sd=float(payload["noise_sd"]),
            c_noise_sd=float(payload["c_noise_sd"]),
            seed=int(payload["seed"]),
        )


# Fixed 7-node / 10-edge synthetic network. Ground-truth capacities were
# drawn once uniform on [1, 5] and frozen as literals so the artifact does
# not depend on any RNG stream. Max flow = 5.4 saturates 5 of 10 edges and
# all optimal flows are strictly positive.
BUNDLED_BETA0 = (2.5, 2.9, 2.1, 1.7, 1.4, 2.3, 1.2, 1.8, 3.1, 2.6)
BUNDLED_EDGES = ((0, 1), (0, 2), (1, 3), (1, 5), (2, 3), (2, 4), (3, 4), (3, 5), (4, 6), (5, 6))


def bundled_network() -> FlowNetworkSpec:
    return FlowNetworkSpec(
        nodes=tuple(range(7)),
        source=0,
        sink=6,
        edges=BUNDLED_EDGES,
        designed_capacity=BUNDLED_BETA0,
    )


def flow_problem(
    spec: FlowNetworkSpec,
    params: FlowModelParams,
    cfg: KernelConfig,
    dataset: FlowDataset,
) -> BridgeProblem:
    """BridgeProblem for the flow network (barrier scale from cfg.barrier_t)."""
    param = _parameterization(spec)
    m = spec.n_edges
    f = param.n_free
    t = cfg.barrier_t
    C = param.expand
    src_out = np.zeros(m)
    src_out[spec.out_edges(spec.source)] = 1.0
    ybar, sse = dataset.suff_stats()
    S = dataset.n_obs
    c_obs = np.asarray(dataset.c, dtype=float)
    sse_total = float(np.sum(sse))
    ay, sy = params.sigma_y2_prior
    ac, sc = params.sigma_c2_prior
    zs2 = params.z_prior_scale**2
    bs2 = params.beta_prior_scale**2

    layout = ParameterLayout((("log_beta", m), ("log_sigma_y2", 1), ("log_sigma_c2", 1), ("z", f)))
    nb = m + 2

    def unpack(bvec):
        beta = np.exp(bvec[:m])
        sig_y2 = np.exp(bvec[m])
        sig_c2 = np.exp(bvec[m + 1])
        return beta, sig_y2, sig_c2

    def domain_guard(bvec, z_free):
        if not (np.all(np.isfinite(bvec)) and np.all(np.isfinite(z_free))):
            return False
        beta = np.exp(bvec[:m])
        z = C @ z_free
        return bool(np.all(z > 0.0) and np.all(beta - z > 0.0))

    def log_g(bvec, z_free, data):
        beta, sig_y2, sig_c2 = unpack(bvec)
        z = C @ z_free
        quad_y = float(np.sum(S * (z - ybar) ** 2)) + sse_total
        val = -quad_y / (2 * sig_y2) - 0.5 * S * m * bvec[m]
        val += -float(np.sum((c_obs - beta) ** 2)) / (2 * sig_c2) - 0.5 * m * bvec[m + 1]
        val += -float(np.sum(z**2)) / (2 * zs2)  # half-normal flow priors (all edges)
        return val

    def grad_log_g(bvec, z_free, data):
        beta, sig_y2, sig_c2 = unpack(bvec)
        z = C @ z_free
        out = np.empty(nb + f)
        out[:m] = (c_obs - beta) / sig_c2 * beta
        quad_y = float(np.sum(S * (z - ybar) ** 2)) + sse_total
        out[m] = quad_y / (2 * sig_y2) - 0.5 * S * m
        out[m + 1] = float(np.sum((c_obs - beta) ** 2)) / (2 * sig_c2) - 0.5 * m
        out[nb:] = C.T @ (-S * (z - ybar) / sig_y2 - z / zs2)
        return out

    def grad_h(bvec, z_free, data):
        beta, _, _ = unpack(bvec)
        z = C @ z_free
        g_full = -src_out - 1.0 / (t * z) + 1.0 / (t * (beta - z))
        return C.T @ g_full

    def hess_zz(bvec, z_free, data):
        beta, _, _ = unpack(bvec)
        z = C @ z_free
        d = (1.0 / z**2 + 1.0 / (beta - z) ** 2) / t
        return C.T @ (d[:, None] * C)

    def hess_zbeta(bvec, z_free, data):
        beta, _, _ = unpack(bvec)
        z = C @ z_free
        out = np.zeros((f, nb))
        out[:, :m] = C.T @ np.diag(-beta / (t * (beta - z) ** 2))
        return out

    def log_prior(bvec):
        beta, sig_y2, sig_c2 = unpack(bvec)
        val = float(np.sum(-(beta**2) / (2 * bs2) + bvec[:m]))
        val += -(ay + 1.0) * bvec[m] - sy / sig_y2 + bvec[m]
        val += -(ac + 1.0) * bvec[m + 1] - sc / sig_c2 + bvec[m + 1]
        return val

    def grad_log_prior(bvec):
        beta, sig_y2, sig_c2 = unpack(bvec)
        out = np.empty(nb)
        out[:m] = -(beta**2) / bs2 + 1.0
        out[m] = -ay + sy / sig_y2
        out[m + 1] = -ac + sc / sig_c2
        return out

    def fused_logpost_grad(bvec, z_free, data, lam):
        # single-pass posterior value and gradient; the sampler's hot path
        if not (np.all(np.isfinite(bvec)) and np.all(np.isfinite(z_free))):
            return -np.inf, None
        beta = np.exp(bvec[:m])
        sig_y2 = np.exp(bvec[m])
        sig_c2 = np.exp(bvec[m + 1])
        z = C @ z_free
        margin = beta - z
        if np.any(z <= 0.0) or np.any(margin <= 0.0):
            return -np.inf, None
        dy = z - ybar
        quad_y = S * float(dy @ dy) + sse_total
        cb = c_obs - beta
        quad_c = float(cb @ cb)
        val = -quad_y / (2 * sig_y2) - 0.5 * S * m * bvec[m]
        val += -quad_c / (2 * sig_c2) - 0.5 * m * bvec[m + 1]
        val += -float(z @ z) / (2 * zs2)
        val += float(np.sum(-(beta**2) / (2 * bs2) + bvec[:m]))
        val += -ay * bvec[m] - sy / sig_y2
        val += -ac * bvec[m + 1] - sc / sig_c2

        grad = np.empty(nb + f)
        grad[:m] = cb / sig_c2 * beta - (beta**2) / bs2 + 1.0
        grad[m] = quad_y / (2 * sig_y2) - 0.5 * S * m - ay + sy / sig_y2
        grad[m + 1] = quad_c / (2 * sig_c2) - 0.5 * m - ac + sc / sig_c2
        grad[nb:] = C.T @ (-S * dy / sig_y2 - z / zs2)
        if lam != 0.0:
            inv_z = 1.0 / z
            inv_m2 = 1.0 / (margin * margin)
            g_full = -src_out - inv_z / t + (margin * inv_m2) / t
            r = C.T @ g_full
            val -= lam * float(r @ r)
            w = C @ r
            dvec = (inv_z * inv_z + inv_m2) / t
            grad[nb:] -= 2.0 * lam * (C.T @ (dvec * w))
            grad[:m] -= 2.0 * lam * (-(beta * inv_m2) / t) * w
        return val, grad

    def h(bvec, z_free, data):
        beta, _, _ = unpack(bvec)
        z = C @ z_free
        return float(-np.sum(z * src_out) - (np.sum(np.log(z)) + np.sum(np.log(beta - z))) / t)

    def grad_h_beta(bvec, z_free, data):
        beta, _, _ = unpack(bvec)
        z = C @ z_free
        out = np.zeros(nb)
        out[:m] = -beta / (t * (beta - z))
        return out

    z_feas = strictly_feasible_free_flows(spec, np.asarray(dataset.beta0, dtype=float))
    z_full0 = reparameterize_flows(spec, z_feas)
    beta_init = np.maximum(np.maximum(c_obs, 1.5 * z_full0 + 0.1), 0.2)
    # start on the implicit-function manifold: barrier stationary point at
    # the initial capacities (high-density region of the bridged posterior)
    try:
        z_init = free_flow_coordinates(spec, barrier_stationary_flows(spec, beta_init, t, z_feas))
    except RuntimeError:
        z_init = z_feas
    sig_y2_init = max(sse_total / max(S * m - 1, 1), 1e-4)
    sig_c2_init = 0.25
    init = np.concatenate([np.log(beta_init), [np.log(sig_y2_init), np.log(sig_c2_init)], z_init])

    return BridgeProblem(
        dim_beta=nb,
        dim_z=f,
        log_g=log_g,
        grad_log_g=grad_log_g,
        grad_h=grad_h,
        hess_zz=hess_zz,
        hess_zbeta=hess_zbeta,
        log_prior=log_prior,
        grad_log_prior=grad_log_prior,
        domain_guard=domain_guard,
        layout=layout,
        data=dataset,
        h=h,
        grad_h_beta=grad_h_beta,
        fused_logpost_grad=fused_logpost_grad,
        init=init,
    )


def barrier_stationary_flows(spec: FlowNetworkSpec, beta, barrier_t: float, z_free0=None) -> np.ndarray:
    """Interior stationary point of the barrier-adjusted max-flow loss at
    fixed capacities: the independent oracle for the sampler's z mode."""
    from ..bridge import gauss_newton_root

    param = _parameterization(spec)
    C = param.expand
    beta = np.asarray(beta, dtype=float)
    m = spec.n_edges
    src_out = np.zeros(m)
    src_out[spec.out_edges(spec.source)] = 1.0
    t = barrier_t

    def residual(z_free):
        z = C @ z_free
        return C.T @ (-src_out - 1.0 / (t * z) + 1.0 / (t * (beta - z)))

    def jac(z_free):
        z = C @ z_free
        d = (1.0 / z**2 + 1.0 / (beta - z) ** 2) / t
        return C.T @ (d[:, None] * C)

    def guard(z_free):
        z = C @ z_free
        return bool(np.all(z > 0) and np.all(beta - z > 0))

    if z_free0 is None:
        z_free0 = strictly_feasible_free_flows(spec, beta)
    res = gauss_newton_root(residual, jac, z_free0, tol=1e-12, max_iters=500, guard=guard)
    if not res.converged:
        raise RuntimeError(f"barrier stationary point did not converge (|r|={res.residual_norm:.3g})")
    return reparameterize_flows(spec, res.x)
