"""Exact max-flow oracle, independent of the sampler.

Shortest-augmenting-path (Edmonds-Karp) max flow with real-valued
capacities, plus a min-cut certificate extracted from the final residual
graph. Used to generate ground truth for the flow-network model tests.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from itertools import combinations

import numpy as np

RESIDUAL_TOL = 1e-12


@dataclass
class FlowSolution:
    """A feasible s-t flow with its certifying cut.

    cut_reachable is the source side of the certified cut in the residual
    graph; cut_edges the indices of spec edges crossing it.
    """

    value: float
    flow: np.ndarray
    cut_reachable: frozenset
    cut_edges: tuple[int, ...]
    cut_capacity: float


def _adjacency(spec):
    adj: dict = {n: [] for n in spec.nodes}
    for idx, (u, v) in enumerate(spec.edges):
        adj[u].append((v, idx))
    return adj


def max_flow(spec, capacities) -> FlowSolution:
    """Maximum s-t flow via BFS augmenting paths on the residual graph.

    Capacities may be real; augmentation stops when no path with residual
    capacity above RESIDUAL_TOL remains. Unreachable sink gives value 0 with
    the trivial cut certificate.
    """
    cap = np.asarray(capacities, dtype=float)
    if cap.shape != (len(spec.edges),):
        raise ValueError("capacities must match the edge list")
    if np.any(cap < 0):
        raise ValueError("capacities must be nonnegative")
    if len(set(map(tuple, spec.edges))) != len(spec.edges):
        raise ValueError("parallel duplicate edges are not supported")

    nodes = list(spec.nodes)
    # residual capacities on ordered node pairs; forward edges seeded from cap
    residual: dict = {n: {} for n in nodes}
    for idx, (u, v) in enumerate(spec.edges):
        residual[u][v] = residual[u].get(v, 0.0) + cap[idx]
        residual[v].setdefault(u, 0.0)

    def bfs_path():
        parent = {spec.source: None}
        queue = deque([spec.source])
        while queue:
            u = queue.popleft()
            if u == spec.sink:
                break
            for v, r in residual[u].items():
                if v not in parent and r > RESIDUAL_TOL:
                    parent[v] = u
                    queue.append(v)
        if spec.sink not in parent:
            return None
        path = []
        v = spec.sink
        while parent[v] is not None:
            u = parent[v]
            path.append((u, v))
            v = u
        return path[::-1]

    value = 0.0
    while True:
        path = bfs_path()
        if path is None:
            break
        bottleneck = min(residual[u][v] for u, v in path)
        for u, v in path:
            residual[u][v] -= bottleneck
            residual[v][u] += bottleneck
        value += bottleneck

    # source side of the min cut = nodes reachable in the final residual graph
    reach = {spec.source}
    queue = deque([spec.source])
    while queue:
        u = queue.popleft()
        for v, r in residual[u].items():
            if v not in reach and r > RESIDUAL_TOL:
                reach.add(v)
                queue.append(v)

    # recover per-edge flows; antiparallel pairs cancel into their net direction
    flow = np.zeros(len(spec.edges))
    for idx, (u, v) in enumerate(spec.edges):
        net = cap[idx] - residual[u][v]
        flow[idx] = min(max(net, 0.0), cap[idx])

    cut_edges = tuple(i for i, (u, v) in enumerate(spec.edges) if u in reach and v not in reach)
    cut_capacity = float(sum(cap[i] for i in cut_edges))
    return FlowSolution(float(value), flow, frozenset(reach), cut_edges, cut_capacity)


def conservation_defect(spec, flow) -> float:
    """Largest |inflow - outflow| over internal nodes."""
    flow = np.asarray(flow, dtype=float)
    worst = 0.0
    for n in spec.nodes:
        if n in (spec.source, spec.sink):
            continue
        bal = 0.0
        for idx, (u, v) in enumerate(spec.edges):
            if u == n:
                bal -= flow[idx]
            if v == n:
                bal += flow[idx]
        worst = max(worst, abs(bal))
    return worst


def verify_cut(spec, capacities, solution: FlowSolution, atol: float = 1e-9) -> bool:
    """True iff the certificate cut matches the flow value and the flow is feasible."""
    cap = np.asarray(capacities, dtype=float)
    flow = np.asarray(solution.flow, dtype=float)
    if np.any(flow < -atol) or np.any(flow > cap + atol):
        return False
    if conservation_defect(spec, flow) > atol:
        return False
    out_src = sum(flow[i] for i, (u, _) in enumerate(spec.edges) if u == spec.source)
    in_src = sum(flow[i] for i, (_, v) in enumerate(spec.edges) if v == spec.source)
    in_sink = sum(flow[i] for i, (_, v) in enumerate(spec.edges) if v == spec.sink)
    out_sink = sum(flow[i] for i, (u, _) in enumerate(spec.edges) if u == spec.sink)
    if abs((out_src - in_src) - solution.value) > atol:
        return False
    if abs((in_sink - out_sink) - solution.value) > atol:
        return False
    return abs(solution.cut_capacity - solution.value) <= atol


def min_cut_by_enumeration(spec, capacities) -> float:
    """Exhaustive min s-t cut; testing oracle for small networks only."""
    internal = [n for n in spec.nodes if n not in (spec.source, spec.sink)]
    if len(internal) > 20:
        raise ValueError("enumeration oracle limited to small networks")
    cap = np.asarray(capacities, dtype=float)
    best = np.inf
    for r in range(len(internal) + 1):
        for chosen in combinations(internal, r):
            side = {spec.source, *chosen}
            cut = sum(cap[i] for i, (u, v) in enumerate(spec.edges) if u in side and v not in side)
            best = min(best, cut)
    return float(best)
