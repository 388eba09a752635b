"""Max-flow oracle: augmenting paths, cut certificates, enumeration cross-check."""

import numpy as np
import pytest

from gradbridge.lp_oracle import conservation_defect, max_flow, min_cut_by_enumeration, verify_cut
from gradbridge.models.flow import FlowNetworkSpec


def make_spec(nodes, source, sink, edges):
    return FlowNetworkSpec(
        nodes=tuple(nodes),
        source=source,
        sink=sink,
        edges=tuple(edges),
        designed_capacity=tuple(1.0 for _ in edges),
        validate=False,
    )


DIAMOND = make_spec(["s", "a", "b", "t"], "s", "t", [("s", "a"), ("s", "b"), ("a", "b"), ("a", "t"), ("b", "t")])
DIAMOND_CAP = np.array([2.0, 2.0, 1.0, 1.0, 3.0])


def test_single_edge():
    spec = make_spec(["s", "t"], "s", "t", [("s", "t")])
    sol = max_flow(spec, [3.0])
    assert sol.value == pytest.approx(3.0)
    assert verify_cut(spec, [3.0], sol)


def test_diamond_value_four():
    # min cut enumeration: cut {a->t, b->t} has capacity 4
    sol = max_flow(DIAMOND, DIAMOND_CAP)
    assert sol.value == pytest.approx(4.0)
    assert verify_cut(DIAMOND, DIAMOND_CAP, sol)
    assert min_cut_by_enumeration(DIAMOND, DIAMOND_CAP) == pytest.approx(4.0)


def test_zero_capacities():
    sol = max_flow(DIAMOND, np.zeros(5))
    assert sol.value == 0.0
    assert verify_cut(DIAMOND, np.zeros(5), sol)


def test_unreachable_sink():
    spec = make_spec(["s", "a", "t"], "s", "t", [("s", "a")])
    sol = max_flow(spec, [5.0])
    assert sol.value == 0.0
    assert sol.cut_capacity == 0.0


def test_conservation_violation_detected():
    sol = max_flow(DIAMOND, DIAMOND_CAP)
    bad = sol.flow.copy()
    bad[2] += 0.5
    from dataclasses import replace

    assert not verify_cut(DIAMOND, DIAMOND_CAP, replace(sol, flow=bad))


def test_integer_capacities_give_integer_value():
    rng = np.random.default_rng(3)
    for trial in range(20):
        n = 6
        nodes = list(range(n))
        edges = []
        for i in range(n):
            for j in range(n):
                if i != j and rng.random() < 0.4:
                    edges.append((i, j))
        if not edges:
            continue
        spec = make_spec(nodes, 0, n - 1, edges)
        caps = rng.integers(0, 9, size=len(edges)).astype(float)
        sol = max_flow(spec, caps)
        assert sol.value == pytest.approx(round(sol.value), abs=1e-9)
        assert verify_cut(spec, caps, sol)


def test_maxflow_equals_mincut_on_random_small_networks():
    rng = np.random.default_rng(11)
    for trial in range(40):
        n = int(rng.integers(3, 9))
        nodes = list(range(n))
        edges = []
        for i in range(n):
            for j in range(n):
                if i != j and rng.random() < 0.45:
                    edges.append((i, j))
        if not edges:
            continue
        spec = make_spec(nodes, 0, n - 1, edges)
        caps = rng.uniform(0.0, 5.0, size=len(edges))
        sol = max_flow(spec, caps)
        assert sol.value == pytest.approx(min_cut_by_enumeration(spec, caps), abs=1e-9)
        assert verify_cut(spec, caps, sol)
        assert conservation_defect(spec, sol.flow) < 1e-9


def test_antiparallel_edges():
    spec = make_spec(["s", "a", "b", "t"], "s", "t", [("s", "a"), ("a", "b"), ("b", "a"), ("a", "t"), ("b", "t"), ("s", "b")])
    caps = np.array([4.0, 2.0, 2.0, 3.0, 3.0, 4.0])
    sol = max_flow(spec, caps)
    assert sol.value == pytest.approx(min_cut_by_enumeration(spec, caps), abs=1e-9)
    assert verify_cut(spec, caps, sol)
