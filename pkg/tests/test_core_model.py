import itertools
import random

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcs.core_model import (
    DuplicateServiceId,
    EmptyInput,
    HealthStatus,
    SelfDependency,
    TopologyError,
    UnknownService,
    build_dependency_graph,
    classify_failures,
    impacted_by,
    parse_topology,
    worst_status,
)

from conftest import chain_graph, svc

H, U, G, D = HealthStatus.HEALTHY, HealthStatus.UNKNOWN, HealthStatus.DEGRADED, HealthStatus.DOWN


def brute_force_roots(nodes, edges, statuses):
    """Failing nodes with no failing node reachable along requires-edges (DAG only)."""
    succ = {n: [d for (s, d) in edges if s == n] for n in nodes}
    roots = set()
    for n in nodes:
        if not statuses[n].failing:
            continue
        seen, todo, blamed = set(), list(succ[n]), False
        while todo:
            m = todo.pop()
            if m in seen:
                continue
            seen.add(m)
            if statuses[m].failing:
                blamed = True
                break
            todo.extend(succ[m])
        if not blamed:
            roots.add(n)
    return roots


def random_dag(rng, n, p=0.35):
    nodes = [f"s{i}" for i in range(n)]
    edges = [(nodes[j], nodes[i]) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return nodes, edges


# ---- build_dependency_graph ----

def test_three_chain_has_three_singleton_sccs():
    g = build_dependency_graph(svc("A", "B", "C"), [("C", "B"), ("B", "A")])
    assert g.nodes == {"A", "B", "C"}
    assert g.edges == {("C", "B"), ("B", "A")}
    assert sorted(len(c) for c in g.components) == [1, 1, 1]


def test_single_node_graph():
    g = build_dependency_graph(svc("A"), [])
    assert g.nodes == {"A"} and not g.edges


def test_two_cycle_is_one_scc():
    g = build_dependency_graph(svc("A", "B"), [("A", "B"), ("B", "A")])
    assert g.components == (("A", "B"),)
    # textbook check
    ref = list(nx.strongly_connected_components(nx.DiGraph([("A", "B"), ("B", "A")])))
    assert ref == [{"A", "B"}]


def test_duplicate_edges_collapse():
    g = build_dependency_graph(svc("A", "B"), [("B", "A"), ("B", "A")])
    assert len(g.edges) == 1


@pytest.mark.parametrize(
    "services, edges, exc",
    [
        (svc("A"), [("A", "Z")], UnknownService),
        (svc("A"), [("A", "A")], SelfDependency),
        (svc("A", "A"), [], DuplicateServiceId),
    ],
)
def test_build_errors(services, edges, exc):
    with pytest.raises(exc):
        build_dependency_graph(services, edges)


def test_scc_matches_networkx_on_random_digraphs():
    rng = random.Random(7)
    for _ in range(300):
        n = rng.randint(1, 10)
        nodes = [f"n{i}" for i in range(n)]
        edges = [(a, b) for a in nodes for b in nodes if a != b and rng.random() < 0.2]
        g = build_dependency_graph(svc(*nodes), edges)
        ref = nx.DiGraph()
        ref.add_nodes_from(nodes)
        ref.add_edges_from(edges)
        assert {frozenset(c) for c in g.components} == {frozenset(c) for c in nx.strongly_connected_components(ref)}
        # sinks-first order: every condensed edge points to an earlier component
        for i, deps in g.component_edges.items():
            assert all(j < i for j in deps)


# ---- classify_failures ----

def test_chain_all_down_blames_a():
    r = classify_failures(chain_graph("C", "B", "A"), {"A": D, "B": D, "C": D})
    assert r.roots == {"A"} and r.propagated == {"B", "C"}


def test_all_healthy_has_no_roots():
    r = classify_failures(chain_graph("C", "B", "A"), {"A": H, "B": H, "C": H})
    assert not r.roots and not r.propagated and r.healthy == {"A", "B", "C"}


def test_diamond_with_healthy_bottom():
    g = build_dependency_graph(svc("A", "B", "C", "D"), [("D", "B"), ("D", "C"), ("B", "A"), ("C", "A")])
    statuses = {"A": H, "B": D, "C": D, "D": D}
    r = classify_failures(g, statuses)
    assert brute_force_roots(sorted(g.nodes), g.edges, statuses) == {"B", "C"}
    assert r.roots == {"B", "C"} and r.propagated == {"D"}


def test_unknown_dependency_does_not_absolve():
    r = classify_failures(chain_graph("B", "A"), {"A": U, "B": D})
    assert r.roots == {"B"} and r.unknown == {"A"}


def test_missing_status_counts_as_unknown():
    r = classify_failures(chain_graph("B", "A"), {"B": G})
    assert r.unknown == {"A"} and r.roots == {"B"}


def test_failing_cycle_members_are_all_roots():
    g = build_dependency_graph(svc("A", "B", "C"), [("A", "B"), ("B", "A"), ("C", "A")])
    r = classify_failures(g, {"A": D, "B": G, "C": D})
    assert r.roots == {"A", "B"} and r.propagated == {"C"}


def test_oracle_equivalence_on_random_dags():
    rng = random.Random(2024)
    statuses_pool = [H, U, G, D]
    mismatches = 0
    for _ in range(1500):
        nodes, edges = random_dag(rng, rng.randint(1, 8))
        statuses = {n: rng.choice(statuses_pool) for n in nodes}
        got = classify_failures(build_dependency_graph(svc(*nodes), edges), statuses)
        mismatches += got.roots != brute_force_roots(nodes, edges, statuses)
    assert mismatches == 0


@st.composite
def graphs_with_statuses(draw, max_n=12):
    n = draw(st.integers(1, max_n))
    nodes = [f"s{i}" for i in range(n)]
    pairs = [(a, b) for a in nodes for b in nodes if a != b]
    edges = draw(st.lists(st.sampled_from(pairs), max_size=3 * n)) if pairs else []
    statuses = {x: draw(st.sampled_from([H, U, G, D])) for x in nodes}
    return nodes, edges, statuses


@given(graphs_with_statuses())
@settings(max_examples=200, deadline=None)
def test_partition_property(case):
    nodes, edges, statuses = case
    r = classify_failures(build_dependency_graph(svc(*nodes), edges), statuses)
    parts = [r.roots, r.propagated, r.healthy, r.unknown]
    for a, b in itertools.combinations(parts, 2):
        assert not (a & b)
    assert set().union(*parts) == set(nodes)
    assert r.roots | r.propagated == {n for n, s in statuses.items() if s.failing}


@given(graphs_with_statuses(), st.data())
@settings(max_examples=200, deadline=None)
def test_monotone_under_new_failure(case, data):
    nodes, edges, statuses = case
    healthy = [n for n, s in statuses.items() if s is H]
    if not healthy:
        return
    g = build_dependency_graph(svc(*nodes), edges)
    before = classify_failures(g, statuses)
    flipped = dict(statuses)
    flipped[data.draw(st.sampled_from(healthy))] = D
    after = classify_failures(g, flipped)
    assert (before.roots | before.propagated) <= (after.roots | after.propagated)


# ---- impacted_by ----

def test_impacted_by_chain():
    g = chain_graph("C", "B", "A")
    assert impacted_by(g, "A") == {"B", "C"}
    assert impacted_by(g, "C") == set()


def test_impacted_by_diamond():
    g = build_dependency_graph(svc("A", "B", "C", "D"), [("D", "B"), ("D", "C"), ("B", "A"), ("C", "A")])
    assert impacted_by(g, "A") == {"B", "C", "D"}


def test_impacted_by_unknown():
    with pytest.raises(UnknownService):
        impacted_by(chain_graph("B", "A"), "Z")


@given(graphs_with_statuses(max_n=9))
@settings(max_examples=150, deadline=None)
def test_impacted_by_is_reverse_reachability(case):
    nodes, edges, _ = case
    g = build_dependency_graph(svc(*nodes), edges)
    ref = nx.DiGraph()
    ref.add_nodes_from(nodes)
    ref.add_edges_from(g.edges)
    for r in nodes:
        got = impacted_by(g, r)
        assert r not in got
        assert got == {x for x in nodes if x != r and nx.has_path(ref, x, r)}


# ---- worst_status ----

@pytest.mark.parametrize(
    "statuses, expected",
    [([H, H], H), ([H, D, G], D), ([U, H], U)],
)
def test_worst_status_examples(statuses, expected):
    assert worst_status(statuses) is expected


def test_worst_status_empty():
    with pytest.raises(EmptyInput):
        worst_status([])


@given(st.lists(st.sampled_from(list(HealthStatus)), min_size=3, max_size=3))
def test_worst_status_semilattice(xs):
    a, b, c = xs
    assert worst_status([worst_status([a, b]), c]) is worst_status([a, worst_status([b, c])])
    assert worst_status([a, b]) is worst_status([b, a])
    assert worst_status([a, a]) is a


# ---- topology file ----

TOPOLOGY = """{
  "services": [
    {"id": "A", "probe_address": "127.0.0.1:7001", "probe_path": "/health"},
    {"id": "B", "probe_address": "127.0.0.1:7002", "probe_path": "/health"}
  ],
  "requires": [
    ["B", "A"]
  ]
}"""


def test_parse_topology():
    g = parse_topology(TOPOLOGY)
    assert g.edges == {("B", "A")}
    assert g.services["A"].probe_address == "127.0.0.1:7001"


def test_topology_syntax_error_has_line():
    broken = TOPOLOGY.replace('"B", "A"]', '"B", "A"')
    with pytest.raises(TopologyError) as ei:
        parse_topology(broken, "topo.json")
    assert ei.value.line is not None and "topo.json:" in str(ei.value)


def test_topology_unknown_service_points_at_edge_line():
    bad = TOPOLOGY.replace('["B", "A"]', '["B", "Z"]')
    with pytest.raises(TopologyError) as ei:
        parse_topology(bad)
    assert ei.value.line == 7


def test_topology_duplicate_id_line():
    bad = TOPOLOGY.replace('"id": "B"', '"id": "A"')
    with pytest.raises(TopologyError) as ei:
        parse_topology(bad)
    assert ei.value.line == 4
