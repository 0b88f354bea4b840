import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cooploc.topology import (InteractionGraph, TopologySnapshot, depth_levels, restrict,
                              topological_order, validate_graph)

FIG2 = InteractionGraph(3, 2, {4: (1, 2, 3), 5: (2, 3, 4)})
BUSY = InteractionGraph(3, 5, {4: (1, 2, 3), 5: (2, 3, 4), 6: (2, 3, 5), 7: (3, 5, 6), 8: (4, 5, 7)})


def oracle_ok(n_l, n, nbrs):
    """Leader-follower clauses checked directly on the edge lists."""
    if n_l < 3:
        return False
    for i in range(1, n + 1):
        nb = nbrs.get(i, ())
        if i <= n_l and nb:
            return False
        if any(j >= i for j in nb):
            return False
    roots = sum(1 for i in range(1, n + 1) if not nbrs.get(i, ()))
    return roots >= 3


def test_fig2_and_busy_pass():
    assert validate_graph(FIG2).ok
    assert validate_graph(BUSY).ok
    assert str(validate_graph(BUSY)) == "ok"


def test_landmark_with_neighbors_fails():
    g = InteractionGraph(3, 1, {2: (1,), 4: (1, 2, 3)})
    rep = validate_graph(g)
    assert not rep
    assert any("landmark has neighbors" in v for v in rep.violations)


def test_named_violations():
    rep = validate_graph(InteractionGraph(2, 1, {3: (1, 2)}))
    assert any("n_l < 3" in v for v in rep.violations)
    assert any("fewer than 3 roots" in v for v in rep.violations)
    rep = validate_graph(InteractionGraph(3, 2, {4: (1, 5), 5: (1, 2)}))
    assert any("forward edge j >= i" in v for v in rep.violations)
    rep = validate_graph(InteractionGraph(3, 1, {4: (1, 1)}))
    assert any("twice" in v for v in rep.violations)
    rep = validate_graph(InteractionGraph(3, 1, {4: (1, 9)}))
    assert any("unknown" in v for v in rep.violations)


def _all_digraphs(n, allowed):
    edges = [(i, j) for i in range(1, n + 1) for j in range(1, n + 1) if allowed(i, j)]
    for bits in range(1 << len(edges)):
        nbrs = {}
        for k, (i, j) in enumerate(edges):
            if bits >> k & 1:
                nbrs.setdefault(i, []).append(j)
        yield {i: tuple(v) for i, v in nbrs.items()}


def test_validate_exhaustive_small():
    checked = 0
    for n in range(1, 5):
        for n_l in range(0, n + 1):
            for nbrs in _all_digraphs(n, lambda i, j: i != j):
                g = InteractionGraph(n_l, n - n_l, nbrs)
                assert validate_graph(g).ok == oracle_ok(n_l, n, nbrs), (n_l, nbrs)
                checked += 1
    assert checked > 20000


def test_validate_exhaustive_backward_n5():
    for n_l in range(0, 6):
        for nbrs in _all_digraphs(5, lambda i, j: j < i):
            g = InteractionGraph(n_l, 5 - n_l, nbrs)
            assert validate_graph(g).ok == oracle_ok(n_l, 5, nbrs)


@st.composite
def any_graph(draw):
    n = draw(st.integers(1, 7))
    n_l = draw(st.integers(0, n))
    nbrs = {}
    for i in range(1, n + 1):
        nbrs[i] = tuple(draw(st.lists(st.integers(1, n), unique=True, max_size=n)))
    return n_l, n, nbrs


@given(any_graph())
def test_validate_matches_oracle(g):
    n_l, n, nbrs = g
    nbrs = {i: tuple(j for j in v if j != i) for i, v in nbrs.items()}
    assert validate_graph(InteractionGraph(n_l, n - n_l, nbrs)).ok == oracle_ok(n_l, n, nbrs)


@st.composite
def valid_graph(draw):
    n_l = draw(st.integers(3, 5))
    n_v = draw(st.integers(0, 6))
    nbrs = {}
    for i in range(n_l + 1, n_l + n_v + 1):
        nbrs[i] = tuple(draw(st.lists(st.integers(1, i - 1), unique=True, max_size=5)))
    return InteractionGraph(n_l, n_v, nbrs)


@given(valid_graph())
def test_topological_order_is_consistent(g):
    order = topological_order(g)
    assert sorted(order) == list(g.vehicle_ids)
    pos = {i: k for k, i in enumerate(order)}
    for i, j in g.edges():
        if not g.is_landmark(j):
            assert pos[j] < pos[i]


def test_order_examples():
    assert topological_order(FIG2) == [4, 5]
    assert topological_order(BUSY) == [4, 5, 6, 7, 8]
    indep = InteractionGraph(3, 2, {4: (1, 2, 3), 5: (1, 2, 3)})
    assert sorted(topological_order(indep)) == [4, 5]


def test_cycle_rejected():
    g = InteractionGraph(3, 2, {4: (1, 5), 5: (4,)})
    with pytest.raises(ValueError, match="cycle"):
        topological_order(g)


def test_depth_levels():
    assert depth_levels(BUSY) == {4: 0, 5: 1, 6: 2, 7: 3, 8: 4}


def test_restrict_and_bitmask():
    snap = restrict(BUSY, {5: (4, 2, 9), 8: (7,)}, 1.5)
    assert isinstance(snap, TopologySnapshot)
    assert snap.active(5) == (2, 4)  # declared order kept, undeclared edges dropped
    assert snap.active(6) == ()
    assert snap.bitmask(BUSY, 5) == 0b101
    assert snap.bitmask(BUSY, 8) == 0b100
    for i in BUSY.vehicle_ids:
        assert set(snap.active(i)) <= set(BUSY.neighbors_of(i))


def test_graph_accessors():
    assert FIG2.n == 5
    assert list(FIG2.landmark_ids) == [1, 2, 3]
    assert list(FIG2.vehicle_ids) == [4, 5]
    assert FIG2.m(5) == 3 and FIG2.m(1) == 0
    assert FIG2.edges() == [(4, 1), (4, 2), (4, 3), (5, 2), (5, 3), (5, 4)]
    assert list(itertools.chain(*FIG2.neighbors.values())) == [1, 2, 3, 2, 3, 4]
