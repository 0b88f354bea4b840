"""Leader-follower interaction graph and its time-varying active subgraph.

Agent ids are 1-based. Landmarks occupy ``1..n_landmarks`` and vehicles
``n_landmarks+1..n``. Each vehicle lists its neighbours in a fixed order,
which is the stacking order of its measurement rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Dict, List, Mapping, Sequence, Tuple

MIN_LANDMARKS = 3


@dataclass(frozen=True)
class InteractionGraph:
    n_landmarks: int
    n_vehicles: int
    neighbors: Mapping[int, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        # freeze neighbour lists into tuples; missing vertices get no neighbours
        frozen = {int(i): tuple(int(j) for j in nb) for i, nb in self.neighbors.items()}
        object.__setattr__(self, "neighbors", frozen)

    @property
    def n(self) -> int:
        return self.n_landmarks + self.n_vehicles

    @property
    def landmark_ids(self) -> range:
        return range(1, self.n_landmarks + 1)

    @property
    def vehicle_ids(self) -> range:
        return range(self.n_landmarks + 1, self.n + 1)

    def is_landmark(self, i: int) -> bool:
        return 1 <= i <= self.n_landmarks

    def neighbors_of(self, i: int) -> Tuple[int, ...]:
        return self.neighbors.get(i, ())

    def m(self, i: int) -> int:
        return len(self.neighbors_of(i))

    def edges(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in sorted(self.neighbors) for j in self.neighbors[i]]


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "ok" if self.ok else "; ".join(self.violations)


@dataclass(frozen=True)
class TopologySnapshot:
    time: float
    active_edges: Mapping[int, Tuple[int, ...]]

    def active(self, i: int) -> Tuple[int, ...]:
        return self.active_edges.get(i, ())

    def bitmask(self, graph: InteractionGraph, i: int) -> int:
        """Bit ``k`` is set when the k-th declared neighbour of ``i`` is active."""
        act = set(self.active(i))
        return sum(1 << k for k, j in enumerate(graph.neighbors_of(i)) if j in act)


def validate_graph(g: InteractionGraph) -> ValidationReport:
    """Check the leader-follower assumptions and name every violation."""
    rep = ValidationReport()
    if g.n_landmarks < MIN_LANDMARKS:
        rep.violations.append(
            f"n_l < 3: at least three landmark agents are required (got {g.n_landmarks})")
    if g.n_vehicles < 0:
        rep.violations.append("negative vehicle count")
    for i, nb in sorted(g.neighbors.items()):
        if not 1 <= i <= g.n:
            rep.violations.append(f"unknown agent {i} has a neighbour list")
            continue
        if len(set(nb)) != len(nb):
            rep.violations.append(f"agent {i} lists a neighbour twice")
        bad = [j for j in nb if not 1 <= j <= g.n]
        if bad:
            rep.violations.append(f"agent {i} has unknown neighbours {bad}")
        if g.is_landmark(i):
            if nb:
                rep.violations.append(f"landmark has neighbors: agent {i} -> {list(nb)}")
        else:
            fwd = [j for j in nb if j >= i]
            if fwd:
                rep.violations.append(f"forward edge j >= i: agent {i} -> {fwd}")
    roots = sum(1 for i in range(1, g.n + 1) if not g.neighbors_of(i))
    if roots < MIN_LANDMARKS:
        rep.violations.append(f"fewer than 3 roots (got {roots})")
    return rep


def topological_order(g: InteractionGraph) -> List[int]:
    """Vehicle ids ordered so every vehicle follows its vehicle neighbours.

    Ties are broken by ascending id, so the order is reproducible.
    """
    ts = TopologicalSorter()
    for i in g.vehicle_ids:
        ts.add(i, *[j for j in g.neighbors_of(i) if not g.is_landmark(j)])
    try:
        ts.prepare()
    except CycleError as exc:
        raise ValueError(f"interaction graph has a cycle: {exc.args[1]}") from exc
    order: List[int] = []
    while ts.is_active():
        ready = sorted(ts.get_ready())
        order.extend(ready)
        ts.done(*ready)
    return [i for i in order if not g.is_landmark(i)]


def depth_levels(g: InteractionGraph) -> Dict[int, int]:
    """Longest vehicle-path depth of each vehicle (landmark-only neighbours -> 0)."""
    depth: Dict[int, int] = {}
    for i in topological_order(g):
        ups = [depth[j] + 1 for j in g.neighbors_of(i) if j in depth]
        depth[i] = max(ups, default=0)
    return depth


def restrict(g: InteractionGraph, active: Mapping[int, Sequence[int]], time: float) -> TopologySnapshot:
    """Snapshot keeping only declared edges, in declared order."""
    out = {}
    for i in g.vehicle_ids:
        keep = set(active.get(i, ()))
        out[i] = tuple(j for j in g.neighbors_of(i) if j in keep)
    return TopologySnapshot(time, out)
