"""Communication graph and the per-coordinate estimator graph.

The communication graph has one vertex per subsystem; an edge (j, k) means
estimator k receives messages from estimator j.  The extended graph refines
this to one vertex per (estimator, state label) pair.  Its edges record why
an estimate travels: either a physical coupling forces the assigned owner of
an external state to transmit it ("coupling" edges), or two estimators share
a coordinate and the receiver runs a consensus correction on it ("fusion"
edges).  Vertex out-degrees count the quadratic bounding terms the synthesis
charges against the transmitting coordinate, so parallel edges are kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model import InterconnectedSystem, StateLabel
from .partition import AssignmentFunction, SelectionFunction


class GraphError(ValueError):
    pass


Vertex = tuple[int, StateLabel]  # (estimator, state label)


@dataclass(frozen=True)
class CommGraph:
    """Directed communication topology over subsystems 1..N (no self-loops)."""

    N: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))
        for (j, k) in self.edges:
            if j == k:
                raise GraphError(f"self-loop ({j},{k}) is not allowed")
            if not (1 <= j <= self.N and 1 <= k <= self.N):
                raise GraphError(f"edge ({j},{k}) out of range for N={self.N}")

    def senders_to(self, k: int) -> tuple[int, ...]:
        """Subsystems that transmit to k, sorted."""
        return tuple(sorted(j for (j, kk) in self.edges if kk == k))


class ExtEdge(NamedTuple):
    tail: Vertex
    head: Vertex
    kind: str  # "coupling" | "fusion"


@dataclass(frozen=True)
class ExtendedGraph:
    vertices: tuple[Vertex, ...]
    edges: tuple[ExtEdge, ...]        # parallel edges preserved
    out_degree: dict = field(compare=False, default=None)

    def __post_init__(self):
        deg = {v: 0 for v in self.vertices}
        for e in self.edges:
            deg[e.tail] += 1
        object.__setattr__(self, "out_degree", deg)

    def q(self, estimator: int, label: StateLabel) -> int:
        return self.out_degree.get((estimator, label), 0)


@dataclass(frozen=True)
class MissingCommEdge:
    estimator: int          # receiver k whose coordinate needs the estimate
    state: StateLabel       # the coupled local coordinate
    external: StateLabel    # the external state driving it
    required_edge: tuple[int, int] | None  # (owner, k); None if no owner assigned


@dataclass(frozen=True)
class CommRequirementReport:
    ok: bool
    missing: tuple[MissingCommEdge, ...]

    def __bool__(self) -> bool:
        return self.ok

    def required_edges(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted({m.required_edge for m in self.missing if m.required_edge}))


def check_comm_requirements(sys: InterconnectedSystem,
                            selections: Sequence[SelectionFunction],
                            assignment: AssignmentFunction,
                            graph: CommGraph) -> CommRequirementReport:
    """Verify the topology supports every external coupling.

    For every estimator k, every selected state coupled to an external state
    must be reachable: the external state needs an assigned owner, and that
    owner must have a communication edge into k.
    """
    space = sys.index_space
    missing = []
    for sel in selections:
        idx = space.positions(sel.states)
        for i, lab in zip(idx, sel.states):
            for j in np.flatnonzero(sys.A[i, :]):
                ext = space.label_at(int(j))
                if ext in sel:
                    continue
                owner = assignment.estimator_of(ext)
                if owner is None:
                    missing.append(MissingCommEdge(sel.owner, lab, ext, None))
                elif owner != sel.owner and (owner, sel.owner) not in graph.edges:
                    missing.append(MissingCommEdge(sel.owner, lab, ext, (owner, sel.owner)))
    return CommRequirementReport(not missing, tuple(missing))


def build_extended_graph(sys: InterconnectedSystem,
                         selections: Sequence[SelectionFunction],
                         assignment: AssignmentFunction,
                         graph: CommGraph) -> ExtendedGraph:
    """Construct the per-coordinate graph from couplings and overlaps.

    Coupling part: for each estimator k, each external state with a nonzero
    column adds one edge (owner, external) -> (k, coupled coordinate) per
    coupled coordinate.  Fusion part: for each sender j of k and each shared
    coordinate, add (j, coord) -> (k, coord).  Requires the communication
    check to pass.
    """
    req = check_comm_requirements(sys, selections, assignment, graph)
    if not req.ok:
        raise GraphError(f"communication requirements not satisfied: "
                         f"{len(req.missing)} missing edge(s), "
                         f"first: {req.missing[0]}")
    space = sys.index_space
    vertices = tuple((sel.owner, lab) for sel in selections for lab in sel.states)
    edges: list[ExtEdge] = []
    for sel in selections:
        k = sel.owner
        idx = space.positions(sel.states)
        ext_labels = sorted({space.label_at(int(j))
                             for i in idx for j in np.flatnonzero(sys.A[i, :])
                             if space.label_at(int(j)) not in sel})
        for ext in ext_labels:
            col = sys.A[idx, space.position(ext)]
            owner = assignment.estimator_of(ext)
            for pos in np.flatnonzero(col):
                edges.append(ExtEdge((owner, ext), (k, sel.states[int(pos)]), "coupling"))
        for j in graph.senders_to(k):
            other = selections[j - 1]
            for lab in sel.states:
                if lab in other:
                    edges.append(ExtEdge((j, lab), (k, lab), "fusion"))
    edges.sort()
    return ExtendedGraph(vertices, tuple(edges))


# ---------------------------------------------------------------------------
# DOT export

def export_dot(graph: CommGraph | ExtendedGraph, name: str = "coopest") -> str:
    """Deterministic Graphviz text; fusion edges are dashed."""
    lines = [f"digraph {name} {{"]
    if isinstance(graph, CommGraph):
        for k in range(1, graph.N + 1):
            lines.append(f'  "{k}";')
        for (j, k) in sorted(graph.edges):
            lines.append(f'  "{j}" -> "{k}";')
    else:
        def vid(v: Vertex) -> str:
            (k, (a, b)) = v
            return f"{k}_{a}_{b}"

        def vlabel(v: Vertex) -> str:
            (k, (a, b)) = v
            return f"{k}:({a},{b})"

        by_owner: dict[int, list[Vertex]] = {}
        for v in sorted(graph.vertices):
            by_owner.setdefault(v[0], []).append(v)
        for k in sorted(by_owner):
            lines.append(f"  subgraph cluster_{k} {{")
            lines.append(f'    label="estimator {k}";')
            for v in by_owner[k]:
                lines.append(f'    "{vid(v)}" [label="{vlabel(v)}"];')
            lines.append("  }")
        for e in sorted(graph.edges):
            style = ' [style=dashed]' if e.kind == "fusion" else ""
            lines.append(f'  "{vid(e.tail)}" -> "{vid(e.head)}"{style};')
    lines.append("}")
    return "\n".join(lines) + "\n"
