"""State-space partitioning for reduced-order estimators.

Each estimator k reconstructs an ordered subset of the global scalar states
(its *partial state vector*).  A selection function fixes that subset and its
local ordering; an assignment function picks, for every scalar state, the
single estimator that publishes its estimate to others.  The repartition
operation permutes the global dynamics into the local block form

    [xdot_local; xdot_rest] = [[A_loc, A_ext], [*, *]] [x_local; x_rest] + ...

where only the columns of A_ext that are actually nonzero (the *external
couplings*) are retained, keyed by the state label they belong to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import InterconnectedSystem, ModelError, StateIndexSpace, StateLabel


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionFunction:
    """Ordered choice of global state labels estimated by one subsystem.

    ``states[i]`` is the label held at local position i (0-based internally;
    user-facing formats are 1-based).
    """

    owner: int
    states: tuple[StateLabel, ...]
    _pos: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        states = tuple((int(k), int(i)) for (k, i) in self.states)
        object.__setattr__(self, "states", states)
        pos = {lab: i for i, lab in enumerate(states)}
        if len(pos) != len(states):
            raise PartitionError(f"selection for estimator {self.owner} repeats a state label")
        if not states:
            raise PartitionError(f"selection for estimator {self.owner} is empty")
        object.__setattr__(self, "_pos", pos)

    @property
    def size(self) -> int:
        return len(self.states)

    def __contains__(self, label: StateLabel) -> bool:
        return label in self._pos

    def position_of(self, label: StateLabel) -> int:
        """Local position (0-based) of a label; inverse of ``states[...]``."""
        try:
            return self._pos[label]
        except KeyError:
            raise PartitionError(f"state {label} is not estimated by estimator {self.owner}") from None


@dataclass(frozen=True)
class AssignmentFunction:
    """Maps each state label to the estimator responsible for publishing it.

    Unassigned labels (no estimator covers them) are simply absent.
    """

    owner: Mapping[StateLabel, int]

    def __post_init__(self):
        object.__setattr__(self, "owner", dict(self.owner))

    def estimator_of(self, label: StateLabel) -> int | None:
        return self.owner.get(label)

    def __eq__(self, other):
        return isinstance(other, AssignmentFunction) and self.owner == other.owner


@dataclass(frozen=True)
class PartitionReport:
    """Result of checking that every output is expressible in local states."""

    ok: bool
    violations: tuple[tuple[int, StateLabel], ...]  # (estimator, state read but not selected)

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class AssignmentReport:
    ok: bool
    wrong_owner: tuple[tuple[StateLabel, int], ...]  # assigned estimator does not select it
    unassigned: tuple[StateLabel, ...]               # covered but no assignment
    uncovered: tuple[StateLabel, ...]                # in no selection at all (fatal)

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class RepartitionedSystem:
    """Global dynamics permuted to one estimator's local coordinates.

    ``coupling_cols[label]`` holds the column of the external-coupling block
    that multiplies the (global) state ``label``; ``external`` lists those
    labels in canonical global order.  Complement blocks describe the
    remaining coordinates and are kept for diagnostics only.
    """

    owner: int
    states: tuple[StateLabel, ...]
    A: np.ndarray                     # sigma x sigma, local self-dynamics
    B: np.ndarray                     # sigma x m
    C: np.ndarray                     # r_k x sigma, local output map
    external: tuple[StateLabel, ...]
    coupling_cols: Mapping[StateLabel, np.ndarray]
    complement: tuple[StateLabel, ...]
    A_comp: np.ndarray                # complement self-block
    A_comp_cross: np.ndarray          # complement rows, local columns
    B_comp: np.ndarray

    @property
    def size(self) -> int:
        return len(self.states)

    def coupling_matrix(self) -> np.ndarray:
        """External coupling columns stacked in canonical order (sigma x len(external))."""
        if not self.external:
            return np.zeros((self.size, 0))
        return np.column_stack([self.coupling_cols[lab] for lab in self.external])


def validate_partition(sys: InterconnectedSystem,
                       selections: Sequence[SelectionFunction]) -> PartitionReport:
    """Check that each estimator's selection covers every state its output reads.

    The k-th output rows of the global C may only have nonzero entries in
    columns whose label belongs to estimator k's selection; otherwise
    ``y_k = C_local x_local + eta_k`` is not exactly representable.
    """
    _check_selection_list(sys, selections)
    violations = []
    for sel in selections:
        rows = sys.output_rows(sel.owner)
        for col in np.flatnonzero(np.any(rows != 0.0, axis=0)):
            lab = sys.index_space.label_at(int(col))
            if lab not in sel:
                violations.append((sel.owner, lab))
    return PartitionReport(not violations, tuple(violations))


def validate_assignment(index_space: StateIndexSpace,
                        selections: Sequence[SelectionFunction],
                        assignment: AssignmentFunction) -> AssignmentReport:
    """Check assignment consistency and full coverage of the state space.

    An assigned estimator must actually select the state; a covered state must
    be assigned.  States covered by no estimator are reported as fatal: for a
    validated, globally observable setup every state must appear in some
    selection (otherwise its column of C is zero and nothing is coupled to it,
    contradicting observability).
    """
    wrong, unassigned, uncovered = [], [], []
    covered_by = {}
    for sel in selections:
        for lab in sel.states:
            covered_by.setdefault(lab, []).append(sel.owner)
    for lab in index_space.labels:
        owner = assignment.estimator_of(lab)
        owners = covered_by.get(lab, [])
        if not owners:
            uncovered.append(lab)
            if owner is not None:
                wrong.append((lab, owner))
            continue
        if owner is None:
            unassigned.append(lab)
        elif owner not in owners:
            wrong.append((lab, owner))
    ok = not (wrong or unassigned or uncovered)
    return AssignmentReport(ok, tuple(wrong), tuple(unassigned), tuple(uncovered))


def default_assignment(index_space: StateIndexSpace,
                       selections: Sequence[SelectionFunction]) -> AssignmentFunction:
    """Deterministic assignment: the smallest estimator id selecting each state."""
    owner = {}
    for lab in index_space.labels:
        owners = sorted(sel.owner for sel in selections if lab in sel)
        if owners:
            owner[lab] = owners[0]
    return AssignmentFunction(owner)


def repartition(sys: InterconnectedSystem,
                selections: Sequence[SelectionFunction],
                k: int) -> RepartitionedSystem:
    """Restrict the global dynamics to estimator k's coordinates.

    Requires a validated partition (the local output map is formed by
    restricting the k-th output rows; any entry outside the selection would
    be silently dropped, so it is rejected here).
    """
    _check_selection_list(sys, selections)
    sel = selections[k - 1]
    space = sys.index_space
    idx = space.positions(sel.states)
    comp_labels = tuple(lab for lab in space.labels if lab not in sel)
    cidx = space.positions(comp_labels) if comp_labels else np.zeros(0, dtype=int)

    A_loc = sys.A[np.ix_(idx, idx)]
    B_loc = sys.B[idx, :]
    rows = sys.output_rows(k)
    dropped = [int(c) for c in np.flatnonzero(np.any(rows != 0.0, axis=0))
               if space.label_at(int(c)) not in sel]
    if dropped:
        raise PartitionError(
            f"estimator {k} output reads states outside its selection: "
            f"{[space.label_at(c) for c in dropped]}; validate the partition first")
    C_loc = rows[:, idx]

    ext_block = sys.A[np.ix_(idx, cidx)] if len(cidx) else np.zeros((len(idx), 0))
    external = []
    coupling = {}
    for j, lab in enumerate(comp_labels):
        col = ext_block[:, j]
        if np.any(col):
            external.append(lab)
            c = col.copy()
            c.setflags(write=False)
            coupling[lab] = c

    A_comp = sys.A[np.ix_(cidx, cidx)] if len(cidx) else np.zeros((0, 0))
    A_cross = sys.A[np.ix_(cidx, idx)] if len(cidx) else np.zeros((0, len(idx)))
    B_comp = sys.B[cidx, :] if len(cidx) else np.zeros((0, sys.m))
    return RepartitionedSystem(k, sel.states, A_loc, B_loc, C_loc,
                               tuple(external), coupling, comp_labels,
                               A_comp, A_cross, B_comp)


def repartition_all(sys: InterconnectedSystem,
                    selections: Sequence[SelectionFunction]) -> tuple[RepartitionedSystem, ...]:
    return tuple(repartition(sys, selections, k) for k in range(1, sys.N + 1))


def _check_selection_list(sys: InterconnectedSystem,
                          selections: Sequence[SelectionFunction]) -> None:
    if len(selections) != sys.N:
        raise PartitionError(f"expected one selection per subsystem "
                             f"({sys.N}), got {len(selections)}")
    for pos, sel in enumerate(selections, start=1):
        if sel.owner != pos:
            raise PartitionError(f"selection in slot {pos} has owner {sel.owner}")
        for lab in sel.states:
            if lab not in sys.index_space:
                raise ModelError(f"selection of estimator {pos} references unknown state {lab}")
