"""Interconnected LTI system model: block data, global assembly, structural tests.

A plant is described by N subsystems

    xdot_k = A_k x_k + sum_j A_kj x_j + B_k v
    y_k    = C_k x_k + sum_j C_kj x_j + eta_k

where v is a disturbance common to all subsystems and eta_k is the
measurement disturbance of subsystem k.  Scalar states are addressed by
labels (k, i), 1-based, in the stacking order of the global state vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

StateLabel = tuple[int, int]


class ModelError(ValueError):
    """Inconsistent system data (dimension mismatch, duplicate blocks, ...)."""


def _as_matrix(M, rows: int | None = None, cols: int | None = None,
               what: str = "matrix") -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim != 2:
        raise ModelError(f"{what} must be 2-dimensional, got shape {A.shape}")
    if rows is not None and A.shape[0] != rows:
        raise ModelError(f"{what} must have {rows} rows, got {A.shape[0]}")
    if cols is not None and A.shape[1] != cols:
        raise ModelError(f"{what} must have {cols} columns, got {A.shape[1]}")
    A = A.copy()
    A.setflags(write=False)
    return A


@dataclass(frozen=True)
class SubsystemModel:
    """One subsystem: self-dynamics A, disturbance input B, self-output C."""

    id: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        if self.id < 1:
            raise ModelError(f"subsystem id must be 1-based, got {self.id}")
        n = np.asarray(self.A).shape[0]
        object.__setattr__(self, "A", _as_matrix(self.A, n, n, f"A_{self.id}"))
        object.__setattr__(self, "B", _as_matrix(self.B, n, None, f"B_{self.id}"))
        object.__setattr__(self, "C", _as_matrix(self.C, None, n, f"C_{self.id}"))
        if n < 1:
            raise ModelError(f"subsystem {self.id} must have at least one state")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class CouplingBlock:
    """Off-diagonal block: subsystem `src` drives subsystem `dst`.

    kind "state" stores A_{dst,src} (shape n_dst x n_src); kind "output"
    stores C_{dst,src} (shape r_dst x n_src).
    """

    kind: str
    src: int
    dst: int
    M: np.ndarray

    def __post_init__(self):
        if self.kind not in ("state", "output"):
            raise ModelError(f"coupling kind must be 'state' or 'output', got {self.kind!r}")
        if self.src == self.dst:
            raise ModelError(f"self-coupling block ({self.src} -> {self.dst}) is not allowed; "
                             "diagonal blocks belong to the subsystem itself")
        object.__setattr__(self, "M", _as_matrix(self.M, what=f"{self.kind} coupling {self.src}->{self.dst}"))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.M)


@dataclass(frozen=True)
class StateIndexSpace:
    """All scalar-state labels (k, i) in canonical (global stacking) order."""

    labels: tuple[StateLabel, ...]
    _pos: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_pos", {lab: i for i, lab in enumerate(self.labels)})
        if len(self._pos) != len(self.labels):
            raise ModelError("duplicate state labels in index space")

    @classmethod
    def from_dims(cls, dims: Sequence[int]) -> "StateIndexSpace":
        labels = tuple((k + 1, i + 1) for k, nk in enumerate(dims) for i in range(nk))
        return cls(labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: StateLabel) -> bool:
        return label in self._pos

    def position(self, label: StateLabel) -> int:
        """Global 0-based position of a (k, i) label."""
        try:
            return self._pos[label]
        except KeyError:
            raise ModelError(f"unknown state label {label}") from None

    def label_at(self, position: int) -> StateLabel:
        return self.labels[position]

    def positions(self, labels: Iterable[StateLabel]) -> np.ndarray:
        return np.array([self.position(lab) for lab in labels], dtype=int)


@dataclass(frozen=True)
class InterconnectedSystem:
    """Assembled global plant together with its block decomposition."""

    subsystems: tuple[SubsystemModel, ...]
    couplings: tuple[CouplingBlock, ...]
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    index_space: StateIndexSpace

    @property
    def N(self) -> int:
        return len(self.subsystems)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def state_offset(self, k: int) -> int:
        return sum(s.n for s in self.subsystems[:k - 1])

    def output_offset(self, k: int) -> int:
        return sum(s.r for s in self.subsystems[:k - 1])

    def output_rows(self, k: int) -> np.ndarray:
        """Rows of the global C that belong to subsystem k."""
        o = self.output_offset(k)
        return self.C[o:o + self.subsystems[k - 1].r, :]


def assemble_global(subsystems: Sequence[SubsystemModel],
                    couplings: Sequence[CouplingBlock] = ()) -> InterconnectedSystem:
    """Assemble the dense global (A, B, C) from blocks.

    Subsystems must carry ids 1..N in order.  At most one coupling block per
    (kind, src, dst) is accepted; exact-zero blocks are dropped.
    """
    subs = tuple(subsystems)
    if not subs:
        raise ModelError("at least one subsystem is required")
    for pos, s in enumerate(subs, start=1):
        if s.id != pos:
            raise ModelError(f"subsystem ids must be 1..N in order; slot {pos} has id {s.id}")
    m = subs[0].B.shape[1]
    for s in subs:
        if s.B.shape[1] != m:
            raise ModelError(f"all B_k must share the disturbance dimension; "
                             f"B_{s.id} has {s.B.shape[1]} columns, expected {m}")

    N = len(subs)
    n = sum(s.n for s in subs)
    r = sum(s.r for s in subs)
    soff = np.cumsum([0] + [s.n for s in subs])
    ooff = np.cumsum([0] + [s.r for s in subs])

    A = np.zeros((n, n))
    B = np.zeros((n, m))
    C = np.zeros((r, n))
    for idx, s in enumerate(subs):
        A[soff[idx]:soff[idx + 1], soff[idx]:soff[idx + 1]] = s.A
        B[soff[idx]:soff[idx + 1], :] = s.B
        C[ooff[idx]:ooff[idx + 1], soff[idx]:soff[idx + 1]] = s.C

    seen = set()
    kept = []
    for c in couplings:
        if not (1 <= c.src <= N and 1 <= c.dst <= N):
            raise ModelError(f"coupling {c.src}->{c.dst} references unknown subsystems (N={N})")
        key = (c.kind, c.src, c.dst)
        if key in seen:
            raise ModelError(f"duplicate {c.kind} coupling block {c.src}->{c.dst}")
        seen.add(key)
        nj = subs[c.src - 1].n
        if c.kind == "state":
            nk = subs[c.dst - 1].n
            if c.M.shape != (nk, nj):
                raise ModelError(f"state coupling {c.src}->{c.dst} must be "
                                 f"{nk}x{nj}, got {c.M.shape}")
            A[soff[c.dst - 1]:soff[c.dst], soff[c.src - 1]:soff[c.src]] = c.M
        else:
            rk = subs[c.dst - 1].r
            if c.M.shape != (rk, nj):
                raise ModelError(f"output coupling {c.src}->{c.dst} must be "
                                 f"{rk}x{nj}, got {c.M.shape}")
            C[ooff[c.dst - 1]:ooff[c.dst], soff[c.src - 1]:soff[c.src]] = c.M
        if not c.is_zero:
            kept.append(c)

    kept.sort(key=lambda c: (c.kind, c.dst, c.src))
    for M in (A, B, C):
        M.setflags(write=False)
    return InterconnectedSystem(subs, tuple(kept), A, B, C,
                                StateIndexSpace.from_dims([s.n for s in subs]))


def extract_blocks(sys: InterconnectedSystem) -> tuple[tuple[SubsystemModel, ...],
                                                       tuple[CouplingBlock, ...]]:
    """Inverse of assemble_global: recover subsystem and (nonzero) coupling blocks."""
    subs = []
    coups = []
    for k, s in enumerate(sys.subsystems, start=1):
        o = sys.state_offset(k)
        oo = sys.output_offset(k)
        subs.append(SubsystemModel(k, sys.A[o:o + s.n, o:o + s.n],
                                   sys.B[o:o + s.n, :],
                                   sys.C[oo:oo + s.r, o:o + s.n]))
    for k, sk in enumerate(sys.subsystems, start=1):
        for j, sj in enumerate(sys.subsystems, start=1):
            if j == k:
                continue
            ok, oj = sys.state_offset(k), sys.state_offset(j)
            Akj = sys.A[ok:ok + sk.n, oj:oj + sj.n]
            if np.any(Akj):
                coups.append(CouplingBlock("state", j, k, Akj))
            rk = sys.output_offset(k)
            Ckj = sys.C[rk:rk + sk.r, oj:oj + sj.n]
            if np.any(Ckj):
                coups.append(CouplingBlock("output", j, k, Ckj))
    coups.sort(key=lambda c: (c.kind, c.dst, c.src))
    return tuple(subs), tuple(coups)


# ---------------------------------------------------------------------------
# Structural tests

#: eigenvalues with real part above -STABILITY_TOL count as "not stable"
#: when deciding detectability (conservative near the imaginary axis).
STABILITY_TOL = 1e-9


@dataclass(frozen=True)
class ObservabilityReport:
    observable: bool
    rank: int
    dim: int
    rank_tolerance: float
    failing_eigenvalues: tuple[complex, ...]

    def __bool__(self) -> bool:
        return self.observable


@dataclass(frozen=True)
class DetectabilityReport:
    detectable: bool
    undetectable_eigenvalues: tuple[complex, ...]

    def __bool__(self) -> bool:
        return self.detectable


def _rank(M: np.ndarray) -> tuple[int, float]:
    """Numerical rank and the singular-value threshold used."""
    if M.size == 0:
        return 0, 0.0
    s = np.linalg.svd(M, compute_uv=False)
    tol = s.max() * max(M.shape) * np.finfo(float).eps if s.size else 0.0
    return int(np.sum(s > tol)), float(tol)


def _pbh_failures(A: np.ndarray, C: np.ndarray, eigenvalues) -> list[complex]:
    """Eigenvalues s where rank [A - s I; C] drops below full column rank."""
    n = A.shape[0]
    out = []
    for s in eigenvalues:
        if any(abs(s - prev) <= 1e-9 * max(1.0, abs(s)) for prev in out):
            continue
        M = np.vstack([A - s * np.eye(n), C.astype(complex)])
        if _rank(M)[0] < n:
            out.append(complex(s))
    return out


def check_observability(A: np.ndarray, C: np.ndarray) -> ObservabilityReport:
    """Kalman rank test on [C; CA; ...; CA^(n-1)]; PBH diagnostic on failure."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or C.shape[1] != n:
        raise ModelError(f"inconsistent shapes A{A.shape}, C{C.shape}")
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    rank, tol = _rank(np.vstack(blocks))
    observable = rank == n
    failing = () if observable else tuple(_pbh_failures(A, C, np.linalg.eigvals(A)))
    return ObservabilityReport(observable, rank, n, tol, failing)


def check_detectability(A: np.ndarray, C: np.ndarray) -> DetectabilityReport:
    """PBH rank test at every eigenvalue with nonnegative real part."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or C.shape[1] != n:
        raise ModelError(f"inconsistent shapes A{A.shape}, C{C.shape}")
    unstable = [s for s in np.linalg.eigvals(A) if s.real >= -STABILITY_TOL]
    bad = tuple(_pbh_failures(A, C, unstable))
    return DetectabilityReport(not bad, bad)
