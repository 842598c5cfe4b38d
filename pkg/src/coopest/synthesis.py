"""Coupled LMI assembly and filter-gain synthesis.

Every estimator k contributes one matrix inequality in the joint unknowns
(P_k symmetric positive definite, G_k, F_k); the inequalities couple through
diagonal entries of the neighbours' P matrices, so they are solved as one
semidefinite feasibility problem.  Gains are recovered as L = P^{-1} G and
K = P^{-1} F.

Block layout of the inequality for estimator k (empty blocks are omitted):

    [ Q + W      -G        P B      S       T_j1    ...  ]
    [ -G^T     -gamma^2 I   0       0        0           ]
    [ (P B)^T     0     -omega^2 I  0        0           ]   <=  -eps I
    [ S^T         0         0      -R        0           ]
    [ T_j1^T      0         0       0       -U_j1        ]

with Q = P A + A^T P - G C - (G C)^T - F Nd - (F Nd)^T + alpha P + Pi,
Pi the out-degree-weighted diagonal of P, S the P-scaled external coupling
columns, R / U diagonal matrices of transmitting coordinates' P entries.
The sign of the R and U blocks is negative: these are the Schur-complement
blocks of the quadratic coupling bounds and a negative definite matrix
cannot carry a positive diagonal block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import lmi_engine
from .graphs import CommGraph, ExtendedGraph
from .lmi_engine import AffineBlock, ConicProblem, SolveResult
from .partition import RepartitionedSystem

#: weight of the P-trace term in the gain-conditioning objective
_CONDITIONING_TRACE_WEIGHT = 1e-2
#: fraction of the spare margin retained when re-solving for small gains
_CONDITIONING_MARGIN_KEEP = 0.25


class InfeasibleError(RuntimeError):
    """The coupled LMIs admit no solution at the requested parameters."""

    def __init__(self, message: str, result: SolveResult | None = None):
        super().__init__(message)
        self.result = result


class SynthesisFailure(RuntimeError):
    """The backend failed numerically (distinct from infeasibility)."""


@dataclass(frozen=True)
class SynthesisParams:
    """Design parameters shared by all estimator inequalities."""

    alpha: float
    pi: tuple[float, ...]
    gamma: float
    omega: float
    W: tuple[np.ndarray, ...]
    strictness: float  # eps: strict inequalities are enforced as <= -eps I

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0 or self.omega <= 0 or self.strictness <= 0:
            raise ValueError("alpha, gamma, omega and strictness must be positive")
        if any(p <= 0 for p in self.pi):
            raise ValueError("all pi_k must be positive")
        Ws = []
        for k, W in enumerate(self.W, start=1):
            W = np.asarray(W, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ValueError(f"W_{k} must be square")
            if not np.allclose(W, W.T, atol=1e-12):
                raise ValueError(f"W_{k} must be symmetric")
            if np.linalg.eigvalsh((W + W.T) / 2).min() < -1e-10:
                raise ValueError(f"W_{k} must be positive semidefinite")
            Ws.append((W + W.T) / 2)
        object.__setattr__(self, "W", tuple(Ws))
        object.__setattr__(self, "pi", tuple(float(p) for p in self.pi))

    @classmethod
    def with_defaults(cls, reps: Sequence[RepartitionedSystem], gamma: float,
                      omega: float, alpha: float = 0.1,
                      pi: Sequence[float] | float | None = None,
                      W: Sequence[np.ndarray] | None = None,
                      strictness: float | None = None,
                      global_A: np.ndarray | None = None) -> "SynthesisParams":
        """Fill unspecified parameters: alpha 0.1, pi_k 1, W_k identity.

        The default strictness is 1e-6 relative to the Frobenius scale of the
        global A matrix (so "strictly negative" keeps meaning at the problem's
        own magnitude).
        """
        N = len(reps)
        if pi is None:
            pi = (1.0,) * N
        elif np.isscalar(pi):
            pi = (float(pi),) * N
        if W is None:
            W = tuple(np.eye(r.size) for r in reps)
        if strictness is None:
            if global_A is not None:
                scale = float(np.linalg.norm(global_A, "fro"))
            else:
                scale = float(np.linalg.norm(
                    np.concatenate([r.A.ravel() for r in reps])))
            strictness = 1e-6 * max(1.0, scale)
        return cls(alpha, tuple(pi), gamma, omega, tuple(W), strictness)


@dataclass(frozen=True)
class LmiBlocks:
    """Structural data entering estimator k's inequality.

    share_counts[i] is the number of senders that also estimate the state at
    local position i (the diagonal of the consensus count matrix);
    out_degrees[i] is the extended-graph out-degree of (k, states[i]).
    External labels come with the (owner, position-in-owner) pair that their
    R entry refers to; overlaps list, per sender j, the (local, remote)
    position pairs of shared coordinates.
    """

    owner: int
    share_counts: np.ndarray
    out_degrees: np.ndarray
    externals: tuple
    external_refs: tuple[tuple[int, int], ...]
    overlaps: tuple[tuple[int, tuple[tuple[int, int], ...]], ...]

    @property
    def free_consensus_cols(self) -> tuple[int, ...]:
        """Local positions whose F-column is identifiable (shared with a sender)."""
        return tuple(int(i) for i in np.flatnonzero(self.share_counts))


def lmi_blocks(k: int, reps: Sequence[RepartitionedSystem], eg: ExtendedGraph,
               graph: CommGraph) -> LmiBlocks:
    rep = reps[k - 1]
    sel_states = rep.states
    share = np.zeros(rep.size)
    overlaps = []
    for j in graph.senders_to(k):
        other = reps[j - 1]
        pairs = []
        for i, lab in enumerate(sel_states):
            if lab in other.states:
                share[i] += 1
                pairs.append((i, other.states.index(lab)))
        if pairs:
            overlaps.append((j, tuple(pairs)))
    q = np.array([eg.q(k, lab) for lab in sel_states], dtype=float)
    refs = []
    for lab in rep.external:
        owner = next(e.tail[0] for e in eg.edges
                     if e.kind == "coupling" and e.head[0] == k and e.tail[1] == lab)
        refs.append((owner, reps[owner - 1].states.index(lab)))
    return LmiBlocks(k, share, q, rep.external, tuple(refs), tuple(overlaps))


def lmi_matrix(blocks: LmiBlocks, rep: RepartitionedSystem,
               params: SynthesisParams,
               values: Mapping[int, tuple[np.ndarray, np.ndarray, np.ndarray]],
               gamma2: float | None = None,
               omega2: float | None = None) -> np.ndarray:
    """Evaluate estimator k's constraint matrix at concrete (P, G, F) values.

    This direct builder is the reference definition of the inequality; the
    affine form consumed by the solver is extracted from it, and the
    post-solve residual checks re-evaluate it.
    """
    k = blocks.owner
    P, G, F = values[k]
    sigma = rep.size
    r = rep.C.shape[0]
    m = rep.B.shape[1]
    gamma2 = params.gamma ** 2 if gamma2 is None else gamma2
    omega2 = params.omega ** 2 if omega2 is None else omega2

    FN = F * blocks.share_counts[np.newaxis, :]
    Pi = params.pi[k - 1] * np.diag(blocks.out_degrees * np.diag(P))
    Q = (P @ rep.A + rep.A.T @ P - G @ rep.C - (G @ rep.C).T
         - FN - FN.T + params.alpha * P + Pi)

    cols: list[np.ndarray] = [Q + params.W[k - 1]]
    diags: list[np.ndarray] = []
    if r > 0:
        cols.append(-G)
        diags.append(-gamma2 * np.eye(r))
    if m > 0:
        cols.append(P @ rep.B)
        diags.append(-omega2 * np.eye(m))
    if blocks.externals:
        cols.append(P @ rep.coupling_matrix())
        rdiag = [params.pi[o - 1] * values[o][0][p, p] for (o, p) in blocks.external_refs]
        diags.append(-np.diag(rdiag))
    for (j, pairs) in blocks.overlaps:
        cols.append(np.column_stack([F[:, i] for (i, _) in pairs]))
        udiag = [params.pi[j - 1] * values[j][0][p, p] for (_, p) in pairs]
        diags.append(-np.diag(udiag))

    widths = [sigma] + [d.shape[0] for d in diags]
    total = sum(widths)
    M = np.zeros((total, total))
    M[:sigma, :sigma] = cols[0]
    off = sigma
    for blk, d in zip(cols[1:], diags):
        w = d.shape[0]
        M[:sigma, off:off + w] = blk
        M[off:off + w, :sigma] = blk.T
        M[off:off + w, off:off + w] = d
        off += w
    return M


# ---------------------------------------------------------------------------
# Decision-vector layout and affine extraction

class VariableLayout:
    """Flat decision vector holding named symmetric and rectangular groups."""

    def __init__(self):
        self._groups: dict[str, tuple] = {}
        self._size = 0

    @property
    def size(self) -> int:
        return self._size

    def add_symmetric(self, name: str, n: int) -> None:
        self._groups[name] = ("sym", n, self._size)
        self._size += n * (n + 1) // 2

    def add_matrix(self, name: str, rows: int, col_ids: Sequence[int], cols_total: int) -> None:
        """Rectangular group; only the listed columns are decision variables."""
        self._groups[name] = ("mat", rows, tuple(col_ids), cols_total, self._size)
        self._size += rows * len(col_ids)

    def get(self, name: str, x: np.ndarray) -> np.ndarray:
        g = self._groups[name]
        if g[0] == "sym":
            _, n, start = g
            M = np.zeros((n, n))
            idx = start
            for i in range(n):
                for j in range(i, n):
                    M[i, j] = M[j, i] = x[idx]
                    idx += 1
            return M
        _, rows, col_ids, cols_total, start = g
        M = np.zeros((rows, cols_total))
        idx = start
        for c in col_ids:
            M[:, c] = x[idx:idx + rows]
            idx += rows
        return M

    def set(self, name: str, x: np.ndarray, M: np.ndarray) -> None:
        g = self._groups[name]
        if g[0] == "sym":
            _, n, start = g
            idx = start
            for i in range(n):
                for j in range(i, n):
                    x[idx] = M[i, j]
                    idx += 1
            return
        _, rows, col_ids, cols_total, start = g
        idx = start
        for c in col_ids:
            x[idx:idx + rows] = M[:, c]
            idx += rows

    def diag_indices(self, name: str) -> list[int]:
        kind, n, start = self._groups[name]
        assert kind == "sym"
        out, idx = [], start
        for i in range(n):
            out.append(idx)
            idx += n - i
        return out

    def __contains__(self, name: str) -> bool:
        return name in self._groups


def gain_layout(reps: Sequence[RepartitionedSystem],
                blocks: Sequence[LmiBlocks]) -> VariableLayout:
    """Standard layout: per estimator P (symmetric), G, and the identifiable
    consensus-gain columns of F (the rest are structurally zero)."""
    layout = VariableLayout()
    for rep, blk in zip(reps, blocks):
        layout.add_symmetric(f"P{rep.owner}", rep.size)
        layout.add_matrix(f"G{rep.owner}", rep.size, range(rep.C.shape[0]), rep.C.shape[0])
        layout.add_matrix(f"F{rep.owner}", rep.size, blk.free_consensus_cols, rep.size)
    return layout


def _values_from_x(layout: VariableLayout, x: np.ndarray,
                   reps: Sequence[RepartitionedSystem]) -> dict:
    return {rep.owner: (layout.get(f"P{rep.owner}", x),
                        layout.get(f"G{rep.owner}", x),
                        layout.get(f"F{rep.owner}", x)) for rep in reps}


def affine_from_evaluator(label: str, fn: Callable[[np.ndarray], np.ndarray],
                          layout: VariableLayout) -> AffineBlock:
    """Extract (constant, coefficients) of an affine matrix map by evaluating
    it on the zero vector and on each basis vector."""
    zero = np.zeros(layout.size)
    const = fn(zero)
    coeffs = []
    e = np.zeros(layout.size)
    for i in range(layout.size):
        e[i] = 1.0
        Fi = fn(e) - const
        e[i] = 0.0
        if np.any(Fi):
            coeffs.append((i, Fi))
    return AffineBlock(label, const, tuple(coeffs))


def assemble_lmi(k: int, reps: Sequence[RepartitionedSystem], eg: ExtendedGraph,
                 graph: CommGraph, params: SynthesisParams,
                 layout: VariableLayout | None = None,
                 blocks: Sequence[LmiBlocks] | None = None) -> AffineBlock:
    """Estimator k's inequality as an affine block over the joint decision vector."""
    blocks = blocks or [lmi_blocks(j, reps, eg, graph) for j in range(1, len(reps) + 1)]
    layout = layout or gain_layout(reps, blocks)

    def fn(x: np.ndarray) -> np.ndarray:
        return lmi_matrix(blocks[k - 1], reps[k - 1], params, _values_from_x(layout, x, reps))

    return affine_from_evaluator(f"lmi[{k}]", fn, layout)


def build_problem(reps: Sequence[RepartitionedSystem], eg: ExtendedGraph,
                  graph: CommGraph, params: SynthesisParams,
                  margin: float | None = None) -> tuple[ConicProblem, VariableLayout,
                                                        list[LmiBlocks]]:
    """Joint feasibility problem: all estimator LMIs shifted by the strictness
    margin, plus positive-definiteness floors on every P."""
    blocks = [lmi_blocks(j, reps, eg, graph) for j in range(1, len(reps) + 1)]
    layout = gain_layout(reps, blocks)
    margin = params.strictness if margin is None else margin
    cons = []
    for rep, blk in zip(reps, blocks):
        base = assemble_lmi(rep.owner, reps, eg, graph, params, layout, blocks)
        cons.append(AffineBlock(base.label, base.constant + margin * np.eye(base.size),
                                base.coeffs))
        cons.append(affine_from_evaluator(
            f"pd[{rep.owner}]",
            lambda x, rep=rep: params.strictness * np.eye(rep.size) - layout.get(f"P{rep.owner}", x),
            layout))
    problem = ConicProblem(layout.size, np.zeros(layout.size), tuple(cons))
    return problem, layout, blocks


@dataclass(frozen=True)
class GainCertificate:
    """Solved variables, extracted gains, and audited margins."""

    P: tuple[np.ndarray, ...]
    G: tuple[np.ndarray, ...]
    F: tuple[np.ndarray, ...]
    L: tuple[np.ndarray, ...]
    K: tuple[np.ndarray, ...]
    params: SynthesisParams
    margins: tuple[float, ...]        # per-estimator largest LMI eigenvalue
    schur_margins: tuple[float, ...]  # largest eigenvalue of the reduced (Schur) form
    solver_detail: str = ""

    @property
    def N(self) -> int:
        return len(self.P)

    def ok(self) -> bool:
        return all(m <= -self.params.strictness for m in self.margins)


def extract_gains(P: np.ndarray, G: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L = P^{-1} G and K = P^{-1} F by linear solve; P must be positive definite."""
    P = (P + P.T) / 2
    try:
        cho = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise SynthesisFailure("P is not positive definite; cannot extract gains") from None
    L = np.linalg.solve(cho.T, np.linalg.solve(cho, G))
    K = np.linalg.solve(cho.T, np.linalg.solve(cho, F))
    return L, K


def schur_residual(blocks: LmiBlocks, rep: RepartitionedSystem,
                   params: SynthesisParams, values: Mapping) -> float:
    """Largest eigenvalue of the completed-squares (Schur-reduced) form.

    For a certificate this must be negative; it is the inequality the
    stability proof actually uses.
    """
    k = blocks.owner
    P, G, F = values[k]
    FN = F * blocks.share_counts[np.newaxis, :]
    Pi = params.pi[k - 1] * np.diag(blocks.out_degrees * np.diag(P))
    M = (P @ rep.A + rep.A.T @ P - G @ rep.C - (G @ rep.C).T - FN - FN.T
         + params.alpha * P + Pi + params.W[k - 1]
         + (G @ G.T) / params.gamma ** 2)
    PB = P @ rep.B
    M = M + (PB @ PB.T) / params.omega ** 2
    for lab, (o, p) in zip(blocks.externals, blocks.external_refs):
        col = (P @ rep.coupling_cols[lab]).reshape(-1, 1)
        M = M + (col @ col.T) / (params.pi[o - 1] * values[o][0][p, p])
    for (j, pairs) in blocks.overlaps:
        for (i, p) in pairs:
            col = F[:, i].reshape(-1, 1)
            M = M + (col @ col.T) / (params.pi[j - 1] * values[j][0][p, p])
    return float(np.linalg.eigvalsh((M + M.T) / 2)[-1])


def _certificate_from_values(values: Mapping, reps, blocks, params,
                             detail: str) -> GainCertificate:
    Ps, Gs, Fs, Ls, Ks, margins, schur = [], [], [], [], [], [], []
    for rep, blk in zip(reps, blocks):
        P, G, F = values[rep.owner]
        P = (P + P.T) / 2
        L, K = extract_gains(P, G, F)
        Ps.append(P); Gs.append(G); Fs.append(F); Ls.append(L); Ks.append(K)
        M = lmi_matrix(blk, rep, params, values)
        margins.append(float(np.linalg.eigvalsh((M + M.T) / 2)[-1]))
        schur.append(schur_residual(blk, rep, params, values))
    return GainCertificate(tuple(Ps), tuple(Gs), tuple(Fs), tuple(Ls), tuple(Ks),
                           params, tuple(margins), tuple(schur), detail)


def _conditioning_problem(reps, eg, graph, params, layout, blocks,
                          margin: float) -> tuple[ConicProblem, VariableLayout]:
    """Re-solve at a locked margin, minimizing trace(G^T P^{-1} G) and
    trace(F^T P^{-1} F) through Schur slack blocks (plus a small trace(P)
    term).  This steers the solver away from certificates whose P collapses
    in some direction, which would make L = P^{-1} G explode and the
    closed-loop stiff."""
    ext = VariableLayout()
    for rep, blk in zip(reps, blocks):
        ext.add_symmetric(f"P{rep.owner}", rep.size)
        ext.add_matrix(f"G{rep.owner}", rep.size, range(rep.C.shape[0]), rep.C.shape[0])
        ext.add_matrix(f"F{rep.owner}", rep.size, blk.free_consensus_cols, rep.size)
    for rep, blk in zip(reps, blocks):
        if rep.C.shape[0] > 0:
            ext.add_symmetric(f"YG{rep.owner}", rep.C.shape[0])
        if blk.free_consensus_cols:
            ext.add_symmetric(f"YF{rep.owner}", len(blk.free_consensus_cols))

    cons = []
    for rep, blk in zip(reps, blocks):
        k = rep.owner

        def lmi_fn(x, blk=blk, rep=rep):
            return (lmi_matrix(blk, rep, params, _values_from_x(ext, x, reps))
                    + margin * np.eye(_lmi_size(blk, rep)))

        cons.append(affine_from_evaluator(f"lmi[{k}]", lmi_fn, ext))
        cons.append(affine_from_evaluator(
            f"pd[{k}]",
            lambda x, k=k, rep=rep: params.strictness * np.eye(rep.size) - ext.get(f"P{k}", x),
            ext))
        if rep.C.shape[0] > 0:
            def yg_fn(x, k=k, rep=rep):
                P = ext.get(f"P{k}", x)
                G = ext.get(f"G{k}", x)
                Y = ext.get(f"YG{k}", x)
                return -np.block([[Y, G.T], [G, P]])

            cons.append(affine_from_evaluator(f"cond_g[{k}]", yg_fn, ext))
        if blk.free_consensus_cols:
            def yf_fn(x, k=k, rep=rep, blk=blk):
                P = ext.get(f"P{k}", x)
                Ff = ext.get(f"F{k}", x)[:, list(blk.free_consensus_cols)]
                Y = ext.get(f"YF{k}", x)
                return -np.block([[Y, Ff.T], [Ff, P]])

            cons.append(affine_from_evaluator(f"cond_f[{k}]", yf_fn, ext))

    c = np.zeros(ext.size)
    for rep, blk in zip(reps, blocks):
        k = rep.owner
        if f"YG{k}" in ext:
            c[ext.diag_indices(f"YG{k}")] = 1.0
        if f"YF{k}" in ext:
            c[ext.diag_indices(f"YF{k}")] = 1.0
        c[ext.diag_indices(f"P{k}")] += _CONDITIONING_TRACE_WEIGHT
    return ConicProblem(ext.size, c, tuple(cons)), ext


def _lmi_size(blk: LmiBlocks, rep: RepartitionedSystem) -> int:
    size = rep.size + rep.C.shape[0] + rep.B.shape[1] + len(blk.externals)
    size += sum(len(pairs) for (_, pairs) in blk.overlaps)
    return size


def solve_coupled(reps: Sequence[RepartitionedSystem], eg: ExtendedGraph,
                  graph: CommGraph, params: SynthesisParams,
                  tol: float = lmi_engine.DEFAULT_TOL,
                  condition_gains: bool = True) -> GainCertificate:
    """Solve the joint LMIs and return a certificate, or raise.

    Stage one maximizes the common margin to decide feasibility robustly.
    When feasible and ``condition_gains`` is set, a second solve locks part of
    the spare margin and minimizes P^{-1}-weighted gain magnitudes, which
    keeps the closed loop well scaled for simulation.  Margins in the
    returned certificate are recomputed here, never read off the solver.
    """
    problem, layout, blocks = build_problem(reps, eg, graph, params)
    res = lmi_engine.solve(problem, tol=tol)
    if res.status == lmi_engine.INFEASIBLE:
        raise InfeasibleError(
            f"coupled LMIs infeasible at gamma={params.gamma}, omega={params.omega}: "
            f"{res.detail}", res)
    if res.status == lmi_engine.NUMERICAL_FAILURE:
        raise SynthesisFailure(f"LMI solve failed: {res.detail}")

    values = _values_from_x(layout, res.x, reps)
    detail = f"margin stage: {res.detail}"
    if condition_gains:
        spare = max(0.0, -(res.objective_value or 0.0) - params.strictness)
        margin = params.strictness + _CONDITIONING_MARGIN_KEEP * spare
        cond, ext = _conditioning_problem(reps, eg, graph, params, layout, blocks, margin)
        res2 = lmi_engine.solve(cond, tol=tol)
        if res2.optimal:
            values = _values_from_x(ext, res2.x, reps)
            detail += f"; conditioning: {res2.detail}"
        else:
            detail += f"; conditioning skipped ({res2.status}: {res2.detail})"
    cert = _certificate_from_values(values, reps, blocks, params, detail)
    if not cert.ok():
        raise SynthesisFailure(
            f"post-solve audit rejected the certificate: margins {cert.margins} "
            f"exceed -{params.strictness}")
    if max(cert.schur_margins) >= 0:
        raise SynthesisFailure(
            f"Schur-form audit failed: residuals {cert.schur_margins}")
    return cert


def feasible(reps, eg, graph, params, tol=lmi_engine.DEFAULT_TOL) -> bool:
    """Feasibility verdict only (margin stage, no conditioning)."""
    problem, _, _ = build_problem(reps, eg, graph, params)
    res = lmi_engine.solve(problem, tol=tol)
    if res.status == lmi_engine.NUMERICAL_FAILURE:
        raise SynthesisFailure(f"LMI solve failed: {res.detail}")
    return res.optimal


# ---------------------------------------------------------------------------
# Performance optimization

@dataclass(frozen=True)
class OptimizationResult:
    mode: str
    gamma: float
    omega: float
    gap: float
    certificate: GainCertificate


def optimize_performance(reps: Sequence[RepartitionedSystem], eg: ExtendedGraph,
                         graph: CommGraph, params: SynthesisParams,
                         mode: str, rel_tol: float = 1e-2) -> OptimizationResult:
    """Shrink the performance level starting from a feasible (gamma, omega).

    Modes: "min-gamma" (omega fixed), "min-omega" (gamma fixed) by bisection
    (feasibility is monotone in both levels), and "min-trace" which sets
    gamma^2 = omega^2 = t and minimizes t in a single semidefinite program.
    """
    if mode in ("min-gamma", "min-omega"):
        fixed_omega = mode == "min-gamma"
        hi = params.gamma if fixed_omega else params.omega
        at = (lambda v: replace(params, gamma=v)) if fixed_omega else \
             (lambda v: replace(params, omega=v))
        if not feasible(reps, eg, graph, at(hi)):
            raise InfeasibleError(f"{mode}: starting point gamma={params.gamma}, "
                                  f"omega={params.omega} is not feasible")
        lo = 0.0
        while hi - lo > rel_tol * hi:
            mid = (hi + lo) / 2
            if feasible(reps, eg, graph, at(mid)):
                hi = mid
            else:
                lo = mid
        cert = solve_coupled(reps, eg, graph, at(hi))
        gap = (hi - lo) / hi
        g, w = (hi, params.omega) if fixed_omega else (params.gamma, hi)
        return OptimizationResult(mode, g, w, gap, cert)

    if mode != "min-trace":
        raise ValueError(f"unknown optimization mode {mode!r}")

    blocks = [lmi_blocks(j, reps, eg, graph) for j in range(1, len(reps) + 1)]
    layout = VariableLayout()
    for rep, blk in zip(reps, blocks):
        layout.add_symmetric(f"P{rep.owner}", rep.size)
        layout.add_matrix(f"G{rep.owner}", rep.size, range(rep.C.shape[0]), rep.C.shape[0])
        layout.add_matrix(f"F{rep.owner}", rep.size, blk.free_consensus_cols, rep.size)
    layout.add_matrix("t", 1, [0], 1)
    t_index = layout.size - 1

    cons = []
    for rep, blk in zip(reps, blocks):
        def fn(x, blk=blk, rep=rep):
            vals = _values_from_x(layout, x, reps)
            return (lmi_matrix(blk, rep, params, vals, gamma2=x[t_index], omega2=x[t_index])
                    + params.strictness * np.eye(_lmi_size(blk, rep)))

        cons.append(affine_from_evaluator(f"lmi[{rep.owner}]", fn, layout))
        cons.append(affine_from_evaluator(
            f"pd[{rep.owner}]",
            lambda x, rep=rep: params.strictness * np.eye(rep.size)
            - layout.get(f"P{rep.owner}", x), layout))
    # t must not exceed the starting levels and must stay positive
    t0 = max(params.gamma, params.omega) ** 2
    cons.append(AffineBlock("t_ub", np.array([[-t0]]), ((t_index, np.array([[1.0]])),)))
    cons.append(AffineBlock("t_lb", np.array([[0.0]]), ((t_index, np.array([[-1.0]])),)))
    c = np.zeros(layout.size)
    c[t_index] = 1.0
    res = lmi_engine.solve(ConicProblem(layout.size, c, tuple(cons)))
    if res.status == lmi_engine.INFEASIBLE:
        raise InfeasibleError(f"min-trace: starting point gamma={params.gamma}, "
                              f"omega={params.omega} is not feasible", res)
    if not res.optimal:
        raise SynthesisFailure(f"min-trace solve failed: {res.detail}")
    t_star = float(res.x[t_index])
    level = float(np.sqrt(t_star * (1.0 + rel_tol)))
    cert = solve_coupled(reps, eg, graph, replace(params, gamma=level, omega=level))
    return OptimizationResult(mode, level, level, rel_tol, cert)


# ---------------------------------------------------------------------------
# Parameter search (used when the plain defaults are infeasible)

SEARCH_ALPHAS = (0.1, 0.05, 0.01, 0.5)
SEARCH_PI_VALUES = (0.1, 1.0, 10.0)


def search_feasible_params(reps: Sequence[RepartitionedSystem], eg: ExtendedGraph,
                           graph: CommGraph, base: SynthesisParams,
                           alphas: Sequence[float] = SEARCH_ALPHAS,
                           pi_values: Sequence[float] = SEARCH_PI_VALUES,
                           ) -> tuple[SynthesisParams, GainCertificate, list]:
    """Scan (alpha, per-estimator pi) combinations until one is feasible.

    Combinations are ordered by how many pi entries deviate from 1, so the
    plain defaults are tried first and minimal tweaks next; alphas are tried
    in the given preference order within each deviation count.  Returns the
    found parameters, a conditioned certificate, and the trail of attempts.
    """
    import itertools

    N = len(reps)
    combos = sorted(itertools.product(sorted(pi_values), repeat=N),
                    key=lambda pis: (sum(p != 1.0 for p in pis), pis))
    trail = []
    for deviations in range(N + 1):
        for alpha in alphas:
            for pis in combos:
                if sum(p != 1.0 for p in pis) != deviations:
                    continue
                params = replace(base, alpha=alpha, pi=pis)
                ok = feasible(reps, eg, graph, params)
                trail.append({"alpha": alpha, "pi": pis, "feasible": ok})
                if ok:
                    cert = solve_coupled(reps, eg, graph, params)
                    return params, cert, trail
    raise InfeasibleError(
        f"no feasible point over {len(trail)} parameter combinations at "
        f"gamma={base.gamma}, omega={base.omega}")
