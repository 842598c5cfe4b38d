"""Semidefinite feasibility/optimization kernel.

Problems are carried in a solver-neutral standard form: a flat decision
vector x and a list of affine symmetric matrix blocks

    M_b(x) = const_b + sum_i x[i] * coeff_b[i]   required  M_b(x) <= 0  (NSD)

plus an optional linear objective.  The translation to an actual conic
backend (cvxpy) is contained here; results are never trusted from the
backend: every block is re-evaluated with a symmetric eigensolver and the
solve only reports "optimal" when the audited eigenvalues pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_TOL = 1e-8
ITERATION_BUDGET = 500
_MARGIN_FLOOR = -1.0  # clamp on the internal max-margin variable

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class AffineBlock:
    """One affine symmetric-matrix constraint, required negative-semidefinite."""

    label: str
    constant: np.ndarray
    coeffs: tuple[tuple[int, np.ndarray], ...]  # (variable index, symmetric matrix)

    def __post_init__(self):
        C = np.asarray(self.constant, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 1:
            raise EngineError(f"block {self.label}: constant must be square, got {C.shape}")
        if not np.allclose(C, C.T, atol=1e-12):
            raise EngineError(f"block {self.label}: constant is not symmetric")
        coeffs = []
        for i, F in self.coeffs:
            F = np.asarray(F, dtype=float)
            if F.shape != C.shape:
                raise EngineError(f"block {self.label}: coefficient {i} has shape "
                                  f"{F.shape}, expected {C.shape}")
            if not np.allclose(F, F.T, atol=1e-12):
                raise EngineError(f"block {self.label}: coefficient {i} is not symmetric")
            coeffs.append((int(i), (F + F.T) / 2.0))
        object.__setattr__(self, "constant", (C + C.T) / 2.0)
        object.__setattr__(self, "coeffs", tuple(coeffs))

    @property
    def size(self) -> int:
        return self.constant.shape[0]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        M = self.constant.copy()
        for i, F in self.coeffs:
            M += x[i] * F
        return M

    def max_eigenvalue(self, x: np.ndarray) -> float:
        return float(np.linalg.eigvalsh(self.evaluate(x))[-1])


@dataclass(frozen=True)
class ConicProblem:
    num_vars: int
    objective: np.ndarray  # linear functional; all-zero means pure feasibility
    blocks: tuple[AffineBlock, ...]

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float).reshape(-1)
        if c.shape != (self.num_vars,):
            raise EngineError(f"objective has length {c.shape[0]}, expected {self.num_vars}")
        object.__setattr__(self, "objective", c)
        if not self.blocks:
            raise EngineError("a conic problem needs at least one block")
        for b in self.blocks:
            for i, _ in b.coeffs:
                if not (0 <= i < self.num_vars):
                    raise EngineError(f"block {b.label} references variable {i} "
                                      f"out of range (d={self.num_vars})")

    @property
    def is_feasibility(self) -> bool:
        return not np.any(self.objective)

    def dump(self) -> str:
        """Text serialization of block sizes and affine coefficient triplets."""
        out = [f"vars {self.num_vars}",
               "objective " + " ".join(f"{i}:{v:.17g}" for i, v in
                                       enumerate(self.objective) if v != 0.0)]
        for b in self.blocks:
            out.append(f"block {b.label} size {b.size}")
            rows, cols = np.nonzero(np.triu(b.constant))
            for r, c in zip(rows, cols):
                out.append(f"  const {r} {c} {b.constant[r, c]:.17g}")
            for i, F in b.coeffs:
                rows, cols = np.nonzero(np.triu(F))
                for r, c in zip(rows, cols):
                    out.append(f"  var {i} {r} {c} {F[r, c]:.17g}")
        return "\n".join(out) + "\n"


@dataclass(frozen=True)
class SolveResult:
    status: str
    x: np.ndarray | None
    objective_value: float | None       # for feasibility solves: the achieved max margin
    block_margins: tuple[float, ...] | None  # audited largest eigenvalue per block
    detail: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _to_cvxpy(problem: ConicProblem, shift=None):
    import cvxpy as cp

    x = cp.Variable(problem.num_vars)
    cons = []
    for b in problem.blocks:
        expr = cp.Constant(b.constant)
        for i, F in b.coeffs:
            expr = expr + x[i] * F
        expr = (expr + expr.T) / 2
        if shift is None:
            cons.append(expr << 0)
        else:
            cons.append(expr << shift * np.eye(b.size))
    return x, cons


def _audit(problem: ConicProblem, x: np.ndarray) -> tuple[float, ...]:
    return tuple(b.max_eigenvalue(x) for b in problem.blocks)


def solve(problem: ConicProblem, tol: float = DEFAULT_TOL,
          solver: str | None = None, verbose: bool = False) -> SolveResult:
    """Solve a conic problem; report optimal only if the audit passes.

    Pure feasibility problems are solved by maximizing the common margin
    (min t subject to every block <= t*I, t clamped below), which yields
    strictly interior points when they exist and a quantitative margin
    otherwise.  Objective problems are solved directly.
    """
    import cvxpy as cp

    solver = solver or "CLARABEL"
    settings = {"solver": solver, "verbose": verbose}
    if solver == "CLARABEL":
        settings["max_iter"] = ITERATION_BUDGET

    if problem.is_feasibility:
        t = cp.Variable()
        x, cons = _to_cvxpy(problem, shift=t)
        cons.append(t >= _MARGIN_FLOOR)
        prob = cp.Problem(cp.Minimize(t), cons)
        try:
            prob.solve(**settings)
        except cp.SolverError as exc:
            return SolveResult(NUMERICAL_FAILURE, None, None, None, f"solver error: {exc}")
        if prob.status not in ("optimal", "optimal_inaccurate") or x.value is None:
            return SolveResult(NUMERICAL_FAILURE, None, None, None,
                               f"margin solve ended with status {prob.status}")
        xv = np.asarray(x.value).reshape(-1)
        margins = _audit(problem, xv)
        tv = float(t.value)
        if max(margins) <= tol:
            return SolveResult(OPTIMAL, xv, tv, margins,
                               f"max margin {tv:.3e} ({prob.status})")
        return SolveResult(INFEASIBLE, xv, tv, margins,
                           f"best achievable margin {tv:.3e} > tol; "
                           f"worst block {problem.blocks[int(np.argmax(margins))].label}")

    x, cons = _to_cvxpy(problem)
    prob = cp.Problem(cp.Minimize(problem.objective @ x), cons)
    try:
        prob.solve(**settings)
    except cp.SolverError as exc:
        return SolveResult(NUMERICAL_FAILURE, None, None, None, f"solver error: {exc}")
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        return SolveResult(INFEASIBLE, None, None, None, f"backend status {prob.status}")
    if prob.status not in ("optimal", "optimal_inaccurate") or x.value is None:
        return SolveResult(NUMERICAL_FAILURE, None, None, None,
                           f"backend status {prob.status}")
    xv = np.asarray(x.value).reshape(-1)
    margins = _audit(problem, xv)
    if max(margins) > tol:
        return SolveResult(NUMERICAL_FAILURE, xv, float(prob.value), margins,
                           f"audit failed: block {problem.blocks[int(np.argmax(margins))].label} "
                           f"has eigenvalue {max(margins):.3e} > {tol:.1e}")
    return SolveResult(OPTIMAL, xv, float(prob.value), margins, prob.status)
