"""Independent verification of a synthesized estimator network.

Everything here re-derives its verdicts from the closed-loop matrices and a
symmetric eigensolver; nothing is taken on trust from the synthesis backend.
The checks are redundant on purpose: the LMI residuals imply stability and
the frequency-domain bound, so a disagreement between them indicates a bug,
not a tolerance issue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graphs import CommGraph, ExtendedGraph
from .partition import RepartitionedSystem
from .synthesis import GainCertificate, lmi_blocks, lmi_matrix

#: extra slack allowed when re-auditing solver margins
AUDIT_SLACK = 1e-9
#: slack on the frequency-grid unit bound (grid evaluation of a true <= bound)
FREQ_SLACK = 1e-6


class AnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class ErrorSystem:
    """Stacked estimation-error dynamics  de/dt = A e + B_v v + B_eta eta,
    with performance output z = C_z e (block-diagonal square roots of W)."""

    A: np.ndarray
    B_v: np.ndarray
    B_eta: np.ndarray
    C_z: np.ndarray
    owners: tuple[int, ...]
    offsets: tuple[int, ...]
    sizes: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return len(self.owners)

    def block(self, k: int) -> slice:
        i = self.owners.index(k)
        return slice(self.offsets[i], self.offsets[i] + self.sizes[i])


def _psd_sqrt(W: np.ndarray) -> np.ndarray:
    """Symmetric square root with round-off clipping; W must be PSD."""
    vals, vecs = np.linalg.eigh((W + W.T) / 2)
    if vals.min() < -1e-12:
        raise AnalysisError(f"weight matrix has eigenvalue {vals.min():.3e} < -1e-12")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def assemble_error_system(reps: Sequence[RepartitionedSystem],
                          cert: GainCertificate,
                          eg: ExtendedGraph) -> ErrorSystem:
    """Closed-loop error dynamics implied by the gains and the graph.

    Diagonal block k is A_k - L_k C_k - K_k Nd_k; a coupling edge adds the
    corresponding external column into the transmitter's coordinate, and a
    fusion edge adds the matching K-column into the sender's coordinate.
    """
    owners = tuple(r.owner for r in reps)
    sizes = tuple(r.size for r in reps)
    offsets = tuple(int(o) for o in np.cumsum((0,) + sizes[:-1]))
    dim = sum(sizes)
    m = reps[0].B.shape[1]
    r_total = sum(r.C.shape[0] for r in reps)

    A = np.zeros((dim, dim))
    B_v = np.zeros((dim, m))
    B_eta = np.zeros((dim, r_total))
    C_z = np.zeros((dim, dim))
    pos = {owner: i for i, owner in enumerate(owners)}
    eta_off = 0
    for i, rep in enumerate(reps):
        k = rep.owner
        sl = slice(offsets[i], offsets[i] + sizes[i])
        share = np.zeros(rep.size)
        for e in eg.edges:
            if e.kind == "fusion" and e.head[0] == k:
                share[rep.states.index(e.head[1])] += 1
        KN = cert.K[i] * share[np.newaxis, :]
        A[sl, sl] = rep.A - cert.L[i] @ rep.C - KN
        for e in eg.edges:
            if e.head[0] != k:
                continue
            tail_owner, tail_label = e.tail
            j = pos[tail_owner]
            col_global = offsets[j] + reps[j].states.index(tail_label)
            if e.kind == "coupling":
                A[sl, col_global] += rep.coupling_cols[tail_label]
            else:
                A[sl, col_global] += cert.K[i][:, rep.states.index(e.head[1])]
        B_v[sl, :] = rep.B
        rk = rep.C.shape[0]
        B_eta[sl, eta_off:eta_off + rk] = -cert.L[i]
        eta_off += rk
        C_z[sl, sl] = _psd_sqrt(cert.params.W[i])
    return ErrorSystem(A, B_v, B_eta, C_z, owners, offsets, sizes)


def blockdiag_P(cert: GainCertificate) -> np.ndarray:
    dim = sum(P.shape[0] for P in cert.P)
    M = np.zeros((dim, dim))
    off = 0
    for P in cert.P:
        s = P.shape[0]
        M[off:off + s, off:off + s] = P
        off += s
    return M


@dataclass(frozen=True)
class StabilityReport:
    ok: bool
    spectral_abscissa: float
    certificate_eigenvalue: float  # lambda_max(A^T P + P A + alpha P), want <= tol
    tolerance: float

    def __bool__(self) -> bool:
        return self.ok


def check_stability(es: ErrorSystem, cert: GainCertificate,
                    tolerance: float | None = None) -> StabilityReport:
    """Spectral abscissa plus the decay certificate in the P-weighted norm.

    The synthesized inequalities imply A_err^T P + P A_err + alpha P <= -W_blk
    with P = blockdiag(P_k), i.e. the stacked error decays at least at rate
    alpha/2 in the P-norm; both facts are checked directly.
    """
    abscissa = float(np.max(np.linalg.eigvals(es.A).real))
    P = blockdiag_P(cert)
    Mc = es.A.T @ P + P @ es.A + cert.params.alpha * P
    lam = float(np.linalg.eigvalsh((Mc + Mc.T) / 2)[-1])
    tol = tolerance if tolerance is not None else AUDIT_SLACK * max(1.0, float(np.abs(P).max()))
    return StabilityReport(abscissa < 0.0 and lam <= tol, abscissa, lam, tol)


@dataclass(frozen=True)
class ResidualReport:
    ok: bool
    margins: tuple[float, ...]
    threshold: float

    def __bool__(self) -> bool:
        return self.ok


def check_lmi_residuals(cert: GainCertificate, reps: Sequence[RepartitionedSystem],
                        eg: ExtendedGraph, graph: CommGraph) -> ResidualReport:
    """Re-evaluate every synthesis inequality at the certified variables."""
    values = {r.owner: (cert.P[i], cert.G[i], cert.F[i]) for i, r in enumerate(reps)}
    margins = []
    for i, rep in enumerate(reps):
        blk = lmi_blocks(rep.owner, reps, eg, graph)
        M = lmi_matrix(blk, rep, cert.params, values)
        margins.append(float(np.linalg.eigvalsh((M + M.T) / 2)[-1]))
    threshold = -cert.params.strictness + AUDIT_SLACK
    return ResidualReport(all(m <= threshold for m in margins), tuple(margins), threshold)


@dataclass(frozen=True)
class FrequencyReport:
    ok: bool
    sup: float
    at_frequency: float
    grid_points: int

    def __bool__(self) -> bool:
        return self.ok


def frequency_grid(es: ErrorSystem, points: int = 400,
                   lo: float = 1e-3, hi: float = 1e3) -> np.ndarray:
    """Log grid plus DC plus refinement near every resonance of A_err."""
    ws = [np.array([0.0]), np.logspace(np.log10(lo), np.log10(hi), points)]
    for lam in np.linalg.eigvals(es.A):
        if abs(lam.imag) > 1e-9:
            ws.append(abs(lam.imag) * np.linspace(0.9, 1.1, 21))
    return np.unique(np.concatenate(ws))


def check_hinf_frequency(es: ErrorSystem, gamma: float, omega: float,
                         grid: np.ndarray | None = None) -> FrequencyReport:
    """Audit the disturbance-to-error energy bound on a frequency grid.

    The synthesis guarantees, per estimator, an energy budget omega^2 |v|^2 +
    gamma^2 |eta_k|^2; summed over the N estimators the common disturbance v
    is counted N times.  The scaled transfer matrix

        C_z (jw I - A)^{-1} [ B_v / (sqrt(N) omega) | B_eta / gamma ]

    therefore must have maximum singular value at most one at every
    frequency.  Requires a stable A_err.
    """
    abscissa = float(np.max(np.linalg.eigvals(es.A).real))
    if abscissa >= 0:
        raise AnalysisError(f"error dynamics are not stable (abscissa {abscissa:.3e}); "
                            "the frequency-domain norm is undefined")
    grid = frequency_grid(es) if grid is None else np.asarray(grid, dtype=float)
    Bin = np.hstack([es.B_v / (np.sqrt(es.N) * omega), es.B_eta / gamma])
    eye = np.eye(es.dim)
    sup, at_w = 0.0, 0.0
    for w in grid:
        T = es.C_z @ np.linalg.solve(1j * w * eye - es.A, Bin)
        s = float(np.linalg.svd(T, compute_uv=False)[0]) if T.size else 0.0
        if s > sup:
            sup, at_w = s, float(w)
    return FrequencyReport(sup <= 1.0 + FREQ_SLACK, sup, at_w, len(grid))


# ---------------------------------------------------------------------------
# Trajectory-level audit

@dataclass(frozen=True)
class DecayAuditReport:
    ok: bool
    violations: int
    first_violation_time: float | None
    worst_excess: float
    noise_floor: float

    def __bool__(self) -> bool:
        return self.ok


def lyapunov_decay_audit(times: np.ndarray, stacked_errors: np.ndarray,
                         cert: GainCertificate, state_scale: float = 1.0,
                         rel_slack: float = 1e-6) -> DecayAuditReport:
    """Check V(t+dt) <= V(t) exp(-alpha dt) (1 + rel_slack) along a trace.

    V is the P-weighted squared error.  The errors are differences of
    O(state_scale) quantities, so once they shrink toward state_scale * eps
    V sits on a floating-point noise floor; steps are allowed an absolute
    slack of that floor, which is reported.
    """
    P = blockdiag_P(cert)
    E = np.asarray(stacked_errors)
    V = np.einsum("ij,ij->i", E, E @ P)
    dt = np.diff(np.asarray(times, dtype=float))
    # accumulated rounding in e = x - xhat over ~1/(alpha dt) steps
    floor_err = 1e3 * np.finfo(float).eps * max(1.0, float(state_scale))
    noise_floor = float(np.linalg.eigvalsh(P)[-1]) * floor_err ** 2
    bound = V[:-1] * np.exp(-cert.params.alpha * dt) * (1.0 + rel_slack) + noise_floor
    excess = V[1:] - bound
    bad = np.flatnonzero(excess > 0)
    return DecayAuditReport(bad.size == 0, int(bad.size),
                            float(times[bad[0] + 1]) if bad.size else None,
                            float(excess.max()) if excess.size else 0.0,
                            noise_floor)
