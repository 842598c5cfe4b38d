"""Time-domain simulation of the plant together with all estimators.

The estimator update of node k sees exactly what the deployed filter would
see: its own measurement, the published estimates of the external states it
is coupled to, and the shared coordinates of estimators that transmit to it.
That access pattern is fixed by the node's interface, derived from the
extended graph at build time, so the closed-loop matrices assembled from the
node functions cannot leak plant state or non-neighbour information.

Integration is classical fixed-step fourth-order Runge-Kutta with
precomputed step matrices (the coupled system is LTI), which keeps traces
bit-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .graphs import CommGraph, ExtendedGraph
from .model import InterconnectedSystem, StateLabel
from .partition import RepartitionedSystem, SelectionFunction
from .synthesis import GainCertificate


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Disturbance signals

DISTURBANCE_KINDS = ("zero", "sinusoid", "pulse", "filtered-noise")
_NOISE_SAMPLES = 1024


@dataclass(frozen=True)
class DisturbanceSpec:
    """One scalar disturbance signal applied to v or to one eta_k.

    ``channel`` is the 1-based component within the target vector; None means
    the signal drives every component of the target.  Several specs may
    target the same channel; their samples add.
    """

    kind: str
    target: str                   # "v" | "eta"
    subsystem: int | None = None  # required when target == "eta"
    channel: int | None = None
    amplitude: float = 1.0
    frequency: float = 1.0        # Hz (sinusoid)
    phase: float = 0.0
    start: float = 0.0            # pulse support [start, start + width)
    width: float = 0.0
    seed: int = 0                 # filtered noise
    bandwidth: float = 1.0
    horizon: float = 0.0          # filtered-noise support [0, horizon]

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise SimulationError(f"unknown disturbance kind {self.kind!r}")
        if self.target not in ("v", "eta"):
            raise SimulationError(f"disturbance target must be 'v' or 'eta', got {self.target!r}")
        if self.target == "eta" and self.subsystem is None:
            raise SimulationError("eta disturbances need a subsystem")
        if self.kind == "filtered-noise" and self.horizon <= 0:
            raise SimulationError("filtered-noise needs a positive horizon")


@lru_cache(maxsize=64)
def _noise_sequence(seed: int, bandwidth: float, horizon: float):
    """Seeded white samples through a one-pole low-pass, on a fixed grid."""
    ts = np.linspace(0.0, horizon, _NOISE_SAMPLES)
    white = np.random.default_rng(seed).standard_normal(_NOISE_SAMPLES)
    c = min(1.0, bandwidth * (ts[1] - ts[0]))
    z = np.empty(_NOISE_SAMPLES)
    acc = 0.0
    for i, w in enumerate(white):
        acc = (1.0 - c) * acc + c * w
        z[i] = acc
    return ts, z


def generate_disturbance(spec: DisturbanceSpec, t):
    """Sample one spec at time(s) t; deterministic given the spec."""
    t = np.asarray(t, dtype=float)
    if spec.kind == "zero":
        out = np.zeros_like(t)
    elif spec.kind == "sinusoid":
        out = spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * t + spec.phase)
    elif spec.kind == "pulse":
        out = np.where((t >= spec.start) & (t < spec.start + spec.width),
                       spec.amplitude, 0.0)
    else:
        ts, z = _noise_sequence(spec.seed, spec.bandwidth, spec.horizon)
        out = np.where((t >= 0.0) & (t <= spec.horizon),
                       spec.amplitude * np.interp(t, ts, z), 0.0)
    return out if out.ndim else float(out)


def sample_inputs(specs: Sequence[DisturbanceSpec], sys: InterconnectedSystem,
                  t: np.ndarray) -> np.ndarray:
    """Stacked input samples [v | eta] of shape (len(t), m + total outputs)."""
    t = np.asarray(t, dtype=float)
    r_total = sys.C.shape[0]
    U = np.zeros((t.size, sys.m + r_total))
    for spec in specs:
        s = generate_disturbance(spec, t)
        if spec.target == "v":
            cols = range(sys.m) if spec.channel is None else [spec.channel - 1]
            if spec.channel is not None and not (1 <= spec.channel <= sys.m):
                raise SimulationError(f"v channel {spec.channel} out of range (m={sys.m})")
        else:
            rk = sys.subsystems[spec.subsystem - 1].r
            off = sys.m + sys.output_offset(spec.subsystem)
            cols = (range(off, off + rk) if spec.channel is None
                    else [off + spec.channel - 1])
            if spec.channel is not None and not (1 <= spec.channel <= rk):
                raise SimulationError(f"eta_{spec.subsystem} channel {spec.channel} "
                                      f"out of range (r={rk})")
            cols = list(cols)
        for c in cols:
            U[:, c] += s
    return U


# ---------------------------------------------------------------------------
# Estimator nodes

@dataclass(frozen=True)
class EstimatorNode:
    """Local filter of one subsystem; sees only its declared inputs.

    ``coupling_channels`` are (publisher, external label) pairs whose
    published estimates feed the coupling compensation; ``fusion_channels``
    are (sender, shared label) pairs entering the consensus correction.
    """

    owner: int
    states: tuple[StateLabel, ...]
    A: np.ndarray
    C: np.ndarray
    L: np.ndarray
    K: np.ndarray
    share_counts: np.ndarray
    coupling_cols: Mapping[StateLabel, np.ndarray]
    coupling_channels: tuple[tuple[int, StateLabel], ...]
    fusion_channels: tuple[tuple[int, StateLabel], ...]

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def derivative(self, xhat: np.ndarray, y: np.ndarray,
                   coupling: Mapping[StateLabel, float],
                   fusion: Mapping[tuple[int, StateLabel], float]) -> np.ndarray:
        d = self.A @ xhat + self.L @ (y - self.C @ xhat)
        d = d - self.K @ (self.share_counts * xhat)
        for (_, lab) in self.coupling_channels:
            d = d + self.coupling_cols[lab] * coupling[lab]
        for ch in self.fusion_channels:
            d = d + self.K[:, self.states.index(ch[1])] * fusion[ch]
        return d


@dataclass(frozen=True)
class EstimatorNetwork:
    nodes: tuple[EstimatorNode, ...]
    offsets: tuple[int, ...]
    total: int

    def node(self, k: int) -> EstimatorNode:
        return self.nodes[k - 1]


def build_network(reps: Sequence[RepartitionedSystem], cert: GainCertificate,
                  eg: ExtendedGraph, graph: CommGraph) -> EstimatorNetwork:
    """Derive each node's message channels from the extended graph and check
    them against the repartitioned couplings (information-locality check)."""
    nodes = []
    for i, rep in enumerate(reps):
        k = rep.owner
        coupling = tuple(sorted({(e.tail[0], e.tail[1]) for e in eg.edges
                                 if e.kind == "coupling" and e.head[0] == k}))
        if {lab for (_, lab) in coupling} != set(rep.external):
            raise SimulationError(
                f"estimator {k}: extended-graph coupling channels {coupling} do not "
                f"match the repartitioned external states {rep.external}")
        fusion = tuple(sorted({(e.tail[0], e.tail[1]) for e in eg.edges
                               if e.kind == "fusion" and e.head[0] == k}))
        for (j, lab) in fusion:
            if (j, k) not in graph.edges or lab not in rep.states:
                raise SimulationError(f"estimator {k}: invalid fusion channel ({j}, {lab})")
        share = np.zeros(rep.size)
        for e in eg.edges:
            if e.kind == "fusion" and e.head[0] == k:
                share[rep.states.index(e.head[1])] += 1
        nodes.append(EstimatorNode(k, rep.states, rep.A, rep.C, cert.L[i], cert.K[i],
                                   share, rep.coupling_cols, coupling, fusion))
    sizes = [n.size for n in nodes]
    offsets = tuple(int(o) for o in np.cumsum([0] + sizes[:-1]))
    return EstimatorNetwork(tuple(nodes), offsets, sum(sizes))


def closed_loop(sys: InterconnectedSystem,
                net: EstimatorNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Coupled LTI matrices for z = [x; xhat_1; ...; xhat_N], u = [v; eta].

    Estimator rows are assembled by evaluating each node's derivative on
    basis vectors of its declared inputs only.
    """
    n = sys.n
    m = sys.m
    r_total = sys.C.shape[0]
    dim = n + net.total
    A_cl = np.zeros((dim, dim))
    B_cl = np.zeros((dim, m + r_total))
    A_cl[:n, :n] = sys.A
    B_cl[:n, :m] = sys.B

    def est_col(owner: int, lab: StateLabel) -> int:
        return n + net.offsets[owner - 1] + net.node(owner).states.index(lab)

    for i, node in enumerate(net.nodes):
        rows = slice(n + net.offsets[i], n + net.offsets[i] + node.size)
        Crows = sys.output_rows(node.owner)
        zero_y = np.zeros(Crows.shape[0])
        zero_c = {lab: 0.0 for (_, lab) in node.coupling_channels}
        zero_f = {ch: 0.0 for ch in node.fusion_channels}
        zero_x = np.zeros(node.size)
        for col in range(n):          # plant enters only through the measurement
            yc = Crows[:, col]
            if np.any(yc):
                A_cl[rows, col] = node.derivative(zero_x, yc, zero_c, zero_f)
        for p in range(node.size):
            e = np.zeros(node.size)
            e[p] = 1.0
            A_cl[rows, n + net.offsets[i] + p] = node.derivative(e, zero_y, zero_c, zero_f)
        for (src, lab) in node.coupling_channels:
            c = dict(zero_c)
            c[lab] = 1.0
            A_cl[rows, est_col(src, lab)] += node.derivative(zero_x, zero_y, c, zero_f)
        for ch in node.fusion_channels:
            f = dict(zero_f)
            f[ch] = 1.0
            A_cl[rows, est_col(*ch)] += node.derivative(zero_x, zero_y, zero_c, f)
        ooff = sys.output_offset(node.owner)
        for c in range(Crows.shape[0]):   # measurement disturbance through y
            ey = np.zeros(Crows.shape[0])
            ey[c] = 1.0
            B_cl[rows, m + ooff + c] = node.derivative(zero_x, ey, zero_c, zero_f)
    return A_cl, B_cl


# ---------------------------------------------------------------------------
# Traces

@dataclass(frozen=True)
class SimulationTrace:
    """Grid samples of the coupled run.

    Errors are always recomputed from the plant state through the selection
    functions (never stored), so the trace cannot drift out of sync with its
    own definition of the error.
    """

    times: np.ndarray          # (S+1,)
    states: np.ndarray         # (S+1, n) plant state
    estimates: np.ndarray      # (S+1, total) stacked local estimates
    inputs: np.ndarray         # (S+1, m + total outputs), [v | eta] on the grid
    selections: tuple[SelectionFunction, ...]
    labels: tuple[StateLabel, ...]   # global state labels, stacking order
    offsets: tuple[int, ...]
    sizes: tuple[int, ...]
    m: int

    @property
    def N(self) -> int:
        return len(self.selections)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def _global_positions(self, k: int) -> list[int]:
        pos = {lab: i for i, lab in enumerate(self.labels)}
        return [pos[lab] for lab in self.selections[k - 1].states]

    def partial_states(self, k: int) -> np.ndarray:
        """Plant states selected by estimator k, in its local order."""
        return self.states[:, self._global_positions(k)]

    def estimates_of(self, k: int) -> np.ndarray:
        o = self.offsets[k - 1]
        return self.estimates[:, o:o + self.sizes[k - 1]]

    def errors(self, k: int) -> np.ndarray:
        return self.partial_states(k) - self.estimates_of(k)

    def stacked_errors(self) -> np.ndarray:
        return np.hstack([self.errors(k) for k in range(1, self.N + 1)])

    def error_norms(self) -> np.ndarray:
        """(S+1, N): Euclidean error norm of each estimator over time."""
        return np.column_stack([np.linalg.norm(self.errors(k), axis=1)
                                for k in range(1, self.N + 1)])

    def state_scale(self) -> float:
        return float(max(np.abs(self.states).max(initial=0.0),
                         np.abs(self.estimates).max(initial=0.0)))

    def v(self) -> np.ndarray:
        return self.inputs[:, :self.m]

    def eta(self) -> np.ndarray:
        return self.inputs[:, self.m:]


def _rk4_step_matrices(A: np.ndarray, B: np.ndarray, h: float):
    """Exact matrices of one classical RK4 step for xdot = A x + B u(t):
    x+ = Phi x + D1 u(t) + D2 u(t + h/2) + D3 u(t + h)."""
    A2 = A @ A
    A3 = A2 @ A
    A4 = A3 @ A
    Phi = (np.eye(A.shape[0]) + h * A + (h ** 2 / 2) * A2
           + (h ** 3 / 6) * A3 + (h ** 4 / 24) * A4)
    AB = A @ B
    A2B = A @ AB
    A3B = A @ A2B
    D1 = (h / 6) * B + (h ** 2 / 6) * AB + (h ** 3 / 12) * A2B + (h ** 4 / 24) * A3B
    D2 = (2 * h / 3) * B + (h ** 2 / 3) * AB + (h ** 3 / 12) * A2B
    D3 = (h / 6) * B
    return Phi, D1, D2, D3


_CHUNK = 64


def _propagate_autonomous(Phi: np.ndarray, z0: np.ndarray, steps: int) -> np.ndarray:
    """All states of z_{i+1} = Phi z_i, computed in chunks of matrix powers."""
    dim = z0.size
    out = np.empty((steps + 1, dim))
    out[0] = z0
    powers = np.empty((_CHUNK, dim, dim))
    powers[0] = Phi
    for i in range(1, _CHUNK):
        powers[i] = powers[i - 1] @ Phi
    stack = powers.reshape(_CHUNK * dim, dim)
    z = z0
    done = 0
    while done < steps:
        take = min(_CHUNK, steps - done)
        block = (stack @ z).reshape(_CHUNK, dim)
        out[done + 1:done + 1 + take] = block[:take]
        z = block[take - 1]
        done += take
    return out


def default_timestep(A_err: np.ndarray) -> float:
    """min(1e-2, 0.1 / ||A_err||_inf): keeps per-step flow error well below
    the Lyapunov-audit slack."""
    norm = float(np.abs(A_err).sum(axis=1).max()) if A_err.size else 0.0
    return min(1e-2, 0.1 / norm) if norm > 0 else 1e-2


def simulate(sys: InterconnectedSystem, selections: Sequence[SelectionFunction],
             reps: Sequence[RepartitionedSystem], cert: GainCertificate,
             eg: ExtendedGraph, graph: CommGraph,
             disturbances: Sequence[DisturbanceSpec], x0, T: float,
             dt: float | None = None) -> SimulationTrace:
    """Fixed-step RK4 run of the plant plus all estimators from x(0) = x0.

    Estimators start at zero.  The grid is uniform and ends exactly at T; the
    default step follows the closed-loop error-dynamics norm.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != sys.n:
        raise SimulationError(f"x0 has length {x0.size}, expected {sys.n}")
    if T <= 0:
        raise SimulationError("T must be positive")
    net = build_network(reps, cert, eg, graph)
    A_cl, B_cl = closed_loop(sys, net)
    if dt is None:
        dt = default_timestep(A_cl[sys.n:, sys.n:])
    if dt <= 0 or T < dt:
        raise SimulationError(f"need 0 < dt <= T, got dt={dt}, T={T}")
    steps = max(1, int(round(T / dt)))
    h = T / steps
    times = np.linspace(0.0, T, steps + 1)

    z0 = np.concatenate([x0, np.zeros(net.total)])
    U = sample_inputs(disturbances, sys, times)
    if np.any(U):
        Uh = sample_inputs(disturbances, sys, times[:-1] + h / 2)
        Phi, D1, D2, D3 = _rk4_step_matrices(A_cl, B_cl, h)
        Z = np.empty((steps + 1, z0.size))
        Z[0] = z0
        z = z0
        for i in range(steps):
            z = Phi @ z + D1 @ U[i] + D2 @ Uh[i] + D3 @ U[i + 1]
            Z[i + 1] = z
    else:
        Phi, _, _, _ = _rk4_step_matrices(A_cl, B_cl, h)
        Z = _propagate_autonomous(Phi, z0, steps)

    bad = np.flatnonzero(~np.isfinite(Z).all(axis=1))
    if bad.size:
        raise SimulationError(f"simulation diverged at step {int(bad[0])} "
                              f"(t = {times[int(bad[0])]:.6g})")
    sizes = tuple(n.size for n in net.nodes)
    return SimulationTrace(times, Z[:, :sys.n], Z[:, sys.n:], U,
                           tuple(selections), sys.index_space.labels,
                           net.offsets, sizes, sys.m)


# ---------------------------------------------------------------------------
# Performance evaluation

@dataclass(frozen=True)
class PerformanceReport:
    """Numerical check of the disturbance-to-error energy inequality."""

    lhs: float                 # integral of the W-weighted squared errors
    rhs: float                 # disturbance energy budget plus initial cost
    disturbance_energy: float
    initial_cost: float        # x0-dependent term (P-weighted)
    ratio: float
    quadrature_error: float
    ok: bool

    def __bool__(self) -> bool:
        return self.ok


#: relative slack granted to the quadrature when comparing both sides
QUACHECK_SLACK = 1e-3


def _trapz(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.trapezoid(y, x))


def _simpson(y: np.ndarray, x: np.ndarray) -> float:
    from scipy.integrate import simpson
    return float(simpson(y, x=x))


def evaluate_performance(trace: SimulationTrace, cert: GainCertificate) -> PerformanceReport:
    """Trapezoidal quadrature of both sides of the energy inequality.

    lhs: sum_k int e_k' W_k e_k; rhs: sum_k int (omega^2 |v|^2 +
    gamma^2 |eta_k|^2) plus the initial-condition cost sum_k x0_k' P_k x0_k
    (estimators start at zero, so x0_k is the initial error).  The quadrature
    error is estimated against Simpson's rule on the same grid.
    """
    p = cert.params
    lhs_t = np.zeros(trace.times.size)
    for k in range(1, trace.N + 1):
        E = trace.errors(k)
        lhs_t += np.einsum("ij,ij->i", E, E @ p.W[k - 1])
    v2 = np.einsum("ij,ij->i", trace.v(), trace.v())
    eta2 = np.einsum("ij,ij->i", trace.eta(), trace.eta())
    rhs_t = trace.N * p.omega ** 2 * v2 + p.gamma ** 2 * eta2

    i0 = 0.0
    for k in range(1, trace.N + 1):
        e0 = trace.partial_states(k)[0]
        i0 += float(e0 @ cert.P[k - 1] @ e0)

    lhs = _trapz(lhs_t, trace.times)
    dist = _trapz(rhs_t, trace.times)
    rhs = dist + i0
    quad_err = max(abs(lhs - _simpson(lhs_t, trace.times)),
                   abs(dist - _simpson(rhs_t, trace.times)))
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))
    ok = lhs <= rhs * (1.0 + QUACHECK_SLACK)
    return PerformanceReport(lhs, rhs, dist, i0, ratio, quad_err, ok)


# ---------------------------------------------------------------------------
# Trace serialization and batch running

def trace_csv_header(trace: SimulationTrace) -> list[str]:
    cols = ["t"]
    cols += [f"x_{k}_{i}" for (k, i) in trace.labels]
    for k in range(1, trace.N + 1):
        cols += [f"xhat_{k}_{p}" for p in range(1, trace.sizes[k - 1] + 1)]
    cols += [f"eps_norm_{k}" for k in range(1, trace.N + 1)]
    return cols


def write_trace_csv(trace: SimulationTrace, path) -> None:
    """One row per step; locale-independent, 17 significant digits."""
    norms = trace.error_norms()
    with open(path, "w", newline="") as fh:
        fh.write(", ".join(trace_csv_header(trace)) + "\n")
        for i in range(trace.times.size):
            row = np.concatenate([[trace.times[i]], trace.states[i],
                                  trace.estimates[i], norms[i]])
            fh.write(", ".join(format(v, ".17g") for v in row) + "\n")


def thread_count() -> int:
    """Worker bound for scenario batches; COOPEST_THREADS overrides."""
    env = os.environ.get("COOPEST_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SimulationError(f"COOPEST_THREADS must be an integer, got {env!r}")
    return max(1, min(4, os.cpu_count() or 1))


def run_scenarios(sys, selections, reps, cert, eg, graph, scenarios,
                  T: float, dt: float | None = None):
    """Simulate a batch of disturbance scenarios, each with its own trace.

    scenarios: sequence of (x0, disturbance specs) pairs.  Runs concurrently
    up to thread_count() workers.
    """
    from concurrent.futures import ThreadPoolExecutor

    def one(item):
        x0, specs = item
        return simulate(sys, selections, reps, cert, eg, graph, specs, x0, T, dt)

    workers = thread_count()
    if workers == 1 or len(scenarios) <= 1:
        return [one(s) for s in scenarios]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, scenarios))
