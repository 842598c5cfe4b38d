"""Cooperative reduced-order H-infinity estimation for interconnected LTI systems.

Workflow: describe the plant as coupled subsystem blocks, choose which
states each local estimator reconstructs, validate the partition and the
communication topology, synthesize the filter gains from the coupled matrix
inequalities, then verify the result independently (certificate residuals,
stability, frequency-domain bound) and by simulation.
"""

from .model import (
    CouplingBlock,
    InterconnectedSystem,
    ModelError,
    StateIndexSpace,
    SubsystemModel,
    assemble_global,
    check_detectability,
    check_observability,
    extract_blocks,
)
from .partition import (
    AssignmentFunction,
    PartitionError,
    RepartitionedSystem,
    SelectionFunction,
    default_assignment,
    repartition,
    repartition_all,
    validate_assignment,
    validate_partition,
)
from .graphs import (
    CommGraph,
    ExtendedGraph,
    GraphError,
    build_extended_graph,
    check_comm_requirements,
    export_dot,
)
from .lmi_engine import AffineBlock, ConicProblem, SolveResult
from .synthesis import (
    GainCertificate,
    InfeasibleError,
    SynthesisFailure,
    SynthesisParams,
    assemble_lmi,
    extract_gains,
    optimize_performance,
    search_feasible_params,
    solve_coupled,
)
from .analysis import (
    ErrorSystem,
    assemble_error_system,
    check_hinf_frequency,
    check_lmi_residuals,
    check_stability,
    lyapunov_decay_audit,
)
from .sim import (
    DisturbanceSpec,
    PerformanceReport,
    SimulationTrace,
    evaluate_performance,
    generate_disturbance,
    simulate,
    write_trace_csv,
)

__version__ = "0.1.0"
