"""Partial-observability transparency control for network aggregative games.

A principal partitions agents into blocks and publicly announces only the
per-block mean of the latest actions.  This package simulates the induced
best response dynamics, computes and certifies the unique equilibrium,
scores partitions by welfare or free riding, finds exact optima by
exhaustive search at small scale, and at larger scale solves a convex
relaxation over doubly-stochastic PSD matrices and rounds the result back
to a partition with community detection.
"""

from .game import (
    GameInstance,
    SqrtPayoff,
    ValidationError,
    agent_payoff,
    check_interiority,
    contraction_factor,
    generate_instance,
    load_instance,
    save_instance,
)
from .partitions import (
    ObservationMatrix,
    Partition,
    count_partitions,
    enumerate_partitions,
    format_partition,
    iter_assignments,
    observation_matrix,
    parse_partition,
)
from .dynamics import (
    ConvergenceError,
    EquilibriumResult,
    LcpReport,
    best_response_step,
    interior_solve,
    iterate_equilibrium,
    lcp_residuals,
    neumann_approx,
    solve_equilibrium,
)
from .metrics import (
    Metric,
    SearchReport,
    evaluate_partition,
    exhaustive_search,
    free_riding,
    metric_value,
    welfare,
)
from .relax import (
    FeasibleSet,
    SolverParams,
    SolverReport,
    free_riding_gradient,
    free_riding_objective,
    project_feasible,
    solve_relaxation,
    welfare_gradient,
    welfare_objective,
)
from .community import (
    WeightedGraph,
    cluster_fitness,
    detect_communities,
    round_to_partition,
    write_dot,
)

__version__ = "0.1.0"
