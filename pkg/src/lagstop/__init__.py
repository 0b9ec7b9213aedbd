"""Optimal stopping with lagged (look-ahead) payoffs.

Modules
-------
paths      seeded Brownian / walk batches and the enumerable walk tree
obstacle   payoff functionals, problem specs and the lagged obstacle matrix
oracle     exact backward induction and brute-force rule search on the walk tree
solver     regression Monte Carlo for the discrete reflected BSDE
analysis   closed forms, bounds, epsilon sweeps and convergence studies
cli        ``lagstop`` command-line entry point
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    DataError,
    GridMismatch,
    InvalidArgument,
    LagstopError,
    NumericalFailure,
    PayoffEvaluationError,
    ResourceLimit,
)
from .paths import *  # noqa: F401,F403
from .obstacle import (  # noqa: F401
    PAYOFFS,
    BoundProblem,
    ObstacleValues,
    PayoffFunctional,
    ProblemSpec,
    bind,
    build_obstacle,
    integrability_probe,
    obstacle_matrix,
    shiryaev_spec,
)
from .features import BasisSpec  # noqa: F401
from .oracle import (  # noqa: F401
    OracleResult,
    brute_force_rules,
    evaluate_rule,
    oracle_solve,
    oracle_value_curve,
    strict_gap,
)
from .solver import (  # noqa: F401
    RbsdeSolution,
    ValueEstimate,
    attach_policy_value,
    estimate_Z,
    evaluate_policy,
    solve,
    solve_problem,
    stopping_histogram,
    value_at_floor,
)
from .analysis import (  # noqa: F401
    SolverConfig,
    SweepResult,
    bounds,
    closed_form_value,
    convergence_study,
    expected_max,
    sweep,
)
