"""Solver and verification toolkit for time-inconsistent mean-field
stochastic linear-quadratic control with initial-time-dependent data.

The package computes open-loop time-consistent equilibrium controls via
coupled backward matrix recursions, certifies them exactly on a binary
scenario tree, and cross-checks costs by Monte Carlo simulation.
"""

__version__ = "0.1.0"

from .errors import (
    DimensionMismatch,
    EmptyConfig,
    EpsilonNonPositive,
    HorizonMismatch,
    MeanfieldLQError,
    NonFinite,
    NonSquare,
    ProblemFormatError,
)
from .matrices import PsdVerdict, eig_general_2x2, pinv, psd_check, range_residual
from .model import (
    InitialPair,
    ProblemData,
    bundled_example,
    from_no_meanfield,
    from_time_invariant,
    validate,
)
from .recursion import (
    GainSchedule,
    RecursionTables,
    SolvabilityReport,
    convexity_margins,
    affine_feedback_tables,
    solve_epsilon,
    solve_fixed_pair,
    solve_gdre_global,
    solve_no_meanfield,
    solve_symmetric,
)
from .montecarlo import SimConfig, SimResult, estimate_deviation_gap, simulate
from .tree import (
    AdaptedProcess,
    EquilibriumCertificate,
    ScenarioTree,
    certify_equilibrium,
    cost,
    difference_formula_check,
    variation_cost,
    representation_check,
    roll_forward,
    solve_bsde,
    stationarity_residuals,
)

__all__ = [name for name in dir() if not name.startswith("_")]
