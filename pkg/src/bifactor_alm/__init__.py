"""Exploratory bi-factor analysis by an augmented Lagrangian method.

Learns exact bi-factor (and hierarchical) loading structures by maximum
likelihood under product-of-loadings equality constraints, chooses the
number of group factors by BIC, and reproduces simulation studies of
structure recovery.
"""

from .alm import (
    AllStartsFailed,
    AlmConfig,
    FitResult,
    OuterStep,
    alm_fit,
    extract_structure,
    inner_minimize,
    multi_start_fit,
    random_init,
    structure_gap,
)
from .diagnostics import IdentifiabilityReport, StructureMismatch, check_conditions, compute_q_h
from .model import (
    FIG_A1_TREE,
    ConstraintSet,
    FactorParams,
    HierarchyTree,
    ModelError,
    SampleCov,
    bifactor_constraint_pairs,
    build_phi,
    cholesky_factor,
    hierarchy_constraint_pairs,
    phi_jacobian,
    tree_automorphisms,
)
from .objective import (
    AugLagCoefficients,
    augmented_gradient,
    augmented_objective,
    constraint_residuals,
    discrepancy,
)
from .selection import BicSweepResult, bic_bifactor, bic_efa, efa_fit, select_g, select_g_efa
from .simlab import (
    StudyReport,
    StudySpec,
    TruthModel,
    acc,
    emc,
    generate_bifactor_truth,
    generate_hier_truth,
    hier_match_metrics,
    mse_lambda,
    run_study,
    sample_covariance,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
