"""Higher-order orthogonal moment functions for moment-condition models.

Construction of order-q Neyman-orthogonal moment functions from rooted trees
with closed-form rational coefficients, exact certification of the
orthogonality property on finite-support distributions, U-statistic
estimation with within-unit sample splitting, and the grouped callback-design
Monte Carlo study.
"""

from .engine import (
    MomentFunction,
    assemble_psi,
    assemble_psi_affine,
    det_transform_exact,
    det_transform_overid,
    evaluate_kernel,
    explicit_psi,
)
from .estimation import (
    DirichletRegularizer,
    Panel,
    PanelMomentEstimator,
    SplitPlan,
    UStatConfig,
    Unit,
    nuisance_fit,
    orth_estimate,
    u_statistic,
)
from .models import (
    DerivativeTensor,
    ModelSpec,
    Polynomial,
    builtin_generated_regressor,
    builtin_heterocoef,
    builtin_linear_iv,
    builtin_neyman_scott,
    fd_derivative,
    get_model,
)
from .simulation import (
    SimConfig,
    SimResult,
    generate_panel,
    neyman_scott_demo,
    population_truths,
    run_study,
)
from .trees import (
    RootedTree,
    TreeInvariants,
    coefficient,
    enumerate_trees,
    invariants,
    is_affine_tree,
)
from .verification import (
    DiscreteDGP,
    OrthoReport,
    composition_sum_oracle,
    get_fixture,
    hockey_stick_oracle,
    orthogonality_check,
    population_moment,
)

__version__ = "0.1.0"

__all__ = [
    "MomentFunction",
    "assemble_psi",
    "assemble_psi_affine",
    "det_transform_exact",
    "det_transform_overid",
    "evaluate_kernel",
    "explicit_psi",
    "DirichletRegularizer",
    "Panel",
    "PanelMomentEstimator",
    "SplitPlan",
    "UStatConfig",
    "Unit",
    "nuisance_fit",
    "orth_estimate",
    "u_statistic",
    "DerivativeTensor",
    "ModelSpec",
    "Polynomial",
    "builtin_generated_regressor",
    "builtin_heterocoef",
    "builtin_linear_iv",
    "builtin_neyman_scott",
    "fd_derivative",
    "get_model",
    "SimConfig",
    "SimResult",
    "generate_panel",
    "neyman_scott_demo",
    "population_truths",
    "run_study",
    "RootedTree",
    "TreeInvariants",
    "coefficient",
    "enumerate_trees",
    "invariants",
    "is_affine_tree",
    "DiscreteDGP",
    "OrthoReport",
    "composition_sum_oracle",
    "get_fixture",
    "hockey_stick_oracle",
    "orthogonality_check",
    "population_moment",
]
