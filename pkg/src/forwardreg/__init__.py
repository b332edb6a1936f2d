"""Robust output regulation for semilinear contraction systems.

Numerical forwarding design: Gram-weighted state spaces, IMEX evolution of
semilinear plants, quadrature evaluation of the forwarding map and its
adjoint derivative, the integrator-plus-forwarding feedback loop, and a
verification battery for the standing assumptions.
"""

__version__ = "0.1.0"

from .spaces import (
    LinMap,
    NormEstimate,
    SpaceSpec,
    adjoint,
    inner,
    operator_norm,
    smallest_singular_value,
    weighted_singular_values,
)
from .evolution import (
    AlphaEstimate,
    ContractionReport,
    OperatorSolver,
    Plant,
    Trajectory,
    apply_nonlinear_A,
    adjoint_tangent_flow,
    contraction_check,
    estimate_alpha,
    flow,
    step,
    tangent_flow,
)
from .forwarding import (
    CoercivityReport,
    ForwardingMap,
    StateEvaluation,
    assemble_feedback_matrix,
    build_forwarding,
    coercivity_lambda,
    eval_M,
    eval_dM,
    eval_dM_adjoint,
    eval_dM_adjoint_B,
    functional_equation_residual,
    gains,
    linear_forwarding,
    uniform_coercivity_check,
)
from .regulator import (
    ClosedLoopState,
    EquilibriumResult,
    RegulationReport,
    RunResult,
    Scenario,
    convergence_report,
    feedback,
    find_equilibrium,
    lyapunov,
    simulate,
)
from .plants import (
    SineGordonParams,
    WilsonCowanParams,
    compute_M_ks,
    make_linear_benchmark,
    make_sine_gordon,
    make_wilson_cowan,
)
from .verify import (
    CheckResult,
    FDCheckTable,
    LadderTable,
    LinearOracle,
    VerificationReport,
    contraction_samples,
    dense_linear_oracle,
    dissipation_constant,
    fd_check_dM,
    linearized_decay_samples,
    refinement_ladder,
    run_battery,
    smooth_sample,
)

__all__ = [
    "__version__",
    # spaces
    "LinMap", "NormEstimate", "SpaceSpec", "adjoint", "inner",
    "operator_norm", "smallest_singular_value", "weighted_singular_values",
    # evolution
    "AlphaEstimate", "ContractionReport", "OperatorSolver", "Plant",
    "Trajectory", "apply_nonlinear_A", "adjoint_tangent_flow",
    "contraction_check", "estimate_alpha", "flow", "step", "tangent_flow",
    # forwarding
    "CoercivityReport", "ForwardingMap", "StateEvaluation",
    "assemble_feedback_matrix", "build_forwarding", "coercivity_lambda",
    "eval_M", "eval_dM", "eval_dM_adjoint", "eval_dM_adjoint_B",
    "functional_equation_residual", "gains", "linear_forwarding",
    "uniform_coercivity_check",
    # regulator
    "ClosedLoopState", "EquilibriumResult", "RegulationReport", "RunResult",
    "Scenario", "convergence_report", "feedback", "find_equilibrium",
    "lyapunov", "simulate",
    # plants
    "SineGordonParams", "WilsonCowanParams", "compute_M_ks",
    "make_linear_benchmark", "make_sine_gordon", "make_wilson_cowan",
    # verify
    "CheckResult", "FDCheckTable", "LadderTable", "LinearOracle",
    "VerificationReport", "contraction_samples", "dense_linear_oracle",
    "dissipation_constant", "fd_check_dM", "linearized_decay_samples",
    "refinement_ladder", "run_battery", "smooth_sample",
]
