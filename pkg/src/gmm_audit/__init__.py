"""GMM estimation with a weighting-matrix misspecification audit.

The package fits generalized method of moments models, reports conventional
and misspecification-robust standard errors and the J-statistic, and
quantifies how much the point estimate can move as the weighting matrix
ranges over an eigenvalue-bounded class.  An exact normal limit experiment
backs the audit's interval formula.
"""

__version__ = "1.0.0"

from .audit import (
    AuditReport,
    Interval,
    WeightPoint,
    adversarial_t,
    attainable_interval,
    cs_intersection,
    hausdorff,
    min_max_t,
    run_audit,
    sample_attainable,
)
from .estimation import FitStrategy, GmmFit, NonConvergenceError, closed_form_linear, fit
from .inference import (
    BootstrapInstabilityError,
    BootstrapResult,
    CovEstimate,
    bootstrap,
    conventional_cov,
    j_statistic,
    robust_cov,
)
from .limitlab import (
    CanonicalForm,
    LimitProblem,
    canonical_form,
    draw,
    exact_audit_points,
    exact_interval,
    j_analog,
    phi_hat,
    weight_for_direction,
)
from .mc import LocalIvDgp, MeanSquareDgp, make_dgp, mc_local
from .moments import (
    Dataset,
    MomentEvaluationError,
    MomentModel,
    ModelConfigError,
    WeightMatrix,
    builtin_model,
    check_weight,
    moment_stats,
)

__all__ = [
    "__version__",
    "AuditReport",
    "Interval",
    "WeightPoint",
    "adversarial_t",
    "attainable_interval",
    "cs_intersection",
    "hausdorff",
    "min_max_t",
    "run_audit",
    "sample_attainable",
    "FitStrategy",
    "GmmFit",
    "NonConvergenceError",
    "closed_form_linear",
    "fit",
    "BootstrapInstabilityError",
    "BootstrapResult",
    "CovEstimate",
    "bootstrap",
    "conventional_cov",
    "j_statistic",
    "robust_cov",
    "CanonicalForm",
    "LimitProblem",
    "canonical_form",
    "draw",
    "exact_audit_points",
    "exact_interval",
    "j_analog",
    "phi_hat",
    "weight_for_direction",
    "LocalIvDgp",
    "MeanSquareDgp",
    "make_dgp",
    "mc_local",
    "Dataset",
    "MomentEvaluationError",
    "MomentModel",
    "ModelConfigError",
    "WeightMatrix",
    "builtin_model",
    "check_weight",
    "moment_stats",
]
