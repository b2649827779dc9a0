"""Robust estimation of Gaussian linear mixed models by minimum density
power divergence, with sandwich inference, robustness diagnostics, and a
Monte Carlo contamination-study harness."""

from .asymptotics import (
    AsymptoticInfo,
    WaldRow,
    are_curve,
    asymptotic_info,
    omega_inv_sqrt,
    wald_tests,
)
from .divergence import (
    DpdConfig,
    ObjectiveEval,
    eval_objective,
    eval_weights,
    gaussian_log_density,
    power_integral,
)
from .errors import (
    DidNotConverge,
    DimensionMismatch,
    DpdlmmError,
    NotBalanced,
    NotPositiveDefinite,
    SingularEstimate,
    SingularPsi,
    SingularSigma0,
)
from .estimator import (
    FitResult,
    SolverConfig,
    fit,
    fit_alpha_path,
    fit_balanced_fixed_point,
    fixed_point_beta_update,
    initial_theta,
)
from .model import (
    CovarianceSet,
    GroupBlock,
    GroupedDesign,
    ThetaParams,
    assemble_covariances,
    mahalanobis_residual,
)
from .robustness import (
    SensitivityReport,
    ges_alpha_factor,
    influence_all,
    influence_beta,
    influence_sigma,
    sensitivities,
    sss_alpha_factor,
)
from .simulation import (
    ContaminationSpec,
    CrossedDesignSpec,
    McCell,
    McReport,
    McScenario,
    contaminate_casewise,
    contaminate_cellwise,
    default_alpha_menu,
    generate_crossed,
    kld,
    mkld,
    msmd,
    run_study,
)

__all__ = [
    "AsymptoticInfo",
    "ContaminationSpec",
    "CovarianceSet",
    "CrossedDesignSpec",
    "DidNotConverge",
    "DimensionMismatch",
    "DpdConfig",
    "DpdlmmError",
    "FitResult",
    "GroupBlock",
    "GroupedDesign",
    "McCell",
    "McReport",
    "McScenario",
    "NotBalanced",
    "NotPositiveDefinite",
    "ObjectiveEval",
    "SensitivityReport",
    "SingularEstimate",
    "SingularPsi",
    "SingularSigma0",
    "SolverConfig",
    "ThetaParams",
    "WaldRow",
    "are_curve",
    "assemble_covariances",
    "asymptotic_info",
    "contaminate_casewise",
    "contaminate_cellwise",
    "default_alpha_menu",
    "eval_objective",
    "eval_weights",
    "fit",
    "fit_alpha_path",
    "fit_balanced_fixed_point",
    "fixed_point_beta_update",
    "gaussian_log_density",
    "generate_crossed",
    "ges_alpha_factor",
    "influence_all",
    "influence_beta",
    "influence_sigma",
    "initial_theta",
    "kld",
    "mahalanobis_residual",
    "mkld",
    "msmd",
    "omega_inv_sqrt",
    "power_integral",
    "run_study",
    "sensitivities",
    "sss_alpha_factor",
    "wald_tests",
]

__version__ = "0.1.0"
