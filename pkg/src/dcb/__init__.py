"""Dynamic covariate balancing for treatment histories in panel data."""

__version__ = "0.1.0"

from .balancer import (
    BalanceConfig,
    BalanceWeights,
    TuningGrid,
    construct_sipw_weights,
    imbalance_report,
    solve_weight_sequence,
    solve_weights_step,
    tune_constraints,
)
from .competitors import (
    PropensityModel,
    aipw_estimate,
    ipw_estimate,
    naive_lasso_estimate,
    sequential_estimate,
)
from .errors import *  # noqa: F401,F403
from .estimator import (
    DCBConfig,
    EstimateReport,
    ResidualSet,
    ate_estimate,
    chi_quantile,
    confidence_interval,
    dcb_estimate,
    variance_estimate,
)
from .panel import (
    HistoryMatrix,
    PanelDataset,
    build_history,
    load_panel,
    match_mask,
    treatment_history,
    write_panel,
)
from .regression import (
    CoefficientPath,
    LassoConfig,
    LassoFit,
    LogisticFit,
    cross_validate_lambda,
    fit_coefficient_path,
    lasso_fit,
    logistic_fit,
)
from .simulation import (
    SimConfig,
    generate_dataset,
    propensity_summary,
    run_coverage_experiment,
    run_mse_experiment,
)
