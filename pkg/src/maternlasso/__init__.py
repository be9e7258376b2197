"""maternlasso: sparse multivariate Matern random fields.

Valid parsimonious multivariate Matern covariance models, LASSO-penalized
estimation by projected proximal block coordinate descent (full or pairwise
composite likelihood), information-criterion model selection along a
warm-started regularization path, exact simulation and sparse-aware cokriging.
"""

from .matern import (
    BlockOrdering,
    MaternParams,
    assemble_full_covariance,
    assemble_pair_covariance,
    bessel_k,
    cross_covariance,
    cross_range,
    cross_sigma,
    matern_correlation,
)
from .spatial_data import (
    NeighborGraph,
    SpatialDataset,
    empirical_cross_variogram,
    load_dataset,
    nearest_neighbors,
    normal_score_transform,
    save_dataset,
    train_test_split,
)
from .objectives import (
    CompositeObjective,
    FullObjective,
    ObjectiveKind,
    composite_loglik,
    full_loglik,
    make_objective,
    penalized_objective,
)
from .optimizer import FitConfig, FitResult, fit, fit_marginals, project_correlation_box
from .selection import (
    ClicConfig,
    LambdaGrid,
    PathResult,
    aic,
    clic,
    lambda_grid,
    lambda_max,
    select_lambda,
    solution_path,
)
from .simulate import (
    experiment_4_1_config,
    experiment_config,
    make_band_R,
    sample_locations_uniform,
    simulate_field,
)
from .predict import (
    CokrigingResult,
    PredictionRequest,
    active_variable_set,
    cokrige,
    evaluate_predictions,
    prediction_grid,
    save_predictions,
)

__version__ = "0.1.0"

__all__ = [
    "BlockOrdering",
    "MaternParams",
    "SpatialDataset",
    "NeighborGraph",
    "ObjectiveKind",
    "FullObjective",
    "CompositeObjective",
    "FitConfig",
    "FitResult",
    "ClicConfig",
    "LambdaGrid",
    "PathResult",
    "CokrigingResult",
    "assemble_full_covariance",
    "assemble_pair_covariance",
    "bessel_k",
    "matern_correlation",
    "cross_covariance",
    "cross_range",
    "cross_sigma",
    "load_dataset",
    "save_dataset",
    "nearest_neighbors",
    "normal_score_transform",
    "empirical_cross_variogram",
    "train_test_split",
    "full_loglik",
    "composite_loglik",
    "make_objective",
    "penalized_objective",
    "fit",
    "fit_marginals",
    "project_correlation_box",
    "lambda_max",
    "lambda_grid",
    "solution_path",
    "aic",
    "clic",
    "select_lambda",
    "simulate_field",
    "sample_locations_uniform",
    "make_band_R",
    "experiment_config",
    "experiment_4_1_config",
    "PredictionRequest",
    "cokrige",
    "active_variable_set",
    "evaluate_predictions",
    "prediction_grid",
    "save_predictions",
]
