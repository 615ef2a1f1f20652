"""Personalized decision policies from longitudinal data via jointly
penalized mixed-model estimation."""

from .errors import (
    ConfigurationError,
    NoOverlapError,
    NumericError,
    ParameterError,
)
from .model import (
    Action,
    Dataset,
    Family,
    ModelSpec,
    Parameters,
    State,
    Step,
    Trajectory,
    build_features,
    centering_from_actions,
    inverse_link,
    linear_predictor,
)
from .objective import (
    ObjectiveValue,
    PenaltyConfig,
    hessian_vec,
    penalized_objective,
    pseudo_loglik,
    score,
)
from .solver import (
    FitResult,
    TronConfig,
    extract_policy,
    fit_at_lambda,
    kkt_screen,
    pooled_glm,
    predicted_means,
    select_lambda,
    tron_maximize,
    update_hyperparams,
)
from .simulate import (
    ExampleParams,
    ScenarioSpec,
    SimulatedTrial,
    gen_appendix_example,
    gen_study,
    gen_trajectory,
    gen_trial,
    named_scenario,
    sample_random_effects,
    study_model_spec,
)
from .evaluate import (
    PolicyTable,
    gee_fit,
    iptw_response_rate,
    mglm_fit,
    mse_policy_params,
    truth_table,
    value_at_state,
    value_ratio,
)

__version__ = "0.1.0"
