"""Probabilistic dynamics models for off-policy evaluation and planning.

Two model families share one toolkit: a feedforward network emitting a
diagonal Gaussian over (next state, reward), and an autoregressive network
that factorizes the same distribution one dimension at a time. Both train
by maximum likelihood and plug into Monte-Carlo value estimation, a
softmax-weighted trajectory planner, and dataset augmentation.
"""

from .data import Transition, TransitionDataset
from .dynamics import (
    LOG_VARIANCE_MAX,
    LOG_VARIANCE_MIN,
    AutoregressiveDynamics,
    FeedforwardDynamics,
    GaussianPrediction,
    NormalizationStats,
    ar_nll,
    ar_nll_sequential,
    ar_predict_dim,
    ar_sample,
    ar_sample_batch,
    ff_nll,
    ff_predict,
    ff_predict_batch,
    ff_sample,
    ff_sample_batch,
    fit_normalization,
    model_nll,
    model_nll_per_dim,
    sample_batch,
)
from .envs import (
    CorrelatedChainEnv,
    GaussianLinearPolicy,
    LinearGaussianEnv,
    PendulumEnv,
    PolicySet,
    analytic_value_linear_gaussian,
    collect_dataset,
    lqr_gain,
    make_policy_set,
    true_policy_value_mc,
)
from .errors import (
    ArdynError,
    CacheError,
    ConfigError,
    DataFormatError,
    DegenerateBootstrapError,
    DegenerateInputError,
    DivergenceError,
    EmptyBatchError,
    MaskingError,
    NumericError,
    PlanningFailureError,
    ShapeError,
)
from .io import (
    load_checkpoint,
    load_dataset,
    load_initial_states,
    load_synthetic_flags,
    save_checkpoint,
    save_dataset,
    save_initial_states,
    save_synthetic_flags,
)
from .nn import LrSchedule, MlpSpec, OptimizerState, ParameterSet, lr_at, mlp_backward, mlp_forward, optimizer_step
from .ope import (
    MetricsReport,
    OpeReport,
    StudyReport,
    absolute_error,
    bootstrap_metric,
    compute_metrics,
    ensemble_mb_ope,
    mb_ope,
    nll_vs_ope_study,
    pearson_r,
    regret_at_k,
    spearman_rho,
)
from .planning import (
    LinearQuadraticCritic,
    MppiConfig,
    PlannerEvalReport,
    ZeroCritic,
    augment_dataset,
    evaluate_planner,
    mppi_plan,
)
from .training import (
    SweepReport,
    TrainConfig,
    TrainReport,
    evaluate_nll,
    full_grid,
    hyperparameter_sweep,
    split_dataset,
    train_model,
)

__version__ = "0.1.0"
