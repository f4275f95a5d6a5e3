"""Differentially private federated learning simulator.

A single-process research harness: local SGD on simulated clients, clipped
and noised aggregation on the server, adaptive clipping-threshold policies
driven by loss signals, and a from-scratch Renyi-DP accountant that
calibrates the noise multiplier. A scikit-learn style classifier wraps the
whole loop; the `dplac` command line drives batch experiments.
"""

from .accountant import (
    DEFAULT_ORDERS,
    BracketError,
    PrivacySpec,
    RdpCurve,
    compose,
    compute_epsilon,
    get_noise_multiplier,
    rdp_subsampled_gaussian,
    rdp_to_dp,
    split_budget,
)
from .clipstrat import (
    DEFAULT_LOSS_GRID,
    DEFAULT_MULTIPLIER_GRID,
    DEFAULT_THRESHOLD_GRID,
    ClipState,
    InitCReport,
    StrategyKind,
    clac_loss_channel,
    client_vote,
    init_c,
    strategy_step,
    update_c,
)
from .config import ConfigError, load_config, serialize_config
from .estimator import DPFederatedClassifier
from .flcore import (
    Architecture,
    Dataset,
    LocalConfig,
    Model,
    PartitionSpec,
    accuracy,
    dirichlet_partition,
    init_model,
    load_dataset,
    logits,
    loss,
    loss_gradient,
    save_dataset,
    synth_dataset,
    user_update,
)
from .harness import (
    DataSpec,
    ExperimentConfig,
    ExperimentResult,
    RoundRecord,
    derive_rng,
    load_model_params,
    run_experiment,
    sample_cohort,
    save_model,
    update_w,
    write_round_log,
    write_summary,
)
from .mechanisms import (
    aggregate_votes,
    clip,
    gaussian_perturb,
    nearest_bucket,
    one_hot_vote,
    private_scalar_mean,
    select_mode,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LOSS_GRID",
    "DEFAULT_MULTIPLIER_GRID",
    "DEFAULT_ORDERS",
    "DEFAULT_THRESHOLD_GRID",
    "Architecture",
    "BracketError",
    "ClipState",
    "ConfigError",
    "DPFederatedClassifier",
    "DataSpec",
    "Dataset",
    "ExperimentConfig",
    "ExperimentResult",
    "InitCReport",
    "LocalConfig",
    "Model",
    "PartitionSpec",
    "PrivacySpec",
    "RdpCurve",
    "RoundRecord",
    "StrategyKind",
    "accuracy",
    "aggregate_votes",
    "clac_loss_channel",
    "client_vote",
    "clip",
    "compose",
    "compute_epsilon",
    "derive_rng",
    "dirichlet_partition",
    "gaussian_perturb",
    "get_noise_multiplier",
    "init_c",
    "init_model",
    "load_config",
    "load_dataset",
    "load_model_params",
    "logits",
    "loss",
    "loss_gradient",
    "nearest_bucket",
    "one_hot_vote",
    "private_scalar_mean",
    "rdp_subsampled_gaussian",
    "rdp_to_dp",
    "run_experiment",
    "sample_cohort",
    "save_dataset",
    "save_model",
    "select_mode",
    "serialize_config",
    "split_budget",
    "strategy_step",
    "synth_dataset",
    "update_c",
    "update_w",
    "user_update",
    "write_round_log",
    "write_summary",
]
