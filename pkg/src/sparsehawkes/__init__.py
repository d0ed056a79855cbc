"""Multivariate Hawkes process modeling for large entity sets with sparse sequences."""

from .model import (
    Dataset,
    Event,
    ModelParams,
    NumericalDivergenceError,
    Sequence,
    SequenceScan,
    alpha,
    alpha_row,
    compensator,
    influence_matrix,
    intensity,
    softplus,
    softplus_grad,
    softplus_inv,
)
from .dense import GradientBuffer, dense_gradient, dense_log_likelihood
from .lazy import (
    LazyCaches,
    SequenceGradient,
    StaleCacheError,
    accumulate_lazy_gradient,
    build_caches,
    lazy_log_likelihood,
    lazy_sequence_gradients,
    update_u_hat,
)
from .simulate import (
    GroundTruth,
    InfluenceMatrix,
    UnstableConfigurationError,
    low_rank_approximation,
    rescale_for_stability,
    sample_scale_free_graph,
    spectral_radius_estimate,
    synthetic_dataset,
    thinning_sample,
    time_rescaling_residuals,
)
from .train import (
    AdamState,
    TrainConfig,
    TrainReport,
    TrainingDivergedError,
    init_params,
    train,
    train_parallel,
)
from .data_io import (
    CascadeFile,
    CascadeFormatError,
    Checkpoint,
    CheckpointFormatError,
    DatasetStats,
    dataset_stats,
    parse_cascades,
    read_cascade_file,
    read_checkpoint,
    read_checkpoint_full,
    write_cascades,
    write_checkpoint,
)
from .evaluate import (
    BenchmarkResult,
    RecoveryReport,
    holdout_loglik,
    materialize_influence,
    rmse_params,
    runtime_benchmark,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Event",
    "ModelParams",
    "NumericalDivergenceError",
    "Sequence",
    "SequenceScan",
    "alpha",
    "alpha_row",
    "compensator",
    "influence_matrix",
    "intensity",
    "softplus",
    "softplus_grad",
    "softplus_inv",
    "GradientBuffer",
    "dense_gradient",
    "dense_log_likelihood",
    "LazyCaches",
    "SequenceGradient",
    "StaleCacheError",
    "accumulate_lazy_gradient",
    "build_caches",
    "lazy_log_likelihood",
    "lazy_sequence_gradients",
    "update_u_hat",
    "GroundTruth",
    "InfluenceMatrix",
    "UnstableConfigurationError",
    "low_rank_approximation",
    "rescale_for_stability",
    "sample_scale_free_graph",
    "spectral_radius_estimate",
    "synthetic_dataset",
    "thinning_sample",
    "time_rescaling_residuals",
    "AdamState",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "init_params",
    "train",
    "train_parallel",
    "CascadeFile",
    "CascadeFormatError",
    "Checkpoint",
    "CheckpointFormatError",
    "DatasetStats",
    "dataset_stats",
    "parse_cascades",
    "read_cascade_file",
    "read_checkpoint",
    "read_checkpoint_full",
    "write_cascades",
    "write_checkpoint",
    "BenchmarkResult",
    "RecoveryReport",
    "holdout_loglik",
    "materialize_influence",
    "rmse_params",
    "runtime_benchmark",
    "__version__",
]
