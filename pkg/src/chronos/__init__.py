"""Chronos: score sampled reasoning trajectories as time series and aggregate
answers by score-weighted majority voting.

Pipeline: trajectory JSONL -> per-step confidence signal -> multi-scale
convolutional scorer -> top-eta weighted vote -> evaluation report.
"""

from chronos.trajectory_store import (
    DatasetSplit,
    TokenStep,
    Trajectory,
    TrajectoryValidationError,
    load_jsonl,
    save_jsonl,
    split_dataset,
)
from chronos.signal import (
    Standardizer,
    TemporalSignal,
    compute_signal,
    fit_standardizer,
    standardize,
    tail_window,
)
from chronos.scorer_net import (
    CheckpointError,
    ChronosConfig,
    ModelParams,
    ScoredTrajectory,
    count_flops,
    forward,
    init_params,
    load_checkpoint,
    load_ensemble,
    save_checkpoint,
    score_trajectories,
)
from chronos.trainer import (
    TrainConfig,
    TrainReport,
    auc,
    bce_loss,
    ensemble_score,
    grid_search,
    train,
    train_ensemble,
)
from chronos.voter import (
    NO_ANSWER,
    VoteOutcome,
    canonicalize_answer,
    top_eta_filter,
    unweighted_majority,
    vote,
    weighted_majority,
)
from chronos.evaluator import (
    EvalReport,
    QuestionPool,
    build_pools,
    compare_report,
    export_distribution,
    pass_at_1,
    subsample_eval,
)
from chronos.synthgen import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ChronosConfig",
    "DatasetSplit",
    "EvalReport",
    "ModelParams",
    "NO_ANSWER",
    "QuestionPool",
    "ScoredTrajectory",
    "Standardizer",
    "SynthSpec",
    "TemporalSignal",
    "TokenStep",
    "TrainConfig",
    "TrainReport",
    "Trajectory",
    "TrajectoryValidationError",
    "VoteOutcome",
    "auc",
    "bce_loss",
    "build_pools",
    "canonicalize_answer",
    "compare_report",
    "compute_signal",
    "count_flops",
    "ensemble_score",
    "export_distribution",
    "fit_standardizer",
    "forward",
    "generate",
    "grid_search",
    "init_params",
    "load_checkpoint",
    "load_ensemble",
    "load_jsonl",
    "pass_at_1",
    "save_checkpoint",
    "save_jsonl",
    "score_trajectories",
    "split_dataset",
    "standardize",
    "subsample_eval",
    "tail_window",
    "top_eta_filter",
    "train",
    "train_ensemble",
    "unweighted_majority",
    "vote",
    "weighted_majority",
]
