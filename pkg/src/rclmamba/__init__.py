"""Selective state-space forecasting with contrastive pretraining.

The package provides a from-scratch selective-scan block on a small
reverse-mode tape, repeat-and-noise contrastive pretraining for it,
parameter transfer into a stacked forecaster with freeze control, and
instrumentation that scores how decisively the scan gates memory.
"""

from .autodiff import Graph, GraphError, Tensor, gradient
from .block import (
    BlockTrace,
    MambaConfig,
    MambaParams,
    PARAM_FIELDS,
    ScanTrace,
    block_apply,
    block_forward,
    discretize,
    draw_params,
    init_params,
    selective_scan,
)
from .data import (
    ConfigError,
    DataError,
    DatasetSplit,
    RunConfig,
    WindowSet,
    load_config,
    load_csv,
    load_params,
    make_windows,
    parse_config,
    save_params,
    split_series,
    synth_corpus,
)
from .forecaster import (
    FREEZE_A,
    FREEZE_NONE,
    ForecasterConfig,
    TrainResult,
    TransferPlan,
    build_forecaster,
    collect_scores,
    evaluate,
    forward,
    predict,
    train_forecaster,
    transfer_params,
)
from .optim import Adam
from .pretrain import (
    AugmentedBatch,
    NoiseLadder,
    PretrainConfig,
    PretrainDiverged,
    PretrainResult,
    cosine_sim,
    inter_loss,
    intra_loss,
    pretrain,
    rcl_loss,
    repeat_augment,
)
from .selectivity import (
    SelectivityReport,
    classify_scores,
    focus_ratio,
    memory_entropy,
    memory_scores,
    pearson,
    similarity_heatmap,
)
from .verify import (
    brute_scan,
    build_rcl_graph,
    check_gate_stationarity,
    check_zoh_bounds,
    closed_form_cases,
    finite_diff_check,
    gate_gradient,
    gate_objective,
    optimal_gates,
    run_suite,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AugmentedBatch",
    "BlockTrace",
    "ConfigError",
    "DataError",
    "DatasetSplit",
    "ForecasterConfig",
    "FREEZE_A",
    "FREEZE_NONE",
    "Graph",
    "GraphError",
    "MambaConfig",
    "MambaParams",
    "NoiseLadder",
    "PARAM_FIELDS",
    "PretrainConfig",
    "PretrainDiverged",
    "PretrainResult",
    "RunConfig",
    "ScanTrace",
    "SelectivityReport",
    "Tensor",
    "TrainResult",
    "TransferPlan",
    "WindowSet",
    "block_apply",
    "block_forward",
    "brute_scan",
    "build_forecaster",
    "build_rcl_graph",
    "check_gate_stationarity",
    "check_zoh_bounds",
    "classify_scores",
    "closed_form_cases",
    "collect_scores",
    "cosine_sim",
    "discretize",
    "draw_params",
    "evaluate",
    "finite_diff_check",
    "focus_ratio",
    "forward",
    "gate_gradient",
    "gate_objective",
    "gradient",
    "init_params",
    "inter_loss",
    "intra_loss",
    "load_config",
    "load_csv",
    "load_params",
    "make_windows",
    "memory_entropy",
    "memory_scores",
    "optimal_gates",
    "parse_config",
    "pearson",
    "predict",
    "pretrain",
    "rcl_loss",
    "repeat_augment",
    "run_suite",
    "save_params",
    "selective_scan",
    "similarity_heatmap",
    "split_series",
    "synth_corpus",
    "train_forecaster",
    "transfer_params",
]
