"""Meta-learned online adaptation for micro stereo disparity networks."""

from .autodiff import (
    ConfigError,
    ContractError,
    NumericFault,
    ShapeError,
    Tape,
    Tensor,
    grad,
    no_grad,
)
from .adapt import AdaptConfig, AdaptState, adapt_step, run_sequence
from .data import Dataset, Sequence, StereoFrame
from .losses import (
    ConfidenceMask,
    ErrorMap,
    LossConfig,
    reprojection_error_map,
    supervised_loss,
    unweighted_scalar_loss,
    weighted_scalar_loss,
)
from .meta import MetaBatchSample, MetaConfig, meta_iteration, train_meta, train_supervised
from .metrics import AggregateReport, MetricsRecord, aggregate, compare_runs, frame_metrics
from .model import (
    ConfidenceParams,
    DisparityParams,
    NetConfig,
    forward_confidence,
    forward_disparity,
    init_confidence_net,
    init_disparity_net,
)
from .optim import OptimizerState, ParamSet, sgd_step
from .synthdata import DomainSpec, SceneSpec, Surface, generate_dataset, render_frame

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptState", "AggregateReport", "ConfidenceMask", "ConfidenceParams",
    "ConfigError", "ContractError", "Dataset", "DisparityParams", "DomainSpec", "ErrorMap",
    "LossConfig", "MetaBatchSample", "MetaConfig", "MetricsRecord", "NetConfig",
    "NumericFault", "OptimizerState", "ParamSet", "SceneSpec", "Sequence", "ShapeError",
    "StereoFrame", "Surface", "Tape", "Tensor", "adapt_step", "aggregate", "compare_runs",
    "forward_confidence", "forward_disparity", "frame_metrics", "generate_dataset", "grad",
    "init_confidence_net", "init_disparity_net", "meta_iteration", "no_grad",
    "render_frame", "reprojection_error_map", "run_sequence", "sgd_step", "supervised_loss",
    "train_meta", "train_supervised", "unweighted_scalar_loss", "weighted_scalar_loss",
]
