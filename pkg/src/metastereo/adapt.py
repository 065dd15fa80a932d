"""Online adaptation: one measure-then-adapt cycle per frame.

Each frame is scored with the pre-adaptation parameters, then a single
gradient step on the (optionally confidence-weighted) adaptation loss
updates them. Momentum state persists across frames within a sequence
and every sequence starts fresh from the base parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import ConfigError, ContractError, NumericFault, Tape, Tensor, grad, no_grad
from .data import Sequence, StereoFrame
from .losses import (
    ConfidenceMask,
    ErrorMap,
    LossConfig,
    reprojection_error_map,
    supervised_loss,
    unweighted_scalar_loss,
    weighted_scalar_loss,
)
from .metrics import MetricsRecord, frame_metrics
from .model import ConfidenceParams, DisparityParams, forward_confidence, forward_disparity
from .optim import OptimizerState, sgd_step

ADAPT_UNSUPERVISED = "unsupervised"
ADAPT_SUPERVISED = "supervised"


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 1e-4
    momentum: float = 0.9
    weighted: bool = False
    adapt_loss: str = ADAPT_UNSUPERVISED
    loss: LossConfig = field(default_factory=LossConfig)
    detach_mask: bool = True       # block the adaptation gradient through W
    bn_training: bool = False      # confidence batch-norm statistics at test time

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.adapt_loss not in (ADAPT_UNSUPERVISED, ADAPT_SUPERVISED):
            raise ConfigError(f"unknown adapt_loss '{self.adapt_loss}'")


@dataclass
class AdaptState:
    params: DisparityParams
    optimizer: OptimizerState
    frame_index: int = 0


def make_state(base: DisparityParams, cfg: AdaptConfig) -> AdaptState:
    """Fresh adaptation state starting from a clone of the base parameters."""
    return AdaptState(
        params=base.clone(requires_grad=True),
        optimizer=OptimizerState(learning_rate=cfg.alpha, momentum=cfg.momentum),
        frame_index=0,
    )


def _confidence_mask(confidence, error_values: Tensor, bn_training: bool) -> ConfidenceMask:
    if isinstance(confidence, ConfidenceParams):
        return ConfidenceMask(forward_confidence(confidence, error_values, training=bn_training))
    if callable(confidence):
        return ConfidenceMask(confidence(error_values))
    raise ContractError("weighted adaptation requires confidence parameters")


def adaptation_objective(
    params: DisparityParams,
    frame: StereoFrame,
    cfg: AdaptConfig,
    confidence: ConfidenceParams | Callable | None = None,
) -> tuple[Tensor, ErrorMap | None, ConfidenceMask | None]:
    """Scalar adaptation loss for one frame, plus the intermediate maps."""
    disp = forward_disparity(params, frame)
    if cfg.adapt_loss == ADAPT_SUPERVISED:
        if not frame.has_gt():
            raise ContractError("supervised adaptation requires ground-truth disparity")
        gt = Tensor(frame.gt_disparity[None])
        loss = supervised_loss(disp, gt, frame.gt_valid[None])
        return loss, None, None
    eps = reprojection_error_map(disp, frame, cfg.loss)
    if cfg.weighted:
        mask_input = eps.values.detach() if cfg.detach_mask else eps.values
        mask = _confidence_mask(confidence, mask_input, cfg.bn_training)
        return weighted_scalar_loss(eps, mask), eps, mask
    return unweighted_scalar_loss(eps), eps, None


def adapt_step(
    state: AdaptState,
    frame: StereoFrame,
    cfg: AdaptConfig,
    confidence: ConfidenceParams | Callable | None = None,
) -> AdaptState:
    """One gradient step on the adaptation loss; exactly one per frame."""
    if cfg.weighted and confidence is None:
        raise ContractError("weighted adaptation requires confidence parameters")
    params = state.params
    with Tape():
        loss, _, _ = adaptation_objective(params, frame, cfg, confidence)
        if not np.isfinite(loss.data):
            raise NumericFault(f"non-finite adaptation loss at frame {state.frame_index}")
        grads = grad(loss, params.tensors())
    with no_grad():
        new_params = sgd_step(params, grads, state.optimizer)
    return AdaptState(params=new_params, optimizer=state.optimizer,
                      frame_index=state.frame_index + 1)


def run_sequence(
    base: DisparityParams,
    confidence: ConfidenceParams | None,
    seq: Sequence,
    cfg: AdaptConfig,
    on_frame: Callable | None = None,
) -> list[MetricsRecord]:
    """Evaluate then adapt on every frame of a sequence.

    Metrics always come from the pre-adaptation parameters of each
    frame. With alpha = 0 the gradient step is skipped entirely (frozen
    evaluation); the metrics are identical either way. `on_frame`, if
    given, receives (t, disparity, error_map, mask) computed from the
    pre-adaptation parameters.
    """
    if not all(f.has_gt() for f in seq.frames):
        raise ContractError(f"sequence '{seq.id}' lacks ground truth for evaluation")
    state = make_state(base, cfg)
    records = []
    for t, frame in enumerate(seq.frames):
        with no_grad():
            disp = forward_disparity(state.params, frame)
            rec = frame_metrics(disp, frame.gt_disparity[None], frame.gt_valid[None],
                                sequence_id=seq.id, frame_index=t)
            records.append(rec)
            if on_frame is not None:
                eps = mask = None
                if cfg.adapt_loss == ADAPT_UNSUPERVISED:
                    eps = reprojection_error_map(disp, frame, cfg.loss)
                    if cfg.weighted and confidence is not None:
                        mask = _confidence_mask(confidence, eps.values, cfg.bn_training)
                on_frame(t, disp, eps, mask)
        if cfg.alpha > 0:
            try:
                state = adapt_step(state, frame, cfg, confidence)
            except NumericFault as e:
                raise NumericFault(f"sequence '{seq.id}' frame {t}: {e}") from e
        else:
            state = replace(state, frame_index=state.frame_index + 1)
    return records
