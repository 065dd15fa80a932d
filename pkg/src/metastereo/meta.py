"""Meta-training: learn base parameters that adapt well.

One meta-iteration clones the base parameters for each sampled
sequence, performs k recorded adaptation steps on consecutive frames
with the (optionally confidence-weighted) adaptation loss, scores each
adapted model on the following frame with the supervised loss, and
finally updates the base parameters with the gradient of the summed
scores, differentiating through the inner updates unless first-order
mode is selected.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapt import ADAPT_SUPERVISED, ADAPT_UNSUPERVISED, AdaptConfig, adaptation_objective
from .autodiff import ConfigError, ContractError, NumericFault, Tape, Tensor, grad, mul, no_grad
from .data import Dataset, StereoFrame
from .losses import LossConfig, supervised_loss
from .model import ConfidenceParams, DisparityParams, forward_disparity
from .optim import OptimizerState, ParamSet, sgd_step


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-5          # inner (adaptation) learning rate
    beta: float = 1e-4           # outer learning rate
    k: int = 3                   # adaptation steps per sampled sequence
    b: int = 4                   # sequences per meta-batch
    weighted: bool = False
    first_order: bool = False
    iterations: int = 100
    outer_momentum: float = 0.0
    adapt_loss: str = ADAPT_UNSUPERVISED
    loss: LossConfig = field(default_factory=LossConfig)
    detach_mask: bool = True

    def __post_init__(self):
        if self.k < 1 or self.b < 1:
            raise ConfigError(f"k and b must be >= 1, got k={self.k}, b={self.b}")
        if self.alpha <= 0 or self.beta < 0:
            raise ConfigError(f"alpha must be > 0 and beta >= 0, got {self.alpha}, {self.beta}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")

    def inner_adapt_config(self) -> AdaptConfig:
        """Inner-loop settings: plain SGD, batch-norm in training mode."""
        return AdaptConfig(alpha=self.alpha, momentum=0.0, weighted=self.weighted,
                           adapt_loss=self.adapt_loss, loss=self.loss,
                           detach_mask=self.detach_mask, bn_training=True)


@dataclass
class MetaBatchSample:
    sequence_id: str
    start: int
    frames: list[StereoFrame]    # k + 1 consecutive frames


@dataclass(frozen=True)
class TrainLogEntry:
    iteration: int
    meta_loss: float
    wall_time: float


@dataclass
class OuterState:
    """Outer optimizer state with separate buffers for theta and eta."""

    theta: OptimizerState
    eta: OptimizerState

    @classmethod
    def for_config(cls, cfg: "MetaConfig") -> "OuterState":
        return cls(
            theta=OptimizerState(learning_rate=cfg.beta, momentum=cfg.outer_momentum),
            eta=OptimizerState(learning_rate=cfg.beta, momentum=cfg.outer_momentum),
        )


def _default_eval_loss(params: ParamSet, frame: StereoFrame) -> Tensor:
    if not frame.has_gt():
        raise ContractError("meta evaluation requires ground-truth disparity")
    disp = forward_disparity(params, frame)
    return supervised_loss(disp, Tensor(frame.gt_disparity[None]), frame.gt_valid[None])


def meta_iteration(
    theta: ParamSet,
    eta: ConfidenceParams | None,
    batch: list[MetaBatchSample],
    cfg: MetaConfig,
    outer_state: OuterState | None = None,
    inner_loss_fn: Callable | None = None,
    eval_loss_fn: Callable | None = None,
) -> tuple[ParamSet, ConfidenceParams | None, float]:
    """One outer optimization step over a batch of sequence samples.

    Returns the updated base parameter sets and the meta-loss value.
    `outer_state` carries outer momentum between iterations; omitted, a
    plain SGD step with rate beta is taken. The loss hooks exist so the
    unroll can be exercised on analytic toy objectives.
    """
    if cfg.weighted and eta is None:
        raise ContractError("weighted meta-training requires confidence parameters")
    inner_cfg = cfg.inner_adapt_config()
    if inner_loss_fn is None:
        def inner_loss_fn(params, eta_, frame):
            loss, _, _ = adaptation_objective(params, frame, inner_cfg, eta_)
            return loss
    if eval_loss_fn is None:
        eval_loss_fn = _default_eval_loss
    alpha = Tensor(cfg.alpha)
    total = None
    with Tape():
        for sample in batch:
            if len(sample.frames) != cfg.k + 1:
                raise ContractError(
                    f"sequence '{sample.sequence_id}': expected {cfg.k + 1} frames, "
                    f"got {len(sample.frames)}")
            cur = theta
            for t in range(cfg.k):
                loss_u = inner_loss_fn(cur, eta, sample.frames[t])
                if not np.isfinite(loss_u.data):
                    raise NumericFault(
                        f"inner pass, sequence '{sample.sequence_id}', step {t}: "
                        "non-finite adaptation loss")
                gs = grad(loss_u, cur.tensors(), create_graph=not cfg.first_order)
                updated = {name: p - mul(alpha, g)
                           for (name, p), g in zip(cur.items(), gs)}
                cur = cur.replace(updated)
                loss_s = eval_loss_fn(cur, sample.frames[t + 1])
                if not np.isfinite(loss_s.data):
                    raise NumericFault(
                        f"inner pass, sequence '{sample.sequence_id}', step {t}: "
                        "non-finite evaluation loss")
                total = loss_s if total is None else total + loss_s
        meta_loss = float(total.data)
        targets = theta.tensors()
        names = theta.names()
        if cfg.weighted and eta is not None:
            targets = targets + eta.tensors()
            names = names + eta.names()
        outer_grads = grad(total, targets)
    for name, g in zip(names, outer_grads):
        if not np.all(np.isfinite(g.data)):
            raise NumericFault(f"outer pass: non-finite gradient for '{name}'")
    if outer_state is None:
        outer_state = OuterState.for_config(cfg)
    with no_grad():
        n_theta = len(theta)
        new_theta = sgd_step(theta, outer_grads[:n_theta], outer_state.theta)
        new_eta = eta
        if cfg.weighted and eta is not None:
            new_eta = sgd_step(eta, outer_grads[n_theta:], outer_state.eta)
    return new_theta, new_eta, meta_loss


def _check_sequences(dataset: Dataset, needed: int) -> None:
    if not dataset.sequences:
        raise ConfigError("dataset has no sequences")
    for seq in dataset.sequences:
        if len(seq) < needed:
            raise ConfigError(
                f"sequence '{seq.id}' has {len(seq)} frames; {needed} required")


def sample_batch(dataset: Dataset, cfg: MetaConfig, rng: np.random.Generator) -> list[MetaBatchSample]:
    batch = []
    for _ in range(cfg.b):
        si = int(rng.integers(len(dataset.sequences)))
        seq = dataset.sequences[si]
        start = int(rng.integers(len(seq) - cfg.k))
        batch.append(MetaBatchSample(seq.id, start, seq.frames[start:start + cfg.k + 1]))
    return batch


def train_meta(
    dataset: Dataset,
    theta0: DisparityParams,
    eta0: ConfidenceParams | None,
    cfg: MetaConfig,
    seed: int,
    log_cb: Callable[[TrainLogEntry], None] | None = None,
) -> tuple[DisparityParams, ConfidenceParams | None, list[TrainLogEntry]]:
    """Run cfg.iterations meta-iterations with uniform sequence sampling."""
    if not dataset.supervised:
        raise ConfigError("meta-training requires a supervised dataset")
    _check_sequences(dataset, cfg.k + 1)
    rng = np.random.default_rng(seed)
    theta, eta = theta0, eta0
    outer_state = OuterState.for_config(cfg)
    log: list[TrainLogEntry] = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sample_batch(dataset, cfg, rng)
        theta, eta, meta_loss = meta_iteration(theta, eta, batch, cfg, outer_state)
        entry = TrainLogEntry(it, meta_loss, time.perf_counter() - t0)
        log.append(entry)
        if log_cb is not None:
            log_cb(entry)
    return theta, eta, log


def train_supervised(
    dataset: Dataset,
    theta0: DisparityParams,
    cfg: MetaConfig,
    seed: int,
    log_cb: Callable[[TrainLogEntry], None] | None = None,
) -> tuple[DisparityParams, list[TrainLogEntry]]:
    """Plain supervised training of the disparity net on random frames.

    Uses the outer learning rate and momentum from `cfg`; one gradient
    step per sampled frame batch of size b.
    """
    if not dataset.supervised:
        raise ConfigError("supervised training requires a supervised dataset")
    _check_sequences(dataset, 2)
    rng = np.random.default_rng(seed)
    theta = theta0
    state = OptimizerState(learning_rate=cfg.beta, momentum=cfg.outer_momentum)
    log: list[TrainLogEntry] = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        total = None
        with Tape():
            for _ in range(cfg.b):
                si = int(rng.integers(len(dataset.sequences)))
                seq = dataset.sequences[si]
                fi = int(rng.integers(len(seq)))
                loss = _default_eval_loss(theta, seq.frames[fi])
                total = loss if total is None else total + loss
            if not np.isfinite(total.data):
                raise NumericFault(f"iteration {it}: non-finite supervised loss")
            grads = grad(total, theta.tensors())
        with no_grad():
            theta = sgd_step(theta, grads, state)
        entry = TrainLogEntry(it, float(total.data), time.perf_counter() - t0)
        log.append(entry)
        if log_cb is not None:
            log_cb(entry)
    return theta, log
