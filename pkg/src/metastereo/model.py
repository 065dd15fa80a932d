"""Micro disparity network and confidence network.

The disparity net keeps the structural ingredients of a correlation
stereo architecture at desk scale: a shared two-stage strided encoder
for both views, a horizontal correlation volume at quarter resolution
with a redirect branch, three aggregation convolutions, and a two-stage
transposed-convolution decoder back to full resolution with a softplus
disparity head.

The confidence network maps a per-pixel loss map (pooled to quarter
resolution) through three 3x3 convolutions with batch norm and a
sigmoid, then upsamples back, yielding per-pixel weights in (0, 1).

Every layer computes W * (gain * x) with the weight initialization
divided by the same gain: the initial function is unchanged, but each
weight gradient is amplified by the gain (per-step function change by
its square). This keeps single gradient steps at full-scale learning
rates meaningful for a micro network whose Jacobian is orders of
magnitude smaller than a full-size architecture's.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigError, ContractError, ShapeError, Tensor, sigmoid, softplus
from .data import StereoFrame
from .ops import (
    add_bias,
    avg_pool2,
    batch_norm,
    bilinear_upsample,
    concat,
    conv2d,
    conv_transpose2d,
    correlate1d,
    crop,
    mul,
)
from .autodiff import leaky_relu
from .optim import ParamSet

LEAKY_SLOPE = 0.1
CONFIDENCE_CHANNELS = 8


@dataclass(frozen=True)
class NetConfig:
    height: int = 64
    width: int = 128
    base_channels: int = 16
    max_disp: int = 16
    disparity_scale: float = 8.0
    layer_gain: float = 16.0
    confidence_gain: float = 64.0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ConfigError(
                f"height/width must be divisible by 4, got {self.height}x{self.width}")
        if self.max_disp < 4:
            raise ConfigError(f"max_disp must be >= 4, got {self.max_disp}")
        if self.disparity_scale <= 0:
            raise ConfigError(f"disparity_scale must be positive, got {self.disparity_scale}")
        if self.layer_gain <= 0 or self.confidence_gain <= 0:
            raise ConfigError("layer_gain and confidence_gain must be positive")

    @property
    def corr_disp(self) -> int:
        """Correlation search range at quarter resolution."""
        return max(1, self.max_disp // 4)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "base_channels": self.base_channels,
            "max_disp": self.max_disp,
            "disparity_scale": self.disparity_scale,
            "layer_gain": self.layer_gain,
            "confidence_gain": self.confidence_gain,
        }


class DisparityParams(ParamSet):
    """Parameters of the disparity network."""

    def __init__(self, cfg: NetConfig, tensors: dict[str, Tensor]):
        super().__init__(tensors)
        self.cfg = cfg

    def _with_tensors(self, tensors):
        return DisparityParams(self.cfg, tensors)


class ConfidenceParams(ParamSet):
    """Parameters of the confidence network plus batch-norm buffers."""

    def __init__(self, cfg: NetConfig, tensors: dict[str, Tensor],
                 bn_stats: dict[str, np.ndarray] | None = None):
        super().__init__(tensors)
        self.cfg = cfg
        if bn_stats is None:
            bn_stats = {
                "bn1_mean": np.zeros(CONFIDENCE_CHANNELS),
                "bn1_var": np.ones(CONFIDENCE_CHANNELS),
                "bn2_mean": np.zeros(CONFIDENCE_CHANNELS),
                "bn2_var": np.ones(CONFIDENCE_CHANNELS),
            }
        self.bn_stats = bn_stats

    def _with_tensors(self, tensors):
        return ConfidenceParams(self.cfg, tensors,
                                {k: v.copy() for k, v in self.bn_stats.items()})


def _conv_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               gain: float) -> Tensor:
    w = rng.standard_normal(shape) * (np.sqrt(2.0 / fan_in) / gain)
    return Tensor(w, requires_grad=True)


def _zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_disparity_net(cfg: NetConfig, seed: int) -> DisparityParams:
    """Fan-in scaled random initialization, deterministic given the seed."""
    rng = np.random.default_rng(seed)
    c = cfg.base_channels
    cr = max(2, c // 2)
    cd = max(2, c // 2)
    corr_ch = cfg.corr_disp + 1
    g = cfg.layer_gain
    t = {}

    def conv(name, cout, cin, k):
        t[name + "_w"] = _conv_init(rng, (cout, cin, k, k), cin * k * k, g)
        t[name + "_b"] = _zeros_param((cout,))

    def deconv(name, cin, cout, k):
        t[name + "_w"] = _conv_init(rng, (cin, cout, k, k), cin * k * k, g)
        t[name + "_b"] = _zeros_param((cout,))

    conv("enc1", c, 3, 3)
    conv("enc2", 2 * c, c, 3)
    conv("redir", cr, 2 * c, 1)
    conv("post1", 2 * c, corr_ch + cr, 3)
    conv("post2", 2 * c, 2 * c, 3)
    conv("post3", c, 2 * c, 3)
    deconv("dec1", c, cd, 2)
    deconv("dec2", cd, cd, 2)
    conv("head", 1, cd, 1)
    return DisparityParams(cfg, t)


CONFIDENCE_INIT_LOGIT = 2.2   # initial confidence ~ 0.9: trust the loss until taught otherwise


def init_confidence_net(cfg: NetConfig, seed: int) -> ConfidenceParams:
    rng = np.random.default_rng(seed)
    ch = CONFIDENCE_CHANNELS
    g = cfg.confidence_gain
    t = {}
    t["c1_w"] = _conv_init(rng, (ch, 1, 3, 3), 9, g)
    t["c1_b"] = _zeros_param((ch,))
    t["c2_w"] = _conv_init(rng, (ch, ch, 3, 3), ch * 9, g)
    t["c2_b"] = _zeros_param((ch,))
    t["c3_w"] = _conv_init(rng, (1, ch, 3, 3), ch * 9, g)
    t["c3_b"] = Tensor(np.full((1,), CONFIDENCE_INIT_LOGIT / g), requires_grad=True)
    t["bn1_gamma"] = Tensor(np.ones(ch), requires_grad=True)
    t["bn1_beta"] = _zeros_param((ch,))
    t["bn2_gamma"] = Tensor(np.ones(ch), requires_grad=True)
    t["bn2_beta"] = _zeros_param((ch,))
    return ConfidenceParams(cfg, t)


def _lconv(x, params, name, gain, stride=1, padding=0):
    y = conv2d(mul(x, Tensor(gain)), params[name + "_w"], stride=stride, padding=padding)
    return leaky_relu(add_bias(y, mul(params[name + "_b"], Tensor(gain))), LEAKY_SLOPE)


def forward_disparity(params: DisparityParams, frame: StereoFrame) -> Tensor:
    """Predict a non-negative (1, 1, H, W) disparity map for one frame."""
    cfg = params.cfg
    if frame.resolution != (cfg.height, cfg.width):
        raise ShapeError(
            f"frame resolution {frame.resolution} does not match "
            f"configured {(cfg.height, cfg.width)}")
    g = cfg.layer_gain
    pair = Tensor(np.stack([frame.left, frame.right]))
    e1 = _lconv(pair, params, "enc1", g, stride=2, padding=1)
    e2 = _lconv(e1, params, "enc2", g, stride=2, padding=1)
    lf = crop(e2, ((0, 1), (0, 0), (0, 0), (0, 0)))
    rf = crop(e2, ((1, 0), (0, 0), (0, 0), (0, 0)))
    corr = correlate1d(lf, rf, cfg.corr_disp)
    redir = _lconv(lf, params, "redir", g)
    m = concat([corr, redir], axis=1)
    m = _lconv(m, params, "post1", g, padding=1)
    m = _lconv(m, params, "post2", g, padding=1)
    m = _lconv(m, params, "post3", g, padding=1)
    d = conv_transpose2d(mul(m, Tensor(g)), params["dec1_w"], stride=2, padding=0)
    d = leaky_relu(add_bias(d, mul(params["dec1_b"], Tensor(g))), LEAKY_SLOPE)
    d = conv_transpose2d(mul(d, Tensor(g)), params["dec2_w"], stride=2, padding=0)
    d = leaky_relu(add_bias(d, mul(params["dec2_b"], Tensor(g))), LEAKY_SLOPE)
    raw = add_bias(conv2d(mul(d, Tensor(g)), params["head_w"]), mul(params["head_b"], Tensor(g)))
    return mul(softplus(raw), Tensor(cfg.disparity_scale))


def forward_confidence(params: ConfidenceParams, error_map: Tensor,
                       training: bool = False) -> Tensor:
    """Per-pixel confidence in (0, 1) for a full-resolution error map.

    The map is pooled twice to quarter resolution, run through the
    three-layer CNN, and bilinearly upsampled back. With
    ``training=False`` the batch-norm running statistics are frozen.
    """
    if np.any(error_map.data < 0):
        raise ContractError("confidence input error map must be non-negative")
    if error_map.ndim != 4 or error_map.shape[1] != 1:
        raise ShapeError(f"error map must be (N, 1, H, W), got {error_map.shape}")
    g = params.cfg.confidence_gain
    gt = Tensor(g)
    q = avg_pool2(avg_pool2(error_map))
    h = add_bias(conv2d(mul(q, gt), params["c1_w"], padding=1), mul(params["c1_b"], gt))
    h = batch_norm(h, params["bn1_gamma"], params["bn1_beta"],
                   params.bn_stats["bn1_mean"], params.bn_stats["bn1_var"], training)
    h = leaky_relu(h, LEAKY_SLOPE)
    h = add_bias(conv2d(mul(h, gt), params["c2_w"], padding=1), mul(params["c2_b"], gt))
    h = batch_norm(h, params["bn2_gamma"], params["bn2_beta"],
                   params.bn_stats["bn2_mean"], params.bn_stats["bn2_var"], training)
    h = leaky_relu(h, LEAKY_SLOPE)
    h = add_bias(conv2d(mul(h, gt), params["c3_w"], padding=1), mul(params["c3_b"], gt))
    return bilinear_upsample(sigmoid(h), 4)
