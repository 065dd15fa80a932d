"""Photometric reprojection loss, supervised loss, and confidence weighting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigError, ContractError, ShapeError, Tensor, clip, mul, sub, tabs, tsum
from .data import StereoFrame
from .ops import box_filter, pow2, tmean, warp_horizontal

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossConfig:
    ssim_weight: float = 0.85
    ssim_window: int = 3

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ConfigError(f"ssim_weight must be in [0, 1], got {self.ssim_weight}")
        if self.ssim_window < 2 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be an odd value >= 3, got {self.ssim_window}")

    @property
    def l1_weight(self) -> float:
        return 1.0 - self.ssim_weight


@dataclass
class ErrorMap:
    """Per-pixel non-negative loss; invalid pixels carry value 0."""

    values: Tensor
    validity: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.validity.shape:
            raise ShapeError(
                f"error values {self.values.shape} vs validity {self.validity.shape}")


@dataclass
class ConfidenceMask:
    """Per-pixel weights in (0, 1); normalization divides by element count."""

    raw: Tensor

    @property
    def normalized(self) -> Tensor:
        return mul(self.raw, Tensor(1.0 / self.raw.size))


def dssim_map(a: Tensor, b: Tensor, window: int) -> Tensor:
    """Per-pixel structural dissimilarity (1 - SSIM)/2 in [0, 1], channel mean."""
    mu_a = box_filter(a, window)
    mu_b = box_filter(b, window)
    sig_a = sub(box_filter(pow2(a), window), pow2(mu_a))
    sig_b = sub(box_filter(pow2(b), window), pow2(mu_b))
    sig_ab = sub(box_filter(mul(a, b), window), mul(mu_a, mu_b))
    num = mul(mul(mu_a, mu_b) * 2.0 + Tensor(_SSIM_C1), sig_ab * 2.0 + Tensor(_SSIM_C2))
    den = mul(pow2(mu_a) + pow2(mu_b) + Tensor(_SSIM_C1), sig_a + sig_b + Tensor(_SSIM_C2))
    ssim = num / den
    return tmean(clip((Tensor(1.0) - ssim) * 0.5, 0.0, 1.0), axis=1, keepdims=True)


def reprojection_error_map(disparity: Tensor, frame: StereoFrame,
                           cfg: LossConfig | None = None) -> ErrorMap:
    """Left-right reprojection error of a disparity map.

    Warps the right image by the disparity and scores it against the
    left image with a weighted combination of structural dissimilarity
    and absolute photometric difference. Pixels whose warp sampled
    outside the image are zeroed and masked invalid.
    """
    cfg = cfg or LossConfig()
    h, w = frame.resolution
    if disparity.shape != (1, 1, h, w):
        raise ShapeError(
            f"disparity shape {disparity.shape} does not match frame resolution {(h, w)}")
    left = Tensor(frame.left[None])
    right = Tensor(frame.right[None])
    warped, valid = warp_horizontal(right, disparity)
    l1 = tmean(tabs(sub(left, warped)), axis=1, keepdims=True)
    if cfg.ssim_weight > 0.0:
        dm = dssim_map(left, warped, cfg.ssim_window)
        err = mul(dm, Tensor(cfg.ssim_weight)) + mul(l1, Tensor(cfg.l1_weight))
    else:
        err = l1
    err = mul(err, Tensor(valid.astype(np.float64)))
    return ErrorMap(err, valid)


def supervised_loss(disparity: Tensor, gt: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Mean absolute disparity error over valid ground-truth pixels."""
    if disparity.shape != gt.shape:
        raise ShapeError(f"disparity shape {disparity.shape} != ground truth shape {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ContractError("supervised loss requires at least one valid pixel")
    diff = tabs(sub(disparity, gt))
    masked = mul(diff, Tensor(valid.astype(np.float64)))
    return mul(tsum(masked), Tensor(1.0 / count))


def weighted_scalar_loss(eps: ErrorMap, mask: ConfidenceMask) -> Tensor:
    """Confidence-weighted mean: sum of W * eps divided by the element count."""
    if mask.raw.shape != eps.values.shape:
        raise ShapeError(f"mask shape {mask.raw.shape} != error shape {eps.values.shape}")
    return mul(tsum(mul(mask.raw, eps.values)), Tensor(1.0 / eps.values.size))


def unweighted_scalar_loss(eps: ErrorMap) -> Tensor:
    """Mean of the error map over its valid pixels."""
    count = int(eps.validity.sum())
    if count == 0:
        raise ContractError("error map has no valid pixels")
    return mul(tsum(eps.values), Tensor(1.0 / count))
