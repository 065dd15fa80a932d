"""Containers for stereo frames, sequences, and datasets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError


@dataclass
class StereoFrame:
    """One rectified stereo pair with optional dense ground truth.

    Images are (3, H, W) float arrays in [0, 1]. `gt_valid` marks pixels
    with usable ground truth; `visible` marks left pixels whose scene
    point is also visible in the right view (renderer diagnostic, used
    by occlusion-aware checks).
    """

    left: np.ndarray
    right: np.ndarray
    gt_disparity: np.ndarray | None = None
    gt_valid: np.ndarray | None = None
    visible: np.ndarray | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ContractError(
                f"left shape {self.left.shape} != right shape {self.right.shape}")
        if self.gt_disparity is not None and self.gt_valid is None:
            self.gt_valid = np.ones(self.gt_disparity.shape, dtype=bool)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.left.shape[-2], self.left.shape[-1]

    def has_gt(self) -> bool:
        return self.gt_disparity is not None


@dataclass
class Sequence:
    """Ordered stereo video frames from one domain."""

    id: str
    frames: list[StereoFrame]
    domain_tag: str = ""

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ContractError(f"sequence '{self.id}' needs at least 2 frames")
        res = self.frames[0].resolution
        if any(f.resolution != res for f in self.frames):
            raise ContractError(f"sequence '{self.id}' has varying resolution")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Dataset:
    sequences: list[Sequence] = field(default_factory=list)
    supervised: bool = False

    def __post_init__(self):
        if self.supervised:
            for seq in self.sequences:
                if not all(f.has_gt() for f in seq.frames):
                    raise ContractError(
                        f"supervised dataset but sequence '{seq.id}' lacks ground truth")

    def __len__(self) -> int:
        return len(self.sequences)

    def domain_tags(self) -> set[str]:
        return {s.domain_tag for s in self.sequences}
