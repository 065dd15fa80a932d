"""Procedural rectified stereo sequences with dense ground truth.

Scenes are stacks of textured fronto-parallel rectangles at fixed
depths drifting slowly across the view; pinhole geometry gives each
surface the disparity d = focal * baseline / depth. The right view
renders the same surfaces shifted left by their disparity, so
overlapping rectangles produce genuine occlusions. Domain knobs
(brightness, contrast, noise, texture family) create controllable
appearance shifts between datasets.

Rendered images are quantized to 8-bit levels and disparities to
1/256 px so that the on-disk dataset format round-trips exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .data import Dataset, Sequence, StereoFrame


@dataclass(frozen=True)
class Surface:
    x0: float            # left-image position of the left edge at t = 0
    y0: float
    width: float         # extent in pixels
    height: float
    depth: float         # scene units; must be positive
    vx: float = 0.0      # drift in px/frame
    vy: float = 0.0

    def __post_init__(self):
        if self.depth <= 0:
            raise ContractError(f"surface depth must be positive, got {self.depth}")


@dataclass(frozen=True)
class SceneSpec:
    focal: float = 200.0
    baseline: float = 0.5
    height: int = 64
    width: int = 128
    surfaces: tuple[Surface, ...] = ()
    background_depth: float = 100.0

    def disparity_of(self, depth: float) -> float:
        return self.focal * self.baseline / depth


@dataclass(frozen=True)
class DomainSpec:
    tag: str = "neutral"
    brightness: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    texture_family: int = 1
    glare_count: int = 0       # per-view specular blobs, photometrically inconsistent
    glare_strength: float = 0.0


def _smooth(img: np.ndarray, radius: int, passes: int) -> np.ndarray:
    """Separable box blur along the two leading axes."""
    if radius <= 0:
        return img
    k = 2 * radius + 1
    for _ in range(passes):
        for axis in (0, 1):
            pad = [(0, 0)] * img.ndim
            pad[axis] = (radius, radius)
            p = np.pad(img, pad, mode="wrap")
            csum = np.cumsum(p, axis=axis)
            lead = [slice(None)] * img.ndim
            lag = [slice(None)] * img.ndim
            lead[axis] = slice(k, None)
            lag[axis] = slice(None, -k)
            first = [slice(None)] * img.ndim
            first[axis] = slice(k - 1, k)
            img = np.concatenate([csum[tuple(first)],
                                  csum[tuple(lead)] - csum[tuple(lag)]], axis=axis) / k
    return img


# (coarse radius, fine radius, fine fraction, channel gains): textures mix a
# coarse band (wide photometric attraction basin) with a fine band (steep
# local gradient), with the balance differing per family
_FAMILY_PARAMS = {
    0: (2, 1, 0.35, (1.0, 0.9, 0.8)),    # warm, mid grain
    1: (3, 1, 0.35, (1.0, 1.0, 1.0)),    # neutral
    2: (5, 1, 0.40, (0.8, 0.9, 1.0)),    # cool, coarse grain
}


def _make_texture(rng: np.random.Generator, h: int, w: int, family: int) -> np.ndarray:
    """Band-limited random RGB texture in [0.1, 0.9], shape (3, h, w)."""
    coarse_r, fine_r, fine_frac, gains = _FAMILY_PARAMS[family % len(_FAMILY_PARAMS)]
    coarse = _smooth(rng.random((h, w, 3)), coarse_r, 2)
    fine = _smooth(rng.random((h, w, 3)), fine_r, 1)

    def norm(b):
        lo, hi = b.min(), b.max()
        return (b - lo) / max(hi - lo, 1e-9)

    base = 0.1 + 0.8 * ((1.0 - fine_frac) * norm(coarse) + fine_frac * norm(fine))
    base = base * np.asarray(gains)
    return np.clip(base, 0.0, 1.0).transpose(2, 0, 1)


def _sample_texture(tex: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Bilinear sample of a (3, h, w) texture at fractional (v, u) grids."""
    _, th, tw = tex.shape
    v = np.clip(v, 0.0, th - 1.0)
    u = np.clip(u, 0.0, tw - 1.0)
    v0 = np.minimum(np.floor(v).astype(np.int64), th - 2) if th > 1 else np.zeros_like(v, np.int64)
    u0 = np.minimum(np.floor(u).astype(np.int64), tw - 2) if tw > 1 else np.zeros_like(u, np.int64)
    fv = v - v0
    fu = u - u0
    out = (tex[:, v0, u0] * (1 - fv) * (1 - fu)
           + tex[:, v0, u0 + 1] * (1 - fv) * fu
           + tex[:, v0 + 1, u0] * fv * (1 - fu)
           + tex[:, v0 + 1, u0 + 1] * fv * fu)
    return out


def _surface_textures(scene: SceneSpec, seed: int, family: int) -> list[np.ndarray]:
    textures = []
    for i, s in enumerate([_background(scene)] + list(scene.surfaces)):
        rng = np.random.default_rng([seed, i, 1315423911])
        th = int(np.ceil(s.height)) + 2
        tw = int(np.ceil(s.width)) + 2
        textures.append(_make_texture(rng, th, tw, family))
    return textures


def _background(scene: SceneSpec) -> Surface:
    margin = 4.0
    return Surface(x0=-margin, y0=-margin,
                   width=scene.width + 2 * margin, height=scene.height + 2 * margin,
                   depth=scene.background_depth)


def render_frame(scene: SceneSpec, domain: DomainSpec, t: int, seed: int) -> StereoFrame:
    """Render one stereo pair with dense ground truth, deterministically."""
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    left = np.zeros((3, h, w))
    right = np.zeros((3, h, w))
    zl = np.full((h, w), np.inf)
    zr = np.full((h, w), np.inf)
    gt = np.zeros((h, w))
    surf_of_left = np.full((h, w), -1, dtype=np.int64)
    textures = _surface_textures(scene, seed, domain.texture_family)
    surfaces = [_background(scene)] + list(scene.surfaces)
    for i, s in enumerate(surfaces):
        d = scene.disparity_of(s.depth)
        sx = s.x0 + s.vx * t
        sy = s.y0 + s.vy * t
        v = ys - sy
        for view, u_img in (("left", xs - sx), ("right", xs + d - sx)):
            inside = (u_img >= 0) & (u_img <= s.width - 1) & (v >= 0) & (v <= s.height - 1)
            zbuf = zl if view == "left" else zr
            img = left if view == "left" else right
            win = inside & (s.depth < zbuf)
            if not win.any():
                continue
            colors = _sample_texture(textures[i], v[win], u_img[win])
            img[:, win] = colors
            zbuf[win] = s.depth
            if view == "left":
                gt[win] = d
                surf_of_left[win] = i
    # left pixels whose scene point is also visible (not occluded) in the right view
    xr = xs - gt
    in_r = (xr >= 0) & (xr <= w - 1)
    xf = np.clip(np.floor(xr), 0, w - 1).astype(np.int64)
    xc = np.clip(np.ceil(xr), 0, w - 1).astype(np.int64)
    depth_lookup = np.asarray([np.inf] + [s.depth for s in surfaces])
    depth_here = depth_lookup[surf_of_left + 1]
    rows = ys.astype(np.int64)
    visible = in_r & (zr[rows, xf] >= depth_here - 1e-9) & (zr[rows, xc] >= depth_here - 1e-9)
    for view_idx, img in enumerate((left, right)):
        if domain.glare_count > 0 and domain.glare_strength > 0:
            # view-local specular blobs: bright spots present in one view
            # only, so their reprojection error is high no matter how good
            # the disparity is
            rng = np.random.default_rng([seed, t, view_idx, 777])
            for _ in range(domain.glare_count):
                cy = rng.uniform(0, h - 1)
                cx = rng.uniform(0, w - 1)
                ry = rng.uniform(3.0, 7.0)
                rx = rng.uniform(5.0, 12.0)
                blob = np.exp(-(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2))
                img += domain.glare_strength * blob[None]
        img[:] = (img - 0.5) * domain.contrast + 0.5
        img *= domain.brightness
        if domain.noise_sigma > 0:
            rng = np.random.default_rng([seed, t, view_idx, 2654435761])
            img += rng.normal(0.0, domain.noise_sigma, img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        np.round(img * 255.0, out=img)
        img /= 255.0
    gt = np.round(gt * 256.0) / 256.0
    return StereoFrame(left=left, right=right, gt_disparity=gt[None],
                       gt_valid=np.ones((1, h, w), dtype=bool),
                       visible=visible[None])


def generate_dataset(
    specs: list[tuple[SceneSpec, DomainSpec]],
    frames_per_sequence: int,
    seed: int,
    gt_retention: float = 1.0,
) -> Dataset:
    """One sequence per (scene, domain) spec; deterministic given the seed."""
    if not specs:
        raise ContractError("generate_dataset requires at least one (scene, domain) spec")
    if frames_per_sequence < 2:
        raise ContractError(f"frames_per_sequence must be >= 2, got {frames_per_sequence}")
    sequences = []
    for i, (scene, domain) in enumerate(specs):
        seq_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        frames = [render_frame(scene, domain, t, seq_seed)
                  for t in range(frames_per_sequence)]
        if gt_retention < 1.0:
            rng = np.random.default_rng([seq_seed, 97531])
            for f in frames:
                f.gt_valid &= rng.random(f.gt_valid.shape) < gt_retention
        sequences.append(Sequence(id=f"seq{i:03d}", frames=frames, domain_tag=domain.tag))
    return Dataset(sequences=sequences, supervised=True)


# ---------------------------------------------------------------------------
# benchmark scene/domain presets

DOMAIN_PRESETS = {
    "neutral": DomainSpec(tag="neutral", brightness=1.0, contrast=1.0,
                          noise_sigma=0.0, texture_family=1),
    "domain-a": DomainSpec(tag="domain-a", brightness=0.9, contrast=0.9,
                           noise_sigma=0.005, texture_family=0,
                           glare_count=2, glare_strength=0.5),
    "domain-b": DomainSpec(tag="domain-b", brightness=1.3, contrast=1.1,
                           noise_sigma=0.005, texture_family=2,
                           glare_count=3, glare_strength=0.6),
}

# scene statistics are part of the domain: training scenes span diverse
# disparity bands (so adaptation to a band is a recurring task); test
# scenes hold fewer, larger, nearer surfaces in a band of their own
SCENE_RANGES = {
    "neutral": ((1.5, 8.0), 1.0, (4, 8), (18, 56, 12, 36)),
    "domain-a": (None, 1.0, (4, 8), (18, 56, 12, 36)),
    "domain-b": ((4.0, 9.0), 2.0, (3, 5), (34, 72, 22, 44)),
}


def _draw_range(rng: np.random.Generator, spec) -> tuple[float, float]:
    if spec is not None:
        return spec
    lo = float(rng.uniform(1.5, 5.5))
    return lo, lo + float(rng.uniform(2.5, 4.5))


def random_scene(rng: np.random.Generator, height: int = 64, width: int = 128,
                 n_surfaces: int | None = None, integer_disparities: bool = False,
                 disparity_range: tuple[float, float] = (1.5, 8.0),
                 background_disparity: float = 1.0,
                 count_range: tuple[int, int] = (4, 8),
                 size_range: tuple[float, float, float, float] = (18, 56, 12, 36)) -> SceneSpec:
    """A plausible random scene: several drifting rectangles over a far plane."""
    focal, baseline = 200.0, 0.5
    fb = focal * baseline
    n = int(rng.integers(*count_range)) if n_surfaces is None else n_surfaces
    exact = (2.0, 4.0, 5.0, 8.0)   # fb / d is exactly representable for these
    w_lo, w_hi, h_lo, h_hi = size_range
    surfaces = []
    for _ in range(n):
        if integer_disparities:
            d = exact[int(rng.integers(len(exact)))]
        else:
            d = float(rng.uniform(*disparity_range))
        surfaces.append(Surface(
            x0=float(rng.uniform(-10, width - 15)),
            y0=float(rng.uniform(-10, height - 10)),
            width=float(rng.uniform(w_lo, w_hi)),
            height=float(rng.uniform(h_lo, h_hi)),
            depth=fb / d,
            vx=float(rng.uniform(-0.3, 0.3)),
            vy=float(rng.uniform(-0.15, 0.15)),
        ))
    # z-buffering decides visibility; surface order is irrelevant
    return SceneSpec(focal=focal, baseline=baseline, height=height, width=width,
                     surfaces=tuple(surfaces), background_depth=fb / background_disparity)


def benchmark_specs(role: str, n_sequences: int, seed: int,
                    height: int = 64, width: int = 128,
                    integer_disparities: bool = False) -> list[tuple[SceneSpec, DomainSpec]]:
    """Scene/domain pairs for the desk benchmark; roles use disjoint domains."""
    if role not in DOMAIN_PRESETS:
        raise ContractError(f"unknown domain preset '{role}'; have {sorted(DOMAIN_PRESETS)}")
    domain = DOMAIN_PRESETS[role]
    drange, bg, count_range, size_range = SCENE_RANGES[role]
    role_key = sorted(DOMAIN_PRESETS).index(role)
    rng = np.random.default_rng([seed, role_key, 40503])
    return [(random_scene(rng, height, width, integer_disparities=integer_disparities,
                          disparity_range=_draw_range(rng, drange), background_disparity=bg,
                          count_range=count_range, size_range=size_range), domain)
            for _ in range(n_sequences)]
