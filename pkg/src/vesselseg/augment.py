"""Randomized training-window augmentation.

Each window gets its own plan: a random subset of operations sampled per
AugmentationSpec, applied in a fixed order (affine, then intensity ops, then
blur). Geometric operations warp image and mask with the same transform
(bilinear vs. nearest-neighbour); photometric operations and blur touch the
image only, so the mask stays binary and bit-identical unless warped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from skimage import exposure

from .dataio import WindowSample
from .errors import ConfigurationError

# Application order; intensity ops run between affine and blur.
OP_ORDER = ("affine", "equalize", "clahe", "rescale", "log", "blur")


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"{name} probability {p} outside [0, 1]")


def _check_range(name, rng):
    lo, hi = rng
    if lo > hi:
        raise ConfigurationError(f"{name} range ({lo}, {hi}) has low > high")


@dataclass(frozen=True)
class AugmentationSpec:
    """Per-operation enable probabilities and parameter ranges.

    Defaults are deliberately mild so thin vessels survive; everything is
    overridable through the run configuration.
    """

    enabled: bool = True
    affine_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: tuple[float, float] = (-15.0, 15.0)     # degrees
    shear_range: tuple[float, float] = (-10.0, 10.0)        # degrees
    equalize_prob: float = 0.5
    clahe_prob: float = 0.5
    clahe_clip_range: tuple[float, float] = (1.0, 4.0)
    clahe_tile_grid: int = 8
    rescale_prob: float = 0.5
    rescale_low_range: tuple[float, float] = (0.0, 0.2)
    rescale_high_range: tuple[float, float] = (0.8, 1.0)
    log_prob: float = 0.5
    log_gain_range: tuple[float, float] = (0.5, 2.0)
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.5, 2.0)      # pixels

    def __post_init__(self):
        for name in ("affine", "equalize", "clahe", "rescale", "log", "blur"):
            _check_prob(name, getattr(self, f"{name}_prob"))
        for name in ("scale", "rotation", "shear", "clahe_clip", "rescale_low",
                     "rescale_high", "log_gain", "blur_sigma"):
            _check_range(name, getattr(self, f"{name}_range"))
        if self.scale_range[0] <= 0.0:
            raise ConfigurationError("affine scale range must be strictly positive")
        if self.clahe_tile_grid < 1:
            raise ConfigurationError("clahe tile grid must be >= 1")
        if self.blur_sigma_range[0] < 0.0:
            raise ConfigurationError("blur sigma must be nonnegative")


@dataclass(frozen=True)
class PlannedOp:
    name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AugmentationPlan:
    """Concrete operations with sampled parameters, in application order."""

    ops: tuple[PlannedOp, ...] = ()

    def __len__(self):
        return len(self.ops)

    def names(self) -> tuple[str, ...]:
        return tuple(op.name for op in self.ops)


def _uniform(rng, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_plan(spec: AugmentationSpec, rng: np.random.Generator) -> AugmentationPlan:
    """Draw a plan: each operation included independently with its probability."""
    if not spec.enabled:
        return AugmentationPlan()
    ops = []
    if rng.random() < spec.affine_prob:
        ops.append(PlannedOp("affine", {
            "scale": _uniform(rng, spec.scale_range),
            "rotation_deg": _uniform(rng, spec.rotation_range),
            "shear_deg": _uniform(rng, spec.shear_range),
        }))
    if rng.random() < spec.equalize_prob:
        ops.append(PlannedOp("equalize"))
    if rng.random() < spec.clahe_prob:
        ops.append(PlannedOp("clahe", {
            "clip_limit": _uniform(rng, spec.clahe_clip_range),
            "tile_grid": spec.clahe_tile_grid,
        }))
    if rng.random() < spec.rescale_prob:
        ops.append(PlannedOp("rescale", {
            "low": _uniform(rng, spec.rescale_low_range),
            "high": _uniform(rng, spec.rescale_high_range),
        }))
    if rng.random() < spec.log_prob:
        ops.append(PlannedOp("log", {"gain": _uniform(rng, spec.log_gain_range)}))
    if rng.random() < spec.blur_prob:
        ops.append(PlannedOp("blur", {"sigma": _uniform(rng, spec.blur_sigma_range)}))
    return AugmentationPlan(ops=tuple(ops))


def _affine_matrix(scale, rotation_deg, shear_deg):
    """Inverse (output -> input) 2x2 matrix in (row, col) coordinates.

    Forward transform: scale about the centre, then horizontal shear, then
    rotation. The inverse is fed to scipy, which pulls input coordinates.
    """
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(shear_deg)), 1.0]])
    fwd = rot @ shear @ (scale * np.eye(2))
    return np.linalg.inv(fwd)


def _apply_affine(img, mask, params):
    h, w = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = _affine_matrix(params["scale"], params["rotation_deg"], params["shear_deg"])
    offset = center - inv @ center
    # image: bilinear, border replicated; mask: nearest, zero fill
    img_out = ndimage.affine_transform(img, inv, offset=offset, order=1, mode="nearest")
    mask_out = ndimage.affine_transform(mask, inv, offset=offset, order=0,
                                        mode="constant", cval=0)
    return img_out, mask_out


def _apply_clahe(img, clip_limit, tile_grid):
    u16 = np.round(img * 65535.0).astype(np.uint16)
    clahe = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(tile_grid, tile_grid))
    return clahe.apply(u16).astype(np.float32) / np.float32(65535.0)


def _apply_rescale(img, low, high):
    imin, imax = float(img.min()), float(img.max())
    if imax > imin:
        return (img - imin) / (imax - imin) * (high - low) + low
    return np.full_like(img, low)


def apply_plan(plan: AugmentationPlan, window: WindowSample) -> WindowSample:
    """Apply a plan to one window; output dimensions always equal input.

    Image intensities are clamped back into [0, 1] after every operation;
    the mask is only touched by the affine step and stays binary.
    """
    if not plan.ops:
        return window
    img = window.image_patch.astype(np.float32, copy=True)
    mask = window.mask_patch.copy()
    for op in plan.ops:
        if op.name == "affine":
            img, mask = _apply_affine(img, mask, op.params)
        elif op.name == "equalize":
            img = exposure.equalize_hist(img).astype(np.float32)
        elif op.name == "clahe":
            img = _apply_clahe(img, op.params["clip_limit"], op.params["tile_grid"])
        elif op.name == "rescale":
            img = _apply_rescale(img, op.params["low"], op.params["high"])
        elif op.name == "log":
            img = op.params["gain"] * np.log2(1.0 + img)
        elif op.name == "blur":
            img = ndimage.gaussian_filter(img, sigma=op.params["sigma"])
        else:
            raise ConfigurationError(f"unknown augmentation op {op.name!r}")
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return WindowSample(
        image_patch=img,
        mask_patch=mask,
        origin_x=window.origin_x,
        origin_y=window.origin_y,
        source_id=window.source_id,
    )
