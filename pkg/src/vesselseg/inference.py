"""Whole-image segmentation: divisibility padding, tiled fallback, output files.

segment_full reflect-pads the right/bottom edges up to the next multiple of
2^depth, forwards once, and crops back, so maps always match the source
dimensions. segment_tiled covers the padded image with overlapping tiles,
blends tile predictions with linear edge ramps, and normalizes by the
accumulated weight (a partition of unity by construction); it exists as a
memory fallback for very large inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .dataio import SLOImage, VesselMask
from .errors import ConfigurationError, ContractError, OutOfMemoryError


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel vessel probabilities for one source image."""

    values: np.ndarray
    source_id: str = ""
    checkpoint_id: str = ""
    forward_seconds: float = 0.0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractError(f"probability map must be 2-D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TilingPolicy:
    tile_w: int = 512
    tile_h: int = 512
    overlap: int = 64
    blend: str = "linear"

    def __post_init__(self):
        if self.tile_w < 1 or self.tile_h < 1:
            raise ConfigurationError("tile dimensions must be positive")
        if self.overlap < 0:
            raise ConfigurationError("overlap must be nonnegative")
        if self.overlap >= min(self.tile_w, self.tile_h) / 2:
            raise ConfigurationError(
                f"overlap {self.overlap} must be < half the smaller tile side "
                f"({min(self.tile_w, self.tile_h)})"
            )
        if self.blend not in ("linear",):
            raise ConfigurationError(f"unknown blend scheme {self.blend!r}")


def pad_to_multiple(pixels: np.ndarray, divisor: int) -> np.ndarray:
    """Reflect-pad right/bottom so both dimensions divide by `divisor`."""
    h, w = pixels.shape
    pad_h = (-h) % divisor
    pad_w = (-w) % divisor
    if pad_h == 0 and pad_w == 0:
        return pixels
    return np.pad(pixels, ((0, pad_h), (0, pad_w)), mode="reflect")


def _forward_padded(model, padded: np.ndarray) -> tuple[np.ndarray, float]:
    """Run one no-grad forward; returns (probabilities, forward seconds)."""
    x = torch.from_numpy(padded[None, None].astype(np.float32, copy=False))
    try:
        t0 = time.perf_counter()
        with torch.no_grad():
            probs = model(x)
        seconds = time.perf_counter() - t0
    except (MemoryError, RuntimeError) as exc:
        if isinstance(exc, RuntimeError) and "memory" not in str(exc).lower():
            raise
        raise OutOfMemoryError(
            f"forward pass on a {padded.shape[1]}x{padded.shape[0]} input ran out "
            "of memory; retry with tiled segmentation"
        ) from exc
    return probs[0].numpy(), seconds


def segment_full(model, image: SLOImage) -> ProbabilityMap:
    """Segment a whole image in one forward pass."""
    div = 1 << model.config.depth
    padded = pad_to_multiple(image.pixels, div)
    out, seconds = _forward_padded(model, padded)
    return ProbabilityMap(
        values=np.ascontiguousarray(out[: image.height, : image.width]),
        source_id=image.id,
        checkpoint_id=model.checkpoint_id,
        forward_seconds=seconds,
    )


def tile_positions(length: int, tile: int, overlap: int) -> list[int]:
    """Start offsets covering [0, length) with the requested overlap.

    The final tile is aligned to the far edge, so its overlap with the
    previous tile may exceed the nominal value.
    """
    if tile >= length:
        return [0]
    stride = tile - overlap
    positions = list(range(0, length - tile, stride))
    positions.append(length - tile)
    return positions


def ramp_profile(tile: int, overlap: int, ramp_low: bool, ramp_high: bool) -> np.ndarray:
    """1-D blending weights: linear ramps over the overlap band on interior edges."""
    w = np.ones(tile, dtype=np.float64)
    if overlap > 0:
        ramp = np.arange(1, overlap + 1, dtype=np.float64) / (overlap + 1)
        if ramp_low:
            w[:overlap] = ramp
        if ramp_high:
            w[-overlap:] = ramp[::-1]
    return w


def segment_tiled(model, image: SLOImage, policy: TilingPolicy = TilingPolicy()) -> ProbabilityMap:
    """Segment via overlapping tiles; single-tile inputs match segment_full bit-exactly."""
    div = 1 << model.config.depth
    if policy.tile_w % div or policy.tile_h % div:
        raise ConfigurationError(
            f"tile dimensions {policy.tile_w}x{policy.tile_h} must divide by 2^depth = {div}"
        )
    padded = pad_to_multiple(image.pixels, div)
    ph, pw = padded.shape
    tw, th = min(policy.tile_w, pw), min(policy.tile_h, ph)

    xs = tile_positions(pw, tw, policy.overlap)
    ys = tile_positions(ph, th, policy.overlap)
    if len(xs) == 1 and len(ys) == 1:
        out, seconds = _forward_padded(model, padded)
        values = out[: image.height, : image.width]
        return ProbabilityMap(
            values=np.ascontiguousarray(values),
            source_id=image.id,
            checkpoint_id=model.checkpoint_id,
            forward_seconds=seconds,
        )

    accum = np.zeros((ph, pw), dtype=np.float64)
    weight = np.zeros((ph, pw), dtype=np.float64)
    seconds = 0.0
    for y0 in ys:
        wy = ramp_profile(th, policy.overlap, ramp_low=y0 > 0, ramp_high=y0 + th < ph)
        for x0 in xs:
            wx = ramp_profile(tw, policy.overlap, ramp_low=x0 > 0, ramp_high=x0 + tw < pw)
            tile_out, dt = _forward_padded(model, padded[y0 : y0 + th, x0 : x0 + tw])
            seconds += dt
            w2d = wy[:, None] * wx[None, :]
            accum[y0 : y0 + th, x0 : x0 + tw] += w2d * tile_out
            weight[y0 : y0 + th, x0 : x0 + tw] += w2d
    values = (accum / weight).astype(np.float32)[: image.height, : image.width]
    return ProbabilityMap(
        values=np.ascontiguousarray(values),
        source_id=image.id,
        checkpoint_id=model.checkpoint_id,
        forward_seconds=seconds,
    )


def segment_auto(model, image: SLOImage, policy: TilingPolicy = TilingPolicy()) -> ProbabilityMap:
    """Try a full pass and fall back to tiling when memory runs out."""
    try:
        return segment_full(model, image)
    except OutOfMemoryError:
        return segment_tiled(model, image, policy)


def binarize(pmap: ProbabilityMap, threshold: float) -> VesselMask:
    """Vessel iff p >= threshold, matching the evaluation prediction rule."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold must lie in [0, 1], got {threshold}")
    return VesselMask(labels=(pmap.values >= threshold).astype(np.uint8))


def write_probability_png(pmap: ProbabilityMap, path) -> None:
    """Store probabilities as a 16-bit grayscale PNG, value = round(p * 65535)."""
    from PIL import Image

    arr = np.round(pmap.values.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def read_probability_png(path) -> np.ndarray:
    """Inverse of write_probability_png up to the 16-bit quantization."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint16)
    return (arr.astype(np.float32) / 65535.0).astype(np.float32)


def write_mask_png(mask: VesselMask, path) -> None:
    """Store a binary mask as an 8-bit PNG with values {0, 255}."""
    from PIL import Image

    Image.fromarray((mask.labels * 255).astype(np.uint8)).save(path, format="PNG")


def write_sidecar(path, *, source_id: str, checkpoint_id: str,
                  threshold: float | None, forward_seconds: float,
                  tiled: bool, version: str) -> None:
    """Plain-text metadata next to each output map/mask."""
    lines = [
        f"source = {source_id}",
        f"checkpoint = {checkpoint_id}",
        f"threshold = {'' if threshold is None else threshold}",
        f"forward_seconds = {forward_seconds:.6f}",
        f"tiled = {str(tiled).lower()}",
        f"toolkit_version = {version}",
    ]
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")
