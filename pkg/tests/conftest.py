"""Shared fixtures: synthetic SLO-like vessel scenes and tiny models.

The scene generator draws dark, smoothly wandering vessel curves of varying
thickness over a bright low-frequency background, which is enough structure
for a U-Net to overfit quickly while exercising the full pipeline.
"""

import sys

import cv2
import numpy as np
import pytest
from scipy import ndimage

from vesselseg.dataio import SLOImage, VesselMask
from vesselseg.model import UNetConfig, build_unet


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines after capture is torn down."""
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None) if module else None
    if not verdicts:
        return
    terminalreporter.section("acceptance verdicts")
    for line in verdicts:
        terminalreporter.write_line(line)


def synthetic_scene(height, width, seed, n_vessels=14, sample_id="synthetic"):
    """Deterministic vessel-like image/mask pair in [0,1] / {0,1}."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width), np.uint8)
    for _ in range(n_vessels):
        x0 = rng.uniform(-0.1 * width, 1.1 * width)
        y0 = rng.uniform(-0.1 * height, 1.1 * height)
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.7, 1.5) * max(height, width)
        ts = np.linspace(0, 1, 80)
        amp = rng.uniform(0.02, 0.08) * max(height, width)
        freq = rng.uniform(0.8, 2.5)
        phase = rng.uniform(0, 2 * np.pi)
        wobble = amp * np.sin(2 * np.pi * freq * ts + phase)
        xs = x0 + np.cos(ang) * ts * length - np.sin(ang) * wobble
        ys = y0 + np.sin(ang) * ts * length + np.cos(ang) * wobble
        pts = np.stack([xs, ys], 1).astype(np.int32)
        cv2.polylines(mask, [pts], False, 1, thickness=int(rng.integers(3, 9)))

    base = ndimage.gaussian_filter(rng.random((height, width)), 0.08 * max(height, width))
    lo, hi = base.min(), base.max()
    base = 0.55 + 0.25 * (base - lo) / max(hi - lo, 1e-9)
    img = base - 0.35 * ndimage.gaussian_filter(mask.astype(np.float32), 0.8)
    img = img + rng.normal(0, 0.015, (height, width))
    img = np.clip(img, 0, 1).astype(np.float32)
    return SLOImage(pixels=img, id=sample_id, native_bit_depth=8), VesselMask(labels=mask)


def write_png(path, array):
    """8- or 16-bit single-channel PNG from a uint8/uint16 array."""
    from PIL import Image

    if array.dtype in (np.uint8, np.uint16):
        Image.fromarray(array).save(path, format="PNG")
    else:
        raise ValueError(array.dtype)


@pytest.fixture(scope="session")
def small_scene():
    return synthetic_scene(256, 256, seed=7, n_vessels=8, sample_id="scene256")


@pytest.fixture(scope="session")
def tiny_model():
    """Small deterministic net for shape/IO tests (depth 2, 4 channels)."""
    return build_unet(UNetConfig(depth=2, base_channels=4, init_seed=3))
