"""Loading SLO images and vessel masks, dataset splits, and window sampling.

Images are single-channel 8- or 16-bit PNG/TIFF rasters, normalised to
float32 intensities in [0, 1]. Masks merge every nonzero label (arteries,
veins, anything else) into a single vessel class. All randomness goes
through numpy's PCG64 generator so splits and window origins are
reproducible from a recorded seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ConfigurationError,
    DimensionError,
    ImageFormatError,
    PairingError,
)

DEFAULT_WINDOW_W = 320
DEFAULT_WINDOW_H = 240

# PIL modes accepted for intensity images, with their native bit depth.
# 16-bit rasters surface as I;16 variants or as 32-bit 'I' depending on
# the PIL version and container; 'I' is only accepted when values fit 16 bits.
_IMAGE_MODES = {"L": 8, "I;16": 16, "I;16L": 16, "I;16B": 16, "I;16N": 16, "I": 16}
_MASK_MODES = set(_IMAGE_MODES) | {"1"}


@dataclass(frozen=True)
class SLOImage:
    """A grayscale SLO image with intensities scaled into [0, 1]."""

    pixels: np.ndarray
    id: str
    native_bit_depth: int

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D grid, got shape {p.shape}")
        if p.dtype != np.float32:
            raise ValueError(f"pixels must be float32, got {p.dtype}")
        lo, hi = float(p.min()), float(p.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities outside [0, 1]: min={lo}, max={hi}")
        if self.native_bit_depth not in (8, 16):
            raise ValueError(f"native_bit_depth must be 8 or 16, got {self.native_bit_depth}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class VesselMask:
    """A binary vessel map aligned with an SLOImage (1 = vessel)."""

    labels: np.ndarray

    def __post_init__(self):
        m = self.labels
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError(f"labels must be a non-empty 2-D grid, got shape {m.shape}")
        if m.dtype != np.uint8:
            raise ValueError(f"labels must be uint8, got {m.dtype}")
        if m.max(initial=0) > 1:
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test id lists plus the seed that produced them."""

    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int = -1


@dataclass(frozen=True)
class WindowSample:
    """One training window: co-registered image/mask patch plus its origin."""

    image_patch: np.ndarray
    mask_patch: np.ndarray
    origin_x: int
    origin_y: int
    source_id: str = ""

    @property
    def height(self) -> int:
        return self.image_patch.shape[0]

    @property
    def width(self) -> int:
        return self.image_patch.shape[1]


def _open_raster(path, allowed_modes):
    im = Image.open(path)
    im.load()  # force decode so truncated files fail here, not lazily
    bands = im.getbands()
    if len(bands) != 1:
        raise ImageFormatError(
            f"{path}: expected a single-channel image, got {len(bands)} channels ({im.mode})"
        )
    if im.mode not in allowed_modes:
        raise ImageFormatError(f"{path}: unsupported raster mode {im.mode!r}")
    return im, np.asarray(im)


def load_image(path) -> SLOImage:
    """Load a grayscale raster and scale intensities by 1/(2^depth - 1).

    Raises OSError for unreadable/corrupt files and ImageFormatError for
    multi-channel or unsupported rasters.
    """
    path = Path(path)
    im, arr = _open_raster(path, _IMAGE_MODES)
    depth = _IMAGE_MODES[im.mode]
    if arr.dtype == np.int32:
        # 16-bit rasters decoded into PIL's 32-bit 'I' mode
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 0xFFFF:
            raise ImageFormatError(f"{path}: 'I'-mode values exceed 16-bit range")
        arr = arr.astype(np.uint16)
    scale = np.float32((1 << depth) - 1)
    pixels = arr.astype(np.float32) / scale
    return SLOImage(pixels=pixels, id=path.stem, native_bit_depth=depth)


def load_mask(path) -> VesselMask:
    """Load an annotation raster; every nonzero label becomes vessel (1)."""
    path = Path(path)
    _, arr = _open_raster(path, _MASK_MODES)
    return VesselMask(labels=(arr != 0).astype(np.uint8))


def check_pair(image: SLOImage, mask: VesselMask) -> None:
    """Raise PairingError unless image and mask dimensions agree."""
    if (image.height, image.width) != (mask.height, mask.width):
        raise PairingError(
            f"image {image.id!r} is {image.width}x{image.height} but its mask is "
            f"{mask.width}x{mask.height}"
        )


def load_pair(image_path, mask_path) -> tuple[SLOImage, VesselMask]:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    check_pair(image, mask)
    return image, mask


def make_split(ids, counts, seed: int) -> DatasetSplit:
    """Deterministically partition ids into train/val/test of the given sizes.

    ids are sorted before shuffling so the split depends only on the id set
    and the seed, not on the caller's ordering.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("split ids must be unique")
    n_train, n_val, n_test = counts
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != len(ids):
        raise ConfigurationError(
            f"split counts {counts} do not sum to the number of ids ({len(ids)})"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    order = sorted(ids)
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]
    return DatasetSplit(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train : n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val :]),
        seed=seed,
    )


def sample_windows(
    image: SLOImage,
    mask: VesselMask,
    n: int,
    window_w: int = DEFAULT_WINDOW_W,
    window_h: int = DEFAULT_WINDOW_H,
    rng: np.random.Generator | None = None,
) -> list[WindowSample]:
    """Cut n windows at independent uniform origins, identically from image and mask.

    Origins are drawn over the full valid rectangle, so windows may overlap.
    """
    check_pair(image, mask)
    if image.width < window_w or image.height < window_h:
        raise DimensionError(
            f"image {image.id!r} ({image.width}x{image.height}) is smaller than the "
            f"window ({window_w}x{window_h})"
        )
    if rng is None:
        rng = np.random.default_rng()
    xs = rng.integers(0, image.width - window_w + 1, size=n)
    ys = rng.integers(0, image.height - window_h + 1, size=n)
    samples = []
    for ox, oy in zip(xs.tolist(), ys.tolist()):
        samples.append(
            WindowSample(
                image_patch=image.pixels[oy : oy + window_h, ox : ox + window_w].copy(),
                mask_patch=mask.labels[oy : oy + window_h, ox : ox + window_w].copy(),
                origin_x=ox,
                origin_y=oy,
                source_id=image.id,
            )
        )
    return samples


# --- manifest and split files -------------------------------------------------

def read_manifest(path) -> list[tuple[Path, Path]]:
    """Read a dataset manifest: one `<image_path><TAB><mask_path>` line per sample.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigurationError(
                f"{path}:{lineno}: expected '<image>\\t<mask>', got {raw!r}"
            )
        img, msk = (Path(p.strip()) for p in parts)
        pairs.append((base / img if not img.is_absolute() else img,
                      base / msk if not msk.is_absolute() else msk))
    if not pairs:
        raise ConfigurationError(f"{path}: manifest contains no samples")
    return pairs


def write_manifest(pairs, path) -> None:
    lines = [f"{img}\t{msk}" for img, msk in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def write_split(split: DatasetSplit, path) -> None:
    lines = [f"# seed = {split.seed}"]
    for header, ids in (("train", split.train_ids), ("val", split.val_ids),
                        ("test", split.test_ids)):
        lines.append(f"[{header}]")
        lines.extend(ids)
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> DatasetSplit:
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    seed = -1
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("seed"):
                seed = int(body.split("=", 1)[1])
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in sections:
                raise ConfigurationError(f"{path}: unknown split section {name!r}")
            current = name
            continue
        if current is None:
            raise ConfigurationError(f"{path}: id {line!r} appears before any section")
        sections[current].append(line)
    return DatasetSplit(
        train_ids=tuple(sections["train"]),
        val_ids=tuple(sections["val"]),
        test_ids=tuple(sections["test"]),
        seed=seed,
    )
