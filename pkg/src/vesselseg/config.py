"""Run configuration: documented defaults, `key = value` files, overrides.

Precedence is built-in default < config file < command-line override, and
every consumed key must be one of the documented defaults below; anything
else is rejected up front so typos fail loudly instead of silently running
with defaults. All randomness flows through the three named seeds; a seed
left unset is generated once, logged, and written into the run manifest so
the run can be repeated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentationSpec
from .errors import ConfigurationError
from .inference import TilingPolicy
from .train import LossParams, TrainConfig

# key -> (kind, default). kind drives parsing; None defaults mean "unset".
DEFAULTS: dict[str, tuple[str, object]] = {
    "manifest": ("path", None),
    "out_dir": ("path", Path("run")),
    "split_file": ("path", None),  # reuse a saved split instead of drawing one
    "val_count": ("int", 2),
    "test_count": ("int", 2),
    "total_epochs": ("int", 600),
    "phases": ("phases", ((300, 1e-3), (300, 1e-4))),
    "batch_size": ("int", 20),
    "windows_per_image": ("int", 20),
    "window_width": ("int", 320),
    "window_height": ("int", 240),
    "lambda_dice": ("float", 1.0),
    "lambda_focal": ("float", 1.0),
    "gamma": ("float", 2.0),
    "epsilon": ("float", 1.0),
    "prob_clip": ("float", 1e-7),
    "augmentation": ("bool", True),
    "aug_affine": ("float", 0.5),
    "aug_equalize": ("float", 0.5),
    "aug_clahe": ("float", 0.5),
    "aug_rescale": ("float", 0.5),
    "aug_log": ("float", 0.5),
    "aug_blur": ("float", 0.5),
    "depth": ("int", 4),
    "base_channels": ("int", 16),
    "up_mode": ("str", "transpose"),
    "checkpoint_every": ("int", 50),
    "split_seed": ("seed", None),
    "init_seed": ("seed", None),
    "sampling_seed": ("seed", None),
    "threshold": ("float", 0.45),
    "select_on": ("str", "val"),
    "tile_w": ("int", 512),
    "tile_h": ("int", 512),
    "tile_overlap": ("int", 64),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_value(key: str, kind: str, text: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "seed":
            return None if text in ("", "none") else int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "str":
            return text
        if kind == "path":
            return None if text == "" else Path(text)
        if kind == "phases":
            phases = []
            for part in text.split(","):
                epochs, lr = part.split(":")
                phases.append((int(epochs), float(lr)))
            return tuple(phases)
    except ConfigurationError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"bad value for {key!r}: {exc}") from exc
    raise AssertionError(f"unhandled kind {kind}")


def parse_config_file(path) -> dict[str, str]:
    """Read `key = value` lines; `#` starts a comment; unknown keys rejected."""
    path = Path(path)
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigurationError(f"{path}:{lineno}: unknown configuration key {key!r}")
        if key in raw:
            raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


@dataclass
class RunConfig:
    values: dict
    sources: dict  # key -> default | file | flag | generated

    def __getitem__(self, key: str):
        return self.values[key]


def resolve(file_values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge the three layers into typed values, tracking each key's source."""
    values, sources = {}, {}
    for key, (kind, default) in DEFAULTS.items():
        values[key] = default
        sources[key] = "default"
    for key, text in (file_values or {}).items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        values[key] = _parse_value(key, DEFAULTS[key][0], text)
        sources[key] = "file"
    for key, text in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        values[key] = _parse_value(key, DEFAULTS[key][0], str(text))
        sources[key] = "flag"
    return RunConfig(values=values, sources=sources)


def generate_seed() -> int:
    """Fresh 31-bit seed from OS entropy."""
    return int(np.random.SeedSequence().entropy % (2**31))


def ensure_seeds(config: RunConfig, log=None) -> None:
    """Fill absent seeds with generated values and log them."""
    for key in ("split_seed", "init_seed", "sampling_seed"):
        if config.values[key] is None:
            config.values[key] = generate_seed()
            config.sources[key] = "generated"
            if log is not None:
                log(f"{key} not supplied; generated {config.values[key]}")


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):  # phase schedule
        return ",".join(f"{e}:{lr:g}" for e, lr in value)
    return str(value)


def write_run_manifest(config: RunConfig, path, version: str) -> None:
    """Resolved `key = value` snapshot sufficient to re-run identically."""
    lines = [f"# vesselseg {version} resolved run configuration"]
    for key in DEFAULTS:
        lines.append(f"{key} = {_format_value(config.values[key])}"
                     f"  # {config.sources[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


def augmentation_spec_from(config: RunConfig) -> AugmentationSpec:
    return AugmentationSpec(
        enabled=config["augmentation"],
        affine_prob=config["aug_affine"],
        equalize_prob=config["aug_equalize"],
        clahe_prob=config["aug_clahe"],
        rescale_prob=config["aug_rescale"],
        log_prob=config["aug_log"],
        blur_prob=config["aug_blur"],
    )


def train_config_from(config: RunConfig) -> TrainConfig:
    for key in ("split_seed", "init_seed", "sampling_seed"):
        if config.values[key] is None:
            raise ConfigurationError(f"{key} unresolved; call ensure_seeds first")
    loss = LossParams(
        lambda_dice=config["lambda_dice"],
        lambda_focal=config["lambda_focal"],
        gamma=config["gamma"],
        epsilon=config["epsilon"],
        prob_clip=config["prob_clip"],
    )
    return TrainConfig(
        total_epochs=config["total_epochs"],
        phases=config["phases"],
        batch_size=config["batch_size"],
        windows_per_image=config["windows_per_image"],
        window_width=config["window_width"],
        window_height=config["window_height"],
        loss=loss,
        augmentation=augmentation_spec_from(config),
        split_seed=config["split_seed"],
        init_seed=config["init_seed"],
        sampling_seed=config["sampling_seed"],
        model_depth=config["depth"],
        model_base_channels=config["base_channels"],
        model_up_mode=config["up_mode"],
        checkpoint_every=config["checkpoint_every"],
        out_dir=config["out_dir"],
    )


def tiling_policy_from(config: RunConfig) -> TilingPolicy:
    return TilingPolicy(
        tile_w=config["tile_w"],
        tile_h=config["tile_h"],
        overlap=config["tile_overlap"],
    )
