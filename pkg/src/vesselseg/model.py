"""U-Net definition, deterministic initialisation, and checkpoint I/O.

The network is the classic encoder/decoder with skip connections: two 3x3
convolutions + ReLU per stage, 2x max-pooling down, learnable 2x
up-sampling (transposed conv by default) with skip concatenation, and a
final 1x1 convolution + logistic head producing one vessel-probability
channel. Same-padding is used throughout so the output grid matches the
input grid whenever H and W are divisible by 2^depth.

Checkpoints are a single self-contained file:

    magic "VSEGCKPT" | uint32 LE header length | UTF-8 JSON header |
    raw little-endian float32 arrays | 32-byte SHA-256 of all prior bytes

The JSON header carries the format version, the serialized config, training
metadata, and an array index (name, shape, dtype, byte offset/length) in
state-dict order. Arrays are row-major float32, so save -> load round-trips
weights bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"VSEGCKPT"
CHECKPOINT_FORMAT_VERSION = "1"

# float32 open-interval bounds for the probability head
_P_MIN = 1e-12
_P_MAX = 1.0 - 2.0 ** -24


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    init_seed: int = 0
    up_mode: str = "transpose"  # or "nearest" (nearest-neighbour upsample + 1x1 conv)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.up_mode not in ("transpose", "nearest"):
            raise ConfigurationError(f"unknown up_mode {self.up_mode!r}")


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Single-channel-in, single-probability-out U-Net."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        self.checkpoint_id = "unsaved"
        self.metadata: dict = {}

        c = 1
        self.encoders = nn.ModuleList()
        for d in range(config.depth):
            cout = config.base_channels * (1 << d)
            self.encoders.append(_double_conv(c, cout))
            c = cout
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(c, config.base_channels * (1 << config.depth))
        c = config.base_channels * (1 << config.depth)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for d in reversed(range(config.depth)):
            cout = config.base_channels * (1 << d)
            if config.up_mode == "transpose":
                up = nn.ConvTranspose2d(c, cout, kernel_size=2, stride=2)
            else:
                up = nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(c, cout, kernel_size=1),
                )
            self.upsamplers.append(up)
            self.decoders.append(_double_conv(2 * cout, cout))
            c = cout
        self.head = nn.Conv2d(c, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map a B x 1 x H x W batch to B x H x W vessel probabilities.

        H and W must each be divisible by 2^depth; callers with arbitrary
        sizes should pad first (the inference module does).
        """
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected a Bx1xHxW batch, got shape {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        div = 1 << self.config.depth
        if h % div or w % div:
            raise ShapeError(
                f"input {w}x{h} not divisible by 2^depth = {div}; "
                f"pad to a multiple of {div} first"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        logits = self.head(x)
        probs = torch.sigmoid(logits)
        # keep the logistic output strictly inside (0, 1) even when float32
        # sigmoid saturates on a well-trained net
        return torch.clamp(probs, min=_P_MIN, max=_P_MAX).squeeze(1)


def _fan_in(name: str, param: torch.Tensor) -> int:
    if "upsamplers" in name and param.ndim == 4 and param.shape[2] == 2:
        # ConvTranspose2d weight layout is (cin, cout, kh, kw)
        return param.shape[0] * param.shape[2] * param.shape[3]
    return int(np.prod(param.shape[1:]))


def build_unet(config: UNetConfig) -> UNet:
    """Construct a U-Net with He fan-in initialisation seeded from init_seed.

    Weights are drawn in registration order from a dedicated generator, so
    the same config always yields bit-identical parameters.
    """
    model = UNet(config)
    gen = torch.Generator().manual_seed(config.init_seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.ndim >= 2:
                std = (2.0 / _fan_in(name, param)) ** 0.5
                param.normal_(mean=0.0, std=std, generator=gen)
            else:
                param.zero_()
    model.eval()
    return model


def forward(model: UNet, batch: np.ndarray) -> np.ndarray:
    """Numpy convenience wrapper: B x 1 x H x W float array in, B x H x W out."""
    x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    with torch.no_grad():
        probs = model(x)
    return probs.numpy()


def count_parameters(model: UNet) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: UNet, metadata: dict, path) -> None:
    """Write the single-file checkpoint container described in the module docs."""
    state = model.state_dict()
    arrays = []
    payload = bytearray()
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        arrays.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(raw),
        })
        payload.extend(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "metadata": metadata,
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob.extend(CHECKPOINT_MAGIC)
    blob.extend(len(header_bytes).to_bytes(4, "little"))
    blob.extend(header_bytes)
    blob.extend(payload)
    digest = hashlib.sha256(bytes(blob)).digest()
    blob.extend(digest)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> UNet:
    """Load a checkpoint; verifies checksum, magic, and format version.

    The returned model carries `.metadata` (as saved) and a `.checkpoint_id`
    derived from the file digest.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (corrupt or truncated)")
    if body[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic; not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(body[pos : pos + 4], "little")
    pos += 4
    try:
        header = json.loads(body[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable header ({exc})") from exc
    pos += header_len
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version!r} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION!r})"
        )
    config = UNetConfig(**header["config"])
    model = UNet(config)
    state = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        end = start + entry["nbytes"]
        arr = np.frombuffer(body[start:end], dtype=entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    model.metadata = header.get("metadata", {})
    model.checkpoint_id = hashlib.sha256(raw).hexdigest()[:12]
    return model
