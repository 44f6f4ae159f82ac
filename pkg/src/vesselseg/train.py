"""Dice Focal loss and the two-phase Adam training loop.

The loss is the weighted sum of a batch-pooled soft Dice loss and a focal
cross-entropy:

    DiceLoss  = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
    FocalLoss = mean(-(1 - p_t)^gamma * log(p_t)),  p_t = p if g=1 else 1-p
    loss      = lambda_dice * DiceLoss + lambda_focal * FocalLoss

Probabilities are clamped to [prob_clip, 1 - prob_clip] inside the focal
term only; the Dice term sees raw probabilities so its value matches the
plain formula exactly.

Each epoch draws fresh windows from every training image, augments each
window with its own randomly sampled plan, and iterates the pool in
shuffled mini-batches. Validation images are forwarded whole (padded the
same way as inference) for a monitoring loss; no early stopping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import inference
from .augment import AugmentationSpec, apply_plan, sample_plan
from .dataio import SLOImage, VesselMask, DatasetSplit, sample_windows
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .model import UNet, UNetConfig, build_unet, save_checkpoint


@dataclass(frozen=True)
class LossParams:
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    gamma: float = 2.0
    epsilon: float = 1.0
    prob_clip: float = 1e-7

    def __post_init__(self):
        if self.lambda_dice < 0 or self.lambda_focal < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.lambda_dice + self.lambda_focal <= 0:
            raise ConfigurationError("at least one loss weight must be positive")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.prob_clip < 0.5:
            raise ConfigurationError(f"prob_clip must be in (0, 0.5), got {self.prob_clip}")


def dice_focal_loss(probs: torch.Tensor, targets: torch.Tensor,
                    params: LossParams = LossParams()) -> torch.Tensor:
    """Differentiable Dice Focal loss over all pixels pooled per batch."""
    if probs.shape != targets.shape:
        raise ContractError(
            f"probs shape {tuple(probs.shape)} != targets shape {tuple(targets.shape)}"
        )
    g = targets.to(probs.dtype)

    inter = (probs * g).sum()
    denom = probs.sum() + g.sum()
    dice = 1.0 - (2.0 * inter + params.epsilon) / (denom + params.epsilon)

    pc = probs.clamp(params.prob_clip, 1.0 - params.prob_clip)
    pt = pc * g + (1.0 - pc) * (1.0 - g)
    focal = (-(1.0 - pt) ** params.gamma * torch.log(pt)).mean()

    return params.lambda_dice * dice + params.lambda_focal * focal


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 600
    phases: tuple[tuple[int, float], ...] = ((300, 1e-3), (300, 1e-4))
    batch_size: int = 20
    windows_per_image: int = 20
    window_width: int = 320
    window_height: int = 240
    loss: LossParams = field(default_factory=LossParams)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    split_seed: int = 0
    init_seed: int = 0
    sampling_seed: int = 0
    model_depth: int = 4
    model_base_channels: int = 16
    model_up_mode: str = "transpose"
    checkpoint_every: int = 50
    out_dir: Path | None = None

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        phase_sum = sum(e for e, _ in self.phases)
        if phase_sum != self.total_epochs:
            raise ConfigurationError(
                f"phase epochs sum to {phase_sum}, expected total_epochs = {self.total_epochs}"
            )
        if any(e < 1 or lr <= 0 for e, lr in self.phases):
            raise ConfigurationError("every phase needs epochs >= 1 and lr > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.windows_per_image < 1:
            raise ConfigurationError("windows_per_image must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        upto = 0
        for epochs, lr in self.phases:
            upto += epochs
            if epoch <= upto:
                return lr
        return self.phases[-1][1]

    def phase_boundaries(self) -> set[int]:
        bounds, upto = set(), 0
        for epochs, _ in self.phases:
            upto += epochs
            bounds.add(upto)
        return bounds


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float  # NaN when there is no validation set
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def write_csv(self, path) -> None:
        lines = ["epoch,lr,train_loss,val_loss,seconds"]
        for e in self.epochs:
            val = "" if np.isnan(e.val_loss) else f"{e.val_loss:.9g}"
            lines.append(f"{e.epoch},{e.lr:.9g},{e.train_loss:.9g},{val},{e.seconds:.3f}")
        Path(path).write_text("\n".join(lines) + "\n")


def _validation_loss(model: UNet, pairs, params: LossParams) -> float:
    if not pairs:
        return float("nan")
    losses = []
    for image, mask in pairs:
        pmap = inference.segment_full(model, image)
        p = torch.from_numpy(pmap.values)
        g = torch.from_numpy(mask.labels.astype(np.float32))
        losses.append(float(dice_focal_loss(p, g, params)))
    return float(np.mean(losses))


def run_training(
    config: TrainConfig,
    split: DatasetSplit,
    data: dict[str, tuple[SLOImage, VesselMask]],
    on_epoch_end=None,
    window_probe=None,
) -> tuple[UNet, TrainHistory]:
    """Train a fresh U-Net per the phase schedule; returns (model, history).

    `data` maps sample ids to loaded (image, mask) pairs and must cover every
    id in the split. `on_epoch_end(model, stats)` is an optional monitoring
    hook; returning True stops training early. `window_probe(epoch, origins)`
    receives the list of (source_id, origin_x, origin_y) drawn that epoch.
    """
    if not split.train_ids:
        raise ConfigurationError("training split is empty")
    missing = [i for i in (*split.train_ids, *split.val_ids) if i not in data]
    if missing:
        raise ConfigurationError(f"split ids missing from loaded data: {missing}")

    rng = np.random.default_rng(config.sampling_seed)
    model = build_unet(UNetConfig(
        depth=config.model_depth,
        base_channels=config.model_base_channels,
        init_seed=config.init_seed,
        up_mode=config.model_up_mode,
    ))
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.phases[0][1],
                                 betas=(0.9, 0.999), eps=1e-8)
    val_pairs = [data[i] for i in split.val_ids]
    history = TrainHistory()
    out_dir = Path(config.out_dir) if config.out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    boundaries = config.phase_boundaries()

    for epoch in range(1, config.total_epochs + 1):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        windows = []
        for sid in split.train_ids:
            image, mask = data[sid]
            for w in sample_windows(image, mask, config.windows_per_image,
                                    config.window_width, config.window_height, rng):
                if config.augmentation.enabled:
                    w = apply_plan(sample_plan(config.augmentation, rng), w)
                windows.append(w)
        if window_probe is not None:
            window_probe(epoch, [(w.source_id, w.origin_x, w.origin_y) for w in windows])

        order = rng.permutation(len(windows))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = torch.from_numpy(np.stack([windows[i].image_patch for i in idx])[:, None])
            g = torch.from_numpy(
                np.stack([windows[i].mask_patch for i in idx]).astype(np.float32))
            probs = model(x)
            loss = dice_focal_loss(probs, g, config.loss)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))

        model.eval()
        val_loss = _validation_loss(model, val_pairs, config.loss)
        model.train()

        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(batch_losses)),
            val_loss=val_loss,
            seconds=time.perf_counter() - t0,
        )
        history.epochs.append(stats)

        if out_dir is not None and (
            epoch % config.checkpoint_every == 0 or epoch in boundaries
        ):
            save_checkpoint(model, _metadata(config, epoch), out_dir / f"ckpt_epoch_{epoch:04d}.ckpt")

        if on_epoch_end is not None and on_epoch_end(model, stats):
            break

    model.eval()
    return model, history


def _metadata(config: TrainConfig, epochs_completed: int) -> dict:
    return {
        "epochs_completed": epochs_completed,
        "seeds": {
            "split": config.split_seed,
            "init": config.init_seed,
            "sampling": config.sampling_seed,
        },
        "loss": {
            "lambda_dice": config.loss.lambda_dice,
            "lambda_focal": config.loss.lambda_focal,
            "gamma": config.loss.gamma,
            "epsilon": config.loss.epsilon,
            "prob_clip": config.loss.prob_clip,
        },
    }
