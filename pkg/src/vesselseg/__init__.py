"""Vessel segmentation toolkit for infra-red SLO retinal images."""

__version__ = "0.1.0"

from .dataio import (  # noqa: F401
    DatasetSplit,
    SLOImage,
    VesselMask,
    WindowSample,
    load_image,
    load_mask,
    load_pair,
    make_split,
    sample_windows,
)
from .augment import AugmentationPlan, AugmentationSpec, apply_plan, sample_plan  # noqa: F401
from .model import UNet, UNetConfig, build_unet, load_checkpoint, save_checkpoint  # noqa: F401
from .train import LossParams, TrainConfig, dice_focal_loss, run_training  # noqa: F401
from .evaluation import (  # noqa: F401
    ConfusionCounts,
    EvalReport,
    best_f1_threshold,
    confusion,
    evaluate,
    pr_with_auprc,
    roc_with_auc,
)
from .inference import (  # noqa: F401
    ProbabilityMap,
    TilingPolicy,
    binarize,
    segment_full,
    segment_tiled,
)
from .vmetrics import VascularMetrics, compute_metrics, fractal_dimension, vessel_density  # noqa: F401
