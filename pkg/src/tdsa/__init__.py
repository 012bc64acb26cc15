"""Top-down spatial attention training on a numpy autodiff core."""

from .losses import (
    BREAKDOWN_FIELDS,
    CSV_HEADER,
    LossBreakdown,
    LossConfig,
    StageSpec,
    all_ones_masks,
    diversity_loss,
    discriminality_loss,
    mc_loss,
    sample_cwa_masks,
    tdsa_attention,
    tdsa_loss,
    total_loss,
)
from .resample import METHODS, channel_repeat, resize_image_np, upsample
from .tensor import (
    ContractError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor4,
    load_tensor4,
    save_tensor4,
)

__version__ = "0.1.0"

__all__ = [
    "BREAKDOWN_FIELDS",
    "CSV_HEADER",
    "ContractError",
    "LossBreakdown",
    "LossConfig",
    "METHODS",
    "NonFiniteError",
    "ShapeError",
    "StageSpec",
    "Tape",
    "Tensor4",
    "all_ones_masks",
    "channel_repeat",
    "discriminality_loss",
    "diversity_loss",
    "load_tensor4",
    "mc_loss",
    "resize_image_np",
    "sample_cwa_masks",
    "save_tensor4",
    "tdsa_attention",
    "tdsa_loss",
    "total_loss",
    "upsample",
    "__version__",
]
