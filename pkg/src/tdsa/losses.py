"""Channel-constrained classification losses with top-down spatial gating.

Feature channels are divided into S contiguous groups of xi channels,
group i belonging to class i.  Per stage:

    discriminality = batch-mean cross entropy over the per-class pooled
                     responses  g_i = GAP( max over the group's channels
                     of the mask-gated features )
    diversity      = batch/group mean of  h_i = sum over positions of the
                     channel-max of the spatially softmaxed group
    stage loss     = discriminality - lambda * diversity

The two-stage objective gates the middle-level features by
sigmoid(upsampled, channel-repeated high-level features), applies the
stage loss at both levels, and adds mu times their sum to the classifier
cross entropy.

All loss components are batch means.  Channel masks are sampled once per
stage per training step, shared across the batch.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .resample import METHODS, channel_repeat, upsample
from .tensor import ContractError, ShapeError, Tensor4

MASK_MODES = ("train-random", "all-ones")


@dataclass(frozen=True)
class StageSpec:
    """Channel grouping for one feature stage: S classes, xi channels each.

    Group i occupies the contiguous channel range [i*xi, (i+1)*xi).
    """

    num_classes: int
    channels_per_class: int

    def __post_init__(self):
        if self.num_classes < 1 or self.channels_per_class < 1:
            raise ContractError("StageSpec fields must be positive")

    @property
    def total_channels(self) -> int:
        return self.num_classes * self.channels_per_class


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters and gating switches."""

    mu: float = 1.5
    lam: float = 10.0
    upsample_method: str = "bilinear"
    detach_attention: bool = False
    mask_mode: str = "train-random"

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ContractError("mu and lambda must be non-negative")
        if self.upsample_method not in METHODS:
            raise ContractError(f"unknown upsample method {self.upsample_method!r}")
        if self.mask_mode not in MASK_MODES:
            raise ContractError(f"unknown mask mode {self.mask_mode!r}")


BREAKDOWN_FIELDS = ("ce", "dis_high", "div_high", "mc_high",
                    "dis_mid", "div_mid", "mc_mid", "tdsa", "total")

CSV_HEADER = "step," + ",".join(BREAKDOWN_FIELDS)


@dataclass
class LossBreakdown:
    """Per-component loss values for one step or one epoch average."""

    ce: float = 0.0
    dis_high: float = 0.0
    div_high: float = 0.0
    mc_high: float = 0.0
    dis_mid: float = 0.0
    div_mid: float = 0.0
    mc_mid: float = 0.0
    tdsa: float = 0.0
    total: float = 0.0

    def csv_row(self, step: int) -> str:
        vals = ",".join(repr(getattr(self, f)) for f in BREAKDOWN_FIELDS)
        return f"{step},{vals}"

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sample_cwa_masks(spec: StageSpec, rng: np.random.Generator) -> np.ndarray:
    """One 0-1 mask vector per class group, floor(xi/2) zeros each.

    Zero positions are chosen uniformly and independently per group;
    xi = 1 yields the all-ones mask.  Returns an (S, xi) float array.
    """
    xi = spec.channels_per_class
    masks = np.ones((spec.num_classes, xi), dtype=np.float64)
    zeros = xi // 2
    if zeros:
        for i in range(spec.num_classes):
            masks[i, rng.choice(xi, size=zeros, replace=False)] = 0.0
    return masks


def all_ones_masks(spec: StageSpec) -> np.ndarray:
    return np.ones((spec.num_classes, spec.channels_per_class), dtype=np.float64)


def ccmp(group: Tensor4) -> Tensor4:
    """Cross-channel max pooling: positionwise max over all channels of the
    slice, yielding a single channel."""
    return T.channel_group_max(group, group.c)


def _check_stage(F: Tensor4, spec: StageSpec, op: str):
    if F.c != spec.total_channels:
        raise ShapeError(f"{op}: expected {spec.total_channels} channels "
                         f"({spec.num_classes} x {spec.channels_per_class}), got {F.c}")


def _apply_masks(F: Tensor4, spec: StageSpec, masks: np.ndarray) -> Tensor4:
    if masks.shape != (spec.num_classes, spec.channels_per_class):
        raise ShapeError(f"mask set must be (S, xi) = "
                         f"({spec.num_classes}, {spec.channels_per_class}), got {masks.shape}")
    vec = masks.reshape(1, spec.total_channels, 1, 1).astype(F.dtype)
    return T.mul_channel(F, Tensor4.const(vec))


def discriminality_loss(F: Tensor4, y: np.ndarray, spec: StageSpec,
                        masks: np.ndarray | None = None) -> Tensor4:
    """Cross entropy over per-class pooled channel responses.

    g_i = GAP(CCMP(M_i * F_i)) collapses group i to one score; the S
    scores are softmaxed against the labels, batch-mean reduced.
    """
    _check_stage(F, spec, "discriminality_loss")
    gated = _apply_masks(F, spec, masks) if masks is not None else F
    pooled = T.gap(T.channel_group_max(gated, spec.channels_per_class))
    return T.softmax_cross_entropy(pooled, y)


def diversity_loss(F: Tensor4, spec: StageSpec) -> Tensor4:
    """Mean over groups and batch of the spatial spread score h_i.

    h_i sums, over positions, the channel-max of the spatially softmaxed
    group; it ranges from 1 (all channels alike) to min(xi, h*w).
    """
    _check_stage(F, spec, "diversity_loss")
    peaked = T.channel_group_max(T.spatial_softmax(F), spec.channels_per_class)
    return T.mean_all(T.spatial_sum(peaked))


def mc_loss(F: Tensor4, y: np.ndarray, spec: StageSpec, lam: float,
            masks: np.ndarray | None = None) -> Tensor4:
    """Stage loss: discriminality - lambda * diversity."""
    node, _, _ = _mc_parts(F, y, spec, lam, masks)
    return node


def _mc_parts(F, y, spec, lam, masks):
    dis = discriminality_loss(F, y, spec, masks)
    div = diversity_loss(F, spec)
    return T.sub(dis, T.affine(div, lam)), dis, div


def tdsa_attention(F_l: Tensor4, F_h: Tensor4, repeat: int, method: str,
                   detach: bool = False) -> Tensor4:
    """Gate middle-level features by upsampled high-level activations.

    F_h is upsampled to F_l's spatial size, each channel repeated
    ``repeat`` times consecutively, squashed through a sigmoid, and
    multiplied elementwise into F_l.  With ``detach`` the gate is treated
    as a constant so no gradient reaches F_h through this path.
    """
    if F_h.c * repeat != F_l.c:
        raise ShapeError(f"channel ratio mismatch: {F_h.c} high channels x repeat "
                         f"{repeat} != {F_l.c} middle channels")
    if F_l.h < F_h.h or F_l.w < F_h.w:
        raise ShapeError(f"middle spatial {F_l.h}x{F_l.w} smaller than "
                         f"high {F_h.h}x{F_h.w}")
    src = T.stop_gradient(F_h) if detach else F_h
    gate = T.sigmoid(channel_repeat(upsample(src, method, F_l.h, F_l.w), repeat))
    return T.elementwise_mul(F_l, gate)


def tdsa_loss(F_h: Tensor4, F_l: Tensor4, y: np.ndarray,
              spec_h: StageSpec, spec_l: StageSpec, cfg: LossConfig,
              rng: np.random.Generator | None = None,
              masks_h: np.ndarray | None = None,
              masks_l: np.ndarray | None = None) -> tuple[Tensor4, LossBreakdown]:
    """Two-stage loss: MC on F_h plus MC on the attention-gated F_l.

    Masks are sampled independently per stage from ``rng`` unless given
    explicitly (or the config says all-ones).  Returns the scalar node and
    a breakdown holding the stage components (ce/total left at 0).
    """
    if spec_h.num_classes != spec_l.num_classes:
        raise ContractError(f"stage class counts differ: {spec_h.num_classes} "
                            f"vs {spec_l.num_classes}")
    if spec_l.channels_per_class % spec_h.channels_per_class != 0:
        raise ContractError("middle xi must be an integer multiple of high xi")
    repeat = spec_l.channels_per_class // spec_h.channels_per_class
    _check_stage(F_h, spec_h, "tdsa_loss[high]")
    _check_stage(F_l, spec_l, "tdsa_loss[mid]")

    if masks_h is None:
        masks_h = _stage_masks(spec_h, cfg, rng)
    if masks_l is None:
        masks_l = _stage_masks(spec_l, cfg, rng)

    F_l_gated = tdsa_attention(F_l, F_h, repeat, cfg.upsample_method,
                               cfg.detach_attention)
    mc_h, dis_h, div_h = _mc_parts(F_h, y, spec_h, cfg.lam, masks_h)
    mc_l, dis_l, div_l = _mc_parts(F_l_gated, y, spec_l, cfg.lam, masks_l)
    node = T.add(mc_h, mc_l)
    bd = LossBreakdown(
        dis_high=dis_h.item(), div_high=div_h.item(), mc_high=mc_h.item(),
        dis_mid=dis_l.item(), div_mid=div_l.item(), mc_mid=mc_l.item(),
        tdsa=node.item(),
    )
    return node, bd


def _stage_masks(spec, cfg, rng):
    if cfg.mask_mode == "all-ones":
        return all_ones_masks(spec)
    if rng is None:
        raise ContractError("train-random mask mode needs an rng")
    return sample_cwa_masks(spec, rng)


def total_loss(logits: Tensor4, F_h: Tensor4, F_l: Tensor4, y: np.ndarray,
               spec_h: StageSpec, spec_l: StageSpec, cfg: LossConfig,
               rng: np.random.Generator | None = None,
               masks_h: np.ndarray | None = None,
               masks_l: np.ndarray | None = None) -> tuple[Tensor4, LossBreakdown]:
    """Classifier cross entropy plus mu times the two-stage loss.

    mu = 0 is the plain-CE baseline: the channel losses are skipped
    entirely and reported as zero.
    """
    ce = T.softmax_cross_entropy(logits, y)
    if cfg.mu == 0.0:
        bd = LossBreakdown(ce=ce.item(), total=ce.item())
        return ce, bd
    node, bd = tdsa_loss(F_h, F_l, y, spec_h, spec_l, cfg, rng, masks_h, masks_l)
    tot = T.add(ce, T.affine(node, cfg.mu))
    bd.ce = ce.item()
    bd.total = tot.item()
    return tot, bd


def write_breakdown_csv(rows: list[tuple[int, LossBreakdown]]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for step, bd in rows:
        buf.write(bd.csv_row(step) + "\n")
    return buf.getvalue()
