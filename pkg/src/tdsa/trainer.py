"""SGD training loop with momentum, milestone lr decay, and deterministic
seeding, plus the evaluation probes used by the acceptance harness.

Beyond plain top-1 accuracy, :func:`evaluate` reports two alignment
measures: classification by argmax over per-class pooled high-level channel
responses (did channel groups become category-aligned?), and the fraction
of true-class middle-level activation mass falling inside the dataset's
ground-truth region masks (did attention concentrate on the parts?).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import tdsa.tensor as T
from .backbone import (
    BackboneConfig,
    ForwardResult,
    ModelParams,
    forward,
    forward_eval,
    init_params,
    leaf_params,
)
from .datagen import Dataset
from .losses import (
    BREAKDOWN_FIELDS,
    CSV_HEADER,
    LossBreakdown,
    LossConfig,
    tdsa_attention,
    total_loss,
)
from .resample import resize_image_np
from .tensor import ContractError, NonFiniteError, Tensor4, save_tensor4

RUNNING_MOMENTUM = 0.1
METRICS_HEADER = CSV_HEADER + ",test_acc,align_acc,containment"


class TrainingDiverged(FloatingPointError):
    """Training produced non-finite values; the message names the step."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.1
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (30, 45)
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    hflip: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch size must be positive")
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])):
            raise ContractError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ContractError("milestones must lie before the last epoch")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base lr times decay^(milestones reached by this epoch)."""
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr * cfg.lr_decay ** passed


@dataclass
class EvalMetrics:
    accuracy: float
    alignment_accuracy: float
    containment: float  # nan when the dataset carries no region masks


@dataclass
class Metrics:
    rows: list[dict] = field(default_factory=list)
    final: EvalMetrics | None = None

    def write_csv(self, path) -> None:
        lines = [METRICS_HEADER]
        for row in self.rows:
            cells = [str(row["step"])]
            cells += [repr(float(row[k])) for k in BREAKDOWN_FIELDS]
            cells += [repr(float(row[k]))
                      for k in ("test_acc", "align_acc", "containment")]
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")


def _check_dataset(ds: Dataset, cfg: BackboneConfig, what: str):
    if len(ds) == 0:
        raise ContractError(f"{what} dataset is empty")
    if ds.labels.min() < 0 or ds.labels.max() >= cfg.num_classes:
        raise ContractError(f"{what} labels exceed {cfg.num_classes} classes")
    if ds.images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ContractError(f"{what} images {ds.images.shape[1:]} do not match "
                            f"the configured input size")


def train(datasets: dict[str, Dataset], cfg: TrainConfig,
          out_dir=None) -> tuple[ModelParams, Metrics]:
    """Run the full schedule; returns the trained model and per-epoch metrics.

    Deterministic per seed: shuffling, mask sampling, and flip decisions all
    derive from ``cfg.seed``.  Non-finite values anywhere in a step abort
    with :class:`TrainingDiverged` and, when the stage tensors exist, a
    diagnostic dump (replayable by the self-test) naming the offending step.
    """
    train_ds = datasets["train"]
    test_ds = datasets.get("test")
    bb = cfg.backbone
    _check_dataset(train_ds, bb, "train")
    if test_ds is not None:
        _check_dataset(test_ds, bb, "test")

    model = init_params(bb, np.random.default_rng([cfg.seed, 1]))
    rng_shuffle = np.random.default_rng([cfg.seed, 2])
    rng_masks = np.random.default_rng([cfg.seed, 3])
    rng_flip = np.random.default_rng([cfg.seed, 4])
    velocity = {k: np.zeros_like(v) for k, v in model.arrays.items()}
    metrics = Metrics()

    for epoch in range(cfg.epochs):
        lr = np.float32(lr_at(epoch, cfg))
        order = rng_shuffle.permutation(len(train_ds))
        sums = dict.fromkeys(BREAKDOWN_FIELDS, 0.0)
        steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            x = train_ds.images[batch]
            y = train_ds.labels[batch]
            if cfg.hflip:
                flip = rng_flip.random(len(batch)) < 0.5
                x = x.copy()
                x[flip] = x[flip, :, :, ::-1]

            tape = T.Tape()
            params = leaf_params(tape, model)
            out = bd = failure = None
            try:
                out = forward(tape.leaf(x.astype(np.float32),
                                        requires_grad=False),
                              params, bb, train_mode=True)
                node, bd = total_loss(out.logits, out.F_high, out.F_mid, y,
                                      bb.spec_high, bb.spec_mid, cfg.loss,
                                      rng=rng_masks)
                if not math.isfinite(bd.total):
                    failure = f"non-finite loss: {bd}"
            except NonFiniteError as e:
                # The tensor core rejects NaN/Inf at the op that produced it,
                # so anything dumped below is finite and replayable.
                failure = str(e)
            if failure is not None:
                _dump_divergence(out_dir, out, y, bd, failure)
                raise TrainingDiverged(
                    f"training diverged at step {model.step} "
                    f"(epoch {epoch}, batch index {lo // cfg.batch_size}): "
                    f"{failure}")
            tape.backward(node)

            for name, leaf in params.items():
                g = tape.grad(leaf)
                w = model.arrays[name]
                if cfg.weight_decay and name.endswith(".w"):
                    g = g + np.float32(cfg.weight_decay) * w
                v = velocity[name]
                v *= np.float32(cfg.momentum)
                v += g
                w -= lr * v
            for name, stat in out.batch_stats.items():
                run = model.running[name]
                run *= np.float32(1 - RUNNING_MOMENTUM)
                run += np.float32(RUNNING_MOMENTUM) * stat.astype(np.float32)
            model.step += 1
            steps += 1
            for k in BREAKDOWN_FIELDS:
                sums[k] += getattr(bd, k)

        try:
            model.assert_finite()
        except FloatingPointError as e:
            raise TrainingDiverged(
                f"training diverged during epoch {epoch}: {e}") from e
        row = {"step": epoch}
        row.update({k: sums[k] / steps for k in BREAKDOWN_FIELDS})
        try:
            # finite weights can still overflow the eval forward pass once
            # the running statistics blow up, so this is a divergence too
            ev = (evaluate(model, test_ds, cfg.batch_size)
                  if test_ds is not None
                  else EvalMetrics(float("nan"), float("nan"), float("nan")))
        except NonFiniteError as e:
            raise TrainingDiverged(
                f"training diverged during epoch {epoch} evaluation: {e}") from e
        row.update(test_acc=ev.accuracy, align_acc=ev.alignment_accuracy,
                   containment=ev.containment)
        metrics.rows.append(row)
        metrics.final = ev
    return model, metrics


def _dump_divergence(out_dir, out: ForwardResult | None, y: np.ndarray,
                     bd: LossBreakdown | None, failure: str):
    if out_dir is None:
        return
    dump = Path(out_dir) / "nan_dump"
    dump.mkdir(parents=True, exist_ok=True)
    note = failure if bd is None else f"{failure}\n{bd!r}"
    (dump / "breakdown.txt").write_text(note + "\n")
    if out is None:  # the forward pass itself died; no stage tensors exist
        return
    save_tensor4(dump / "logits.t4", Tensor4.const(out.logits.data))
    save_tensor4(dump / "f_high.t4", Tensor4.const(out.F_high.data))
    save_tensor4(dump / "f_mid.t4", Tensor4.const(out.F_mid.data))
    save_tensor4(dump / "labels.t4", Tensor4.const(
        y.reshape(-1, 1, 1, 1).astype(np.float32)))


# -- evaluation -------------------------------------------------------------------


def group_scores(F_high: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class pooled channel response: GAP of the positionwise group max."""
    n, c, h, w = F_high.shape
    xi = c // num_classes
    grouped = F_high.reshape(n, num_classes, xi, h, w)
    return grouped.max(axis=2).mean(axis=(2, 3))


def containment_fraction(F_mid: np.ndarray, labels: np.ndarray,
                         region_masks: np.ndarray, num_classes: int) -> float:
    """Mean fraction of true-class activation mass inside the region mask.

    Masks are area-averaged down to feature resolution, so a uniform
    activation map scores exactly the mask's area fraction.
    """
    n, c, h, w = F_mid.shape
    xi = c // num_classes
    total = 0.0
    for i in range(n):
        soft = resize_image_np(region_masks[i][None].astype(np.float64), h, w,
                               "bilinear")[0]
        group = np.abs(F_mid[i, labels[i] * xi:(labels[i] + 1) * xi])
        mass = group.sum()
        total += float((group * soft).sum() / mass) if mass > 0 else 0.0
    return total / n


def evaluate(model: ModelParams, ds: Dataset,
             batch_size: int = 64) -> EvalMetrics:
    """Top-1 accuracy, channel-alignment accuracy, attention containment.

    Containment is measured on the attention-gated middle-level features —
    the middle-level maps as the model actually weights them, with the
    high-level proposals folded in — so it reflects where the network's
    attention lands, not just where raw filters fire.  The gate always uses
    bilinear upsampling so the probe is comparable across models regardless
    of the training-time method.
    """
    bb = model.config
    _check_dataset(ds, bb, "eval")
    hits = align_hits = 0
    contain_sum = 0.0
    contain_n = 0
    for lo in range(0, len(ds), batch_size):
        x = ds.images[lo:lo + batch_size]
        y = ds.labels[lo:lo + batch_size]
        out = forward_eval(model, x)
        pred = out.logits.data.reshape(len(y), -1).argmax(axis=1)
        hits += int((pred == y).sum())
        align = group_scores(out.F_high.data.astype(np.float64),
                             bb.num_classes).argmax(axis=1)
        align_hits += int((align == y).sum())
        if ds.region_masks is not None:
            gated = tdsa_attention(out.F_mid, out.F_high, bb.xi_mult,
                                   "bilinear")
            contain_sum += containment_fraction(
                gated.data.astype(np.float64), y,
                ds.region_masks[lo:lo + batch_size], bb.num_classes) * len(y)
            contain_n += len(y)
    n = len(ds)
    return EvalMetrics(
        accuracy=hits / n,
        alignment_accuracy=align_hits / n,
        containment=contain_sum / contain_n if contain_n else float("nan"))
