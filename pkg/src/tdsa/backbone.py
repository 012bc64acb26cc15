"""Small VGG-flavored classifier with two feature taps.

Four conv blocks (two conv-bn-relu layers each) with 2x2 max pooling after
blocks one to three.  A 1x1 projection after block three provides the
middle-level tap (stride /4, one channel group per class times the width
multiplier); a second projection after block four provides the high-level
tap (stride /8).  The classifier head is a linear map on globally averaged
high-level features — the auxiliary channel losses never feed it directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import tdsa.tensor as T
from .losses import StageSpec
from .tensor import ContractError, ShapeError, Tape, Tensor4

CKPT_MAGIC = b"TDSACKP1"


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    in_channels: int = 3
    widths: tuple[int, int, int, int] = (32, 64, 128, 128)
    num_classes: int = 8
    xi_high: int = 3
    xi_mult: int = 2

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % 8:
            raise ContractError("image size must be a positive multiple of 8")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ContractError("need four positive block widths")
        if min(self.num_classes, self.xi_high, self.xi_mult, self.in_channels) < 1:
            raise ContractError("classes, channel multipliers, and input "
                                "channels must be positive")

    @property
    def spec_high(self) -> StageSpec:
        return StageSpec(self.num_classes, self.xi_high)

    @property
    def spec_mid(self) -> StageSpec:
        return StageSpec(self.num_classes, self.xi_high * self.xi_mult)

    @property
    def mid_hw(self) -> int:
        return self.image_size // 4

    @property
    def high_hw(self) -> int:
        return self.image_size // 8

    def as_dict(self) -> dict:
        return {"image_size": self.image_size, "in_channels": self.in_channels,
                "widths": list(self.widths), "num_classes": self.num_classes,
                "xi_high": self.xi_high, "xi_mult": self.xi_mult}

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(
            image_size=int(d["image_size"]), in_channels=int(d["in_channels"]),
            widths=tuple(int(v) for v in d["widths"]),
            num_classes=int(d["num_classes"]), xi_high=int(d["xi_high"]),
            xi_mult=int(d["xi_mult"]))


@dataclass
class ModelParams:
    """Named trainable arrays plus batch-norm running statistics."""

    config: BackboneConfig
    arrays: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.arrays.items()},
                           {k: v.copy() for k, v in self.running.items()},
                           self.step)

    def assert_finite(self):
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"parameter {name} went non-finite")


def _conv_names(cfg: BackboneConfig):
    cin = cfg.in_channels
    for b, width in enumerate(cfg.widths, start=1):
        for j in (1, 2):
            yield f"b{b}.c{j}", cin, width
            cin = width


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled normal init for conv/linear, identity batch norm."""
    arrays: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}

    def kaiming(shape, fan_in):
        return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    for name, cin, cout in _conv_names(cfg):
        arrays[f"{name}.w"] = kaiming((cout, cin, 3, 3), cin * 9)
        arrays[f"{name}.gamma"] = np.ones((1, cout, 1, 1), dtype=np.float32)
        arrays[f"{name}.beta"] = np.zeros((1, cout, 1, 1), dtype=np.float32)
        running[f"{name}.mean"] = np.zeros(cout, dtype=np.float32)
        running[f"{name}.var"] = np.ones(cout, dtype=np.float32)

    c_mid = cfg.spec_mid.total_channels
    c_high = cfg.spec_high.total_channels
    arrays["tap_mid.w"] = kaiming((c_mid, cfg.widths[2], 1, 1), cfg.widths[2])
    arrays["tap_high.w"] = kaiming((c_high, cfg.widths[3], 1, 1), cfg.widths[3])
    arrays["head.w"] = kaiming((cfg.num_classes, c_high, 1, 1), c_high)
    arrays["head.b"] = np.zeros((1, cfg.num_classes, 1, 1), dtype=np.float32)
    return ModelParams(cfg, arrays, running)


def leaf_params(tape: Tape, model: ModelParams,
                dtype=None) -> dict[str, Tensor4]:
    """Mount every trainable array on a tape as a gradient leaf."""
    return {name: tape.leaf(arr, dtype=dtype)
            for name, arr in model.arrays.items()}


@dataclass
class ForwardResult:
    F_mid: Tensor4
    F_high: Tensor4
    logits: Tensor4
    batch_stats: dict[str, np.ndarray] = field(default_factory=dict)


def forward(x: Tensor4, params: dict[str, Tensor4], cfg: BackboneConfig,
            train_mode: bool,
            running: dict[str, np.ndarray] | None = None) -> ForwardResult:
    """Run the network; batch-norm state is read-only.

    Train mode normalizes by batch statistics and reports them in
    ``batch_stats`` for the caller to fold into running averages; eval mode
    consumes ``running`` verbatim.
    """
    if x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size,
                                                        cfg.image_size):
        raise ShapeError(f"input {x.shape} does not match configured "
                         f"{cfg.in_channels}x{cfg.image_size}x{cfg.image_size}")
    if not train_mode and running is None:
        raise ContractError("eval-mode forward needs running statistics")
    stats: dict[str, np.ndarray] = {}

    def block_layer(t, name):
        conv = T.conv2d(t, params[f"{name}.w"], pad=1)
        if train_mode:
            out, mean, var = T.batchnorm(conv, params[f"{name}.gamma"],
                                         params[f"{name}.beta"], training=True)
            stats[f"{name}.mean"], stats[f"{name}.var"] = mean, var
        else:
            out, _, _ = T.batchnorm(conv, params[f"{name}.gamma"],
                                    params[f"{name}.beta"], training=False,
                                    running_mean=running[f"{name}.mean"],
                                    running_var=running[f"{name}.var"])
        return T.relu(out)

    def block(t, b):
        t = block_layer(t, f"b{b}.c1")
        return block_layer(t, f"b{b}.c2")

    t = block(x, 1)
    t = T.maxpool2(t)
    t = block(t, 2)
    t = T.maxpool2(t)
    t = block(t, 3)
    # Taps are rectified so the stage features are non-negative activation
    # maps: channel losses and attention read them as evidence intensities.
    F_mid = T.relu(T.conv2d(t, params["tap_mid.w"]))
    t = T.maxpool2(t)
    t = block(t, 4)
    F_high = T.relu(T.conv2d(t, params["tap_high.w"]))
    logits = T.add_channel(T.conv2d(T.gap(F_high), params["head.w"]),
                           params["head.b"])
    return ForwardResult(F_mid, F_high, logits, stats)


def forward_eval(model: ModelParams, x: np.ndarray) -> ForwardResult:
    """Gradient-free eval-mode forward on raw image arrays."""
    params = {name: Tensor4.const(arr) for name, arr in model.arrays.items()}
    return forward(Tensor4.const(np.ascontiguousarray(x, dtype=np.float32)),
                   params, model.config, train_mode=False, running=model.running)


# -- checkpoints ----------------------------------------------------------------


def save_model(path, model: ModelParams) -> None:
    """Single-file checkpoint: JSON manifest + named float32 payloads.

    Arrays are written in sorted-name order and the manifest uses sorted
    keys, so equal models produce identical bytes.
    """
    entries = [("a:" + k, model.arrays[k]) for k in sorted(model.arrays)]
    entries += [("r:" + k, model.running[k]) for k in sorted(model.running)]
    manifest = json.dumps(
        {"config": model.config.as_dict(), "step": model.step,
         "arrays": [[name, list(arr.shape)] for name, arr in entries]},
        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> ModelParams:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint (bad magic)")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode())
        arrays, running = {}, {}
        for name, shape in manifest["arrays"]:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = f.read(4 * count)
            if len(payload) != 4 * count:
                raise ContractError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            if name.startswith("a:"):
                arrays[name[2:]] = arr
            elif name.startswith("r:"):
                running[name[2:]] = arr
            else:
                raise ContractError(f"{path}: unknown array kind {name!r}")
        if f.read(1):
            raise ContractError(f"{path}: trailing bytes after payload")
    cfg = BackboneConfig.from_dict(manifest["config"])
    return ModelParams(cfg, arrays, running, step=int(manifest["step"]))
