"""Command-line interface: one executable, six workflows.

``selftest`` and ``gradcheck`` exercise the numerical checks, ``gen-data``
materializes a synthetic benchmark tree, ``train``/``eval`` run the training
loop and scoring, and ``visualize`` exports per-class channel heatmaps.

Exit codes: 0 success, 1 check failure (failed suite, diverged run),
2 usage error (bad flags, bad config, bad class id, missing checkpoint),
3 I/O error (unreadable dataset, unwritable output).

A ``--config`` file holds flat ``key = value`` lines whose keys mirror the
command-line flags (plus the training/generation keys documented in the
README); explicit flags always win over file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import netpbm
from .backbone import BackboneConfig, forward_eval, load_model, save_model
from .datagen import SyntheticSpec, generate, load_dataset, save_dataset
from .losses import LossConfig
from .netpbm import NetpbmError
from .resample import METHODS, upsample
from .selftest import backbone_gradcheck, replay_equivalence, run_all, suite_gradcheck
from .tensor import ContractError, ShapeError, Tensor4, save_tensor4
from .trainer import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_IO = 3


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""


# -- config file ------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys use - or _."""
    entries: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip().lower().replace("-", "_")] = value.strip()
    return entries


class Settings:
    """Layered lookup: explicit flag, then config file, then default."""

    def __init__(self, args: argparse.Namespace, allowed: dict[str, object]):
        self.args = args
        self.allowed = allowed
        self.file: dict[str, str] = {}
        if getattr(args, "config", None):
            self.file = read_config_file(args.config)
            unknown = sorted(set(self.file) - set(allowed))
            if unknown:
                raise ConfigError(
                    f"unknown config keys: {', '.join(unknown)} "
                    f"(known: {', '.join(sorted(allowed))})")

    def get(self, key: str, default):
        parse = self.allowed[key]
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file:
            raw = self.file[key]
            try:
                return parse(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        return default


#: keys every command accepts (mirroring the shared flags)
COMMON_KEYS: dict[str, object] = {
    "seed": int,
    "upsample": str,
    "xi": int,
    "mu": float,
    "lam": float,
}

GEN_KEYS: dict[str, object] = {
    **COMMON_KEYS,
    "classes": int,
    "train_per_class": int,
    "test_per_class": int,
    "image_size": int,
    "global_vocab": int,
    "local_vocab": int,
    "sigma": float,
    "delta": float,
    "clutter": int,
    "part_size": int,
    "patch_size": int,
}

TRAIN_KEYS: dict[str, object] = {
    **COMMON_KEYS,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_decay": float,
    "weight_decay": float,
    "momentum": float,
    "milestones": _parse_ints,
    "hflip": _parse_bool,
    "widths": _parse_ints,
    "xi_high": int,
}


# -- commands ---------------------------------------------------------------------


def _print_suites(results) -> int:
    for r in results:
        print(r.line())
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} suites passed")
    return EXIT_OK if passed == len(results) else EXIT_CHECK


def cmd_selftest(args: argparse.Namespace, settings: Settings) -> int:
    seed = settings.get("seed", 0)
    results = run_all(seed=seed, equivalence_cases=args.equivalence_cases,
                      corrupt_lambda_sign=args.corrupt_lambda_sign)
    if args.replay:
        cfg = LossConfig(mu=settings.get("mu", 1.5),
                         lam=settings.get("lam", 10.0),
                         upsample_method=settings.get("upsample", "bilinear"),
                         mask_mode="all-ones")
        results = list(results) + [replay_equivalence(args.replay, cfg)]
    return _print_suites(results)


def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> int:
    seed = settings.get("seed", None)
    suites = [suite_gradcheck() if seed is None else suite_gradcheck(seed),
              backbone_gradcheck() if seed is None else backbone_gradcheck(seed)]
    return _print_suites(suites)


def cmd_gen_data(args: argparse.Namespace, settings: Settings) -> int:
    spec = SyntheticSpec(
        num_classes=settings.get("classes", 8),
        train_per_class=settings.get("train_per_class", 100),
        test_per_class=settings.get("test_per_class", 50),
        image_size=settings.get("image_size", SyntheticSpec.image_size),
        global_vocab=settings.get("global_vocab", 4),
        local_vocab=settings.get("local_vocab", 2),
        noise_sigma=settings.get("sigma", SyntheticSpec.noise_sigma),
        texture_delta=settings.get("delta", SyntheticSpec.texture_delta),
        clutter=settings.get("clutter", SyntheticSpec.clutter),
        part_size=settings.get("part_size", None),
        patch_size=settings.get("patch_size", None),
        seed=settings.get("seed", 0),
    )
    written = save_dataset(args.out, generate(spec))
    print(f"wrote {written} images ({spec.num_classes} classes) under {args.out}")
    return EXIT_OK


def _load_tree(path: str, image_size: int | None = None):
    try:
        return load_dataset(path, image_size=image_size)
    except (ContractError, NetpbmError, OSError) as exc:
        raise OSError(f"cannot load dataset {path}: {exc}") from exc


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    datasets = _load_tree(args.data)
    sample = datasets["train"].images
    backbone = BackboneConfig(
        image_size=sample.shape[-1],
        in_channels=sample.shape[1],
        widths=tuple(settings.get("widths", BackboneConfig.widths)),
        num_classes=datasets["train"].num_classes,
        xi_high=settings.get("xi_high", BackboneConfig.xi_high),
        xi_mult=settings.get("xi", BackboneConfig.xi_mult),
    )
    mu = settings.get("mu", LossConfig.mu)
    loss = LossConfig(
        mu=mu, lam=settings.get("lam", LossConfig.lam),
        upsample_method=settings.get("upsample", LossConfig.upsample_method),
        mask_mode="all-ones" if mu == 0.0 else "train-random")
    cfg = TrainConfig(
        epochs=settings.get("epochs", TrainConfig.epochs),
        batch_size=settings.get("batch_size", TrainConfig.batch_size),
        lr=settings.get("lr", TrainConfig.lr),
        lr_decay=settings.get("lr_decay", TrainConfig.lr_decay),
        milestones=tuple(settings.get("milestones", TrainConfig.milestones)),
        weight_decay=settings.get("weight_decay", TrainConfig.weight_decay),
        momentum=settings.get("momentum", TrainConfig.momentum),
        seed=settings.get("seed", TrainConfig.seed),
        hflip=settings.get("hflip", TrainConfig.hflip),
        loss=loss,
        backbone=backbone,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, metrics = train(datasets, cfg, out_dir=out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK
    metrics.write_csv(out / "metrics.csv")
    save_model(out / "model.ckpt", model)
    from .report import save_training_curves
    save_training_curves(metrics.rows, out / "loss_curves.png")
    final = metrics.final
    print(f"final: test_acc={final.accuracy:.4f} "
          f"align_acc={final.alignment_accuracy:.4f} "
          f"containment={final.containment:.4f}")
    print(f"outputs under {out}: metrics.csv model.ckpt loss_curves.png")
    return EXIT_OK


def _load_checkpoint(path: str):
    ckpt = Path(path)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    return load_model(ckpt)


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    model = _load_checkpoint(args.checkpoint)
    datasets = _load_tree(args.data, image_size=model.config.image_size)
    if args.split not in datasets:
        raise ConfigError(f"split {args.split!r} not present in {args.data} "
                          f"(have: {', '.join(sorted(datasets))})")
    ev = evaluate(model, datasets[args.split])
    print(f"split={args.split} accuracy={ev.accuracy:.4f} "
          f"align_acc={ev.alignment_accuracy:.4f} "
          f"containment={ev.containment:.4f}")
    return EXIT_OK


def _to_heatmap(map2d: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalize one channel map to uint8; constant maps go mid-gray."""
    vmin = float(map2d.min())
    vmax = float(map2d.max())
    if vmax - vmin < 1e-12:
        return np.full(map2d.shape, 128, dtype=np.uint8), vmin, vmax
    scaled = np.rint(255.0 * (map2d - vmin) / (vmax - vmin))
    return scaled.astype(np.uint8), vmin, vmax


def cmd_visualize(args: argparse.Namespace, settings: Settings) -> int:
    model = _load_checkpoint(args.checkpoint)
    cfg = model.config
    if not 0 <= args.class_id < cfg.num_classes:
        raise ConfigError(f"class id {args.class_id} out of range "
                          f"[0, {cfg.num_classes})")
    datasets = _load_tree(args.data, image_size=cfg.image_size)
    if args.split not in datasets:
        raise ConfigError(f"split {args.split!r} not present in {args.data}")
    ds = datasets[args.split]
    picks = np.flatnonzero(ds.labels == args.class_id)[:args.count]
    if picks.size == 0:
        raise ConfigError(f"no samples of class {args.class_id} in split "
                          f"{args.split!r}")
    method = settings.get("upsample", "bilinear")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = forward_eval(model, ds.images[picks])
    xi_h = cfg.spec_high.channels_per_class
    xi_l = cfg.spec_mid.channels_per_class
    stages = (("high", result.F_high.data, xi_h),
              ("mid", result.F_mid.data, xi_l))

    rows = ["file,sample,dataset_index,label,stage,group_channel,feature_channel,vmin,vmax"]
    grid: list[tuple[str, np.ndarray]] = []
    count = 0
    for si, ds_index in enumerate(picks):
        for stage, maps, xi in stages:
            for c in range(xi):
                channel = args.class_id * xi + c
                raw = maps[si, channel].astype(np.float32)
                up = upsample(Tensor4.const(raw[None, None]), method,
                              cfg.image_size, cfg.image_size).data[0, 0]
                heat, vmin, vmax = _to_heatmap(up)
                name = f"sample{si:02d}_{stage}{c}.pgm"
                netpbm.write_pgm(out / name, heat)
                if args.raw:
                    save_tensor4(out / f"sample{si:02d}_{stage}{c}.t4",
                                 raw[None, None])
                rows.append(f"{name},{si},{int(ds_index)},{args.class_id},"
                            f"{stage},{c},{channel},{repr(vmin)},{repr(vmax)}")
                grid.append((f"s{si} {stage}[{c}]", heat))
                count += 1
    (out / "index.csv").write_text("\n".join(rows) + "\n")
    from .report import save_channel_grid
    save_channel_grid(grid, out / "channels.png", ncols=xi_h + xi_l)
    print(f"wrote {count} heatmaps for class {args.class_id} "
          f"({picks.size} samples) under {out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdsa",
        description="Two-stage channel-loss trainer and its verification tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--upsample", choices=list(METHODS),
                       help="resampling method for attention and heatmaps")
        p.add_argument("--xi", type=int, dest="xi",
                       help="middle-stage channel multiplier")
        p.add_argument("--mu", type=float,
                       help="weight of the stage losses; 0 = plain-CE baseline")
        p.add_argument("--lambda", type=float, dest="lam",
                       help="diversity weight inside each stage loss")

    p = sub.add_parser("selftest", help="run the numerical check suites")
    common(p)
    p.add_argument("--equivalence-cases", type=int, default=50)
    p.add_argument("--replay", metavar="DIR",
                   help="re-verify a divergence dump directory")
    p.add_argument("--corrupt-lambda-sign", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest, keys=COMMON_KEYS)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p)
    p.set_defaults(func=cmd_gradcheck, keys=COMMON_KEYS)

    p = sub.add_parser("gen-data", help="write a synthetic benchmark tree")
    common(p)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.set_defaults(func=cmd_gen_data, keys=GEN_KEYS)

    p = sub.add_parser("train", help="train a model on a dataset tree")
    common(p)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train, keys=TRAIN_KEYS)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset tree")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval, keys=COMMON_KEYS)

    p = sub.add_parser("visualize",
                       help="export per-class channel heatmaps as PGM + CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--count", type=int, default=4,
                   help="samples of the class to render")
    p.add_argument("--raw", action="store_true",
                   help="also dump raw float maps alongside the heatmaps")
    p.set_defaults(func=cmd_visualize, keys=COMMON_KEYS)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings(args, args.keys)
        return args.func(args, settings)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NetpbmError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
