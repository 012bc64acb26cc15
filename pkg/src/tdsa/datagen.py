"""Synthetic fine-grained benchmark, plus a directory loader for real images.

Each class is the pair (global arrangement, local texture).  An arrangement
places three rectangular parts in a 2x2 cell grid; a texture is a small
zero-mean striped patch planted strictly inside each part.  The texture
vocabulary is built so that every first-order cue is useless: each patch
mixes horizontal and vertical stripes, paired textures differ only in which
half of the patch carries which orientation, and stripe polarity and
amplitude are re-drawn per part.  Classes sharing an arrangement therefore
differ only in how stripe orientations are laid out inside the patches — a
cue that requires binding local edges to their position within the patch.
Distractor patches from the same texture bank land on the unoccupied cell's
background, so detecting a texture without binding it to a part location
carries no class information.

Per-part binary masks and their union (the region mask) ship with every
image so the evaluation code can measure where a model's activation mass
actually falls.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .resample import resize_image_np
from .tensor import ContractError

BACKGROUND = 0.25
PART_BASE = 0.55
GRID = 2               # cells per image side
PARTS_PER_IMAGE = 3    # occupied cells
AMP_LO, AMP_HI = 0.45, 1.25   # per-part stripe amplitude jitter range

#: arrangement id -> the three occupied cells of the 2x2 grid
ARRANGEMENTS = tuple(itertools.combinations(range(GRID * GRID), PARTS_PER_IMAGE))
MAX_TEXTURES = 4


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one deterministic dataset."""

    num_classes: int = 8
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 64
    global_vocab: int = 4     # arrangements in use
    local_vocab: int = 2      # textures in use
    noise_sigma: float = 0.14
    texture_delta: float = 0.14
    clutter: int = 4          # distractor patches planted on empty-cell background
    part_size: int | None = None   # None: 5/8 of a grid cell
    patch_size: int | None = None  # None: 5/8 of the part, rounded down to a x4
    seed: int = 0

    def __post_init__(self):
        if self.global_vocab < 2 or self.local_vocab < 2:
            raise ContractError("need at least 2 arrangements and 2 textures")
        if self.global_vocab > len(ARRANGEMENTS):
            raise ContractError(f"at most {len(ARRANGEMENTS)} arrangements "
                                f"fit a {GRID}x{GRID} grid")
        if self.local_vocab > MAX_TEXTURES:
            raise ContractError(f"at most {MAX_TEXTURES} textures available")
        if self.num_classes > self.global_vocab * self.local_vocab:
            raise ContractError(
                f"{self.num_classes} classes exceed "
                f"{self.global_vocab} x {self.local_vocab} vocabulary combinations")
        if self.num_classes % self.local_vocab:
            raise ContractError("class count must be a multiple of the local "
                                "vocabulary so every arrangement is shared")
        if self.image_size % (2 * GRID):
            raise ContractError("image size must be divisible by 4")
        cell = self.cell
        if self.part_size is None:
            object.__setattr__(self, "part_size", (5 * cell) // 8)
        if self.patch_size is None:
            raw = (5 * self.part_size) // 8
            object.__setattr__(self, "patch_size", max(4, raw - raw % 4))
        if self.patch_size < 4 or self.patch_size % 4:
            raise ContractError("patch size must be a multiple of 4 and at "
                                "least 4 so every stripe half is zero-mean")
        if self.part_size < self.patch_size + 2:
            raise ContractError(
                f"part size {self.part_size} leaves no room for a "
                f"{self.patch_size}px patch with a 1px margin")
        if self.part_size > cell - 2:
            raise ContractError(f"part size {self.part_size} does not fit a "
                                f"{cell}px grid cell with a 1px margin")
        if not 0 <= self.noise_sigma <= 0.35:
            raise ContractError("noise sigma must lie in [0, 0.35]")
        if not 0 < self.texture_delta <= 0.4:
            raise ContractError("texture delta must lie in (0, 0.4]")
        if self.clutter < 0:
            raise ContractError("clutter count cannot be negative")

    @property
    def cell(self) -> int:
        return self.image_size // GRID

    def class_name(self, label: int) -> str:
        return f"class_{label:02d}"

    def arrangement_of(self, label: int) -> int:
        return label // self.local_vocab

    def texture_of(self, label: int) -> int:
        return label % self.local_vocab


@dataclass
class SyntheticSample:
    image: np.ndarray        # (3, h, w) float32 in [0, 1]
    label: int
    region_mask: np.ndarray  # (h, w) uint8, union of part masks
    part_masks: np.ndarray   # (parts, h, w) uint8


@dataclass
class Dataset:
    """In-memory split: stacked images, labels, and ground-truth masks."""

    images: np.ndarray                      # (n, 3, h, w) float32
    labels: np.ndarray                      # (n,) int64
    class_names: list[str]
    region_masks: np.ndarray | None = None  # (n, h, w) uint8
    part_masks: np.ndarray | None = None    # (n, parts, h, w) uint8

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _texture_patch(texture: int, delta: float, size: int) -> np.ndarray:
    """A zero-mean ``size x size`` stripe patch; ``size`` is a multiple of 4.

    Textures 0 and 1 — the pair every two classes sharing an arrangement
    draw from — contain identical amounts of horizontal and vertical
    period-2 stripes and differ only in which half of the patch carries
    which orientation.  Their orientation-energy statistics match exactly,
    so telling them apart requires reading where each orientation sits
    inside the patch: a deliberately compositional, mid-level cue.
    Textures 2 and 3 are single-orientation controls.
    """
    j, k = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    horiz = 1 - 2 * (j % 2)   # sign flips per row
    vert = 1 - 2 * (k % 2)    # sign flips per column
    top = j < size // 2
    if texture == 0:     # horizontal stripes on top, vertical below
        sign = np.where(top, horiz, vert)
    elif texture == 1:   # vertical stripes on top, horizontal below
        sign = np.where(top, vert, horiz)
    elif texture == 2:   # horizontal throughout
        sign = horiz
    else:                # vertical throughout
        sign = vert
    return delta * sign.astype(np.float64)


def render_sample(spec: SyntheticSpec, label: int, rng: np.random.Generator,
                  ablate_patches: bool = False) -> SyntheticSample:
    """Draw one image.

    The random stream is consumed identically for every label: geometry
    jitter, per-part stripe polarity and amplitude, clutter, and noise come
    first, texture layouts are deterministic.  Rendering two labels that
    share an arrangement from equally seeded generators thus yields images
    that differ only inside the texture patches.

    ``ablate_patches`` skips the texture, leaving the flat part base — the
    control used to prove local cues are necessary.
    """
    if not 0 <= label < spec.num_classes:
        raise ContractError(f"label {label} out of range [0, {spec.num_classes})")
    size, cell, part = spec.image_size, spec.cell, spec.part_size
    ps = spec.patch_size
    jitter = (cell - part) // 2 - 1

    # nuisance draws first, consumed identically for every label
    part_jitter = rng.integers(-jitter, jitter + 1, size=(PARTS_PER_IMAGE, 2))
    patch_off = rng.integers(1, part - ps, size=(PARTS_PER_IMAGE, 2))
    polarity = 1 - 2 * rng.integers(0, 2, size=PARTS_PER_IMAGE)
    amplitude = rng.uniform(AMP_LO, AMP_HI, size=PARTS_PER_IMAGE)
    clutter_tex = rng.integers(0, spec.local_vocab, size=spec.clutter)
    clutter_pol = 1 - 2 * rng.integers(0, 2, size=spec.clutter)
    clutter_amp = rng.uniform(AMP_LO, AMP_HI, size=spec.clutter)
    clutter_off = rng.integers(0, cell - ps + 1, size=(spec.clutter, 2))
    noise = rng.normal(scale=spec.noise_sigma, size=(3, size, size))

    image = np.full((3, size, size), BACKGROUND, dtype=np.float64)
    parts = np.zeros((PARTS_PER_IMAGE, size, size), dtype=np.uint8)
    patch = _texture_patch(spec.texture_of(label), spec.texture_delta, ps)

    occupied = ARRANGEMENTS[spec.arrangement_of(label)]
    for p, cell_idx in enumerate(occupied):
        cy, cx = divmod(cell_idx, GRID)
        base = (cell - part) // 2
        y0 = cy * cell + base + int(part_jitter[p, 0])
        x0 = cx * cell + base + int(part_jitter[p, 1])
        image[:, y0:y0 + part, x0:x0 + part] = PART_BASE
        parts[p, y0:y0 + part, x0:x0 + part] = 1
        if not ablate_patches:
            py = y0 + int(patch_off[p, 0])
            px = x0 + int(patch_off[p, 1])
            image[:, py:py + ps, px:px + ps] += \
                polarity[p] * amplitude[p] * patch

    # Distractor patches on the unoccupied cell: same texture bank, same
    # amplitude range, but placed on background and drawn label-independently,
    # so the presence of a texture anywhere carries no class information —
    # only texture *inside a part* does.
    empty_cells = [c for c in range(GRID * GRID) if c not in occupied]
    for k in range(spec.clutter):
        cy, cx = divmod(empty_cells[k % len(empty_cells)], GRID)
        y0 = cy * cell + int(clutter_off[k, 0])
        x0 = cx * cell + int(clutter_off[k, 1])
        distractor = _texture_patch(int(clutter_tex[k]),
                                    spec.texture_delta, ps)
        image[:, y0:y0 + ps, x0:x0 + ps] += \
            clutter_pol[k] * clutter_amp[k] * distractor

    region = parts.max(axis=0)
    image = np.clip(image + noise, 0.0, 1.0)
    return SyntheticSample(image.astype(np.float32), label, region, parts)


_SPLIT_IDS = {"train": 0, "test": 1}


def _sample_rng(spec: SyntheticSpec, split: str, index: int) -> np.random.Generator:
    split_id = _SPLIT_IDS.get(split, 2)
    return np.random.default_rng([spec.seed, split_id, index])


def generate(spec: SyntheticSpec, ablate_patches: bool = False) -> dict[str, Dataset]:
    """Deterministic train/test splits, class-balanced and index-major."""
    out = {}
    names = [spec.class_name(c) for c in range(spec.num_classes)]
    for split, count in (("train", spec.train_per_class),
                         ("test", spec.test_per_class)):
        images, labels, regions, parts = [], [], [], []
        for index in range(count):
            for label in range(spec.num_classes):
                s = render_sample(spec, label, _sample_rng(spec, split, index),
                                  ablate_patches=ablate_patches)
                images.append(s.image)
                labels.append(s.label)
                regions.append(s.region_mask)
                parts.append(s.part_masks)
        out[split] = Dataset(
            images=np.stack(images), labels=np.asarray(labels, dtype=np.int64),
            class_names=names, region_masks=np.stack(regions),
            part_masks=np.stack(parts))
    return out


# -- on-disk layout -------------------------------------------------------------


def save_dataset(root, datasets: dict[str, Dataset]) -> int:
    """Write root/<split>/<class_name>/<id>.ppm plus mask siblings.

    Returns the number of images written.  Bytes are a pure function of the
    pixel data: re-generating and re-saving the same spec reproduces the
    tree bit for bit.
    """
    root = Path(root)
    written = 0
    for split, ds in datasets.items():
        per_class_counter = {}
        for i in range(len(ds)):
            label = int(ds.labels[i])
            idx = per_class_counter.get(label, 0)
            per_class_counter[label] = idx + 1
            class_dir = root / split / ds.class_names[label]
            class_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{idx:05d}"
            rgb = np.round(ds.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
            netpbm.write_ppm(class_dir / f"{stem}.ppm", rgb)
            if ds.region_masks is not None:
                netpbm.write_pgm(class_dir / f"{stem}.region.pgm",
                                 ds.region_masks[i] * 255)
                for k in range(ds.part_masks.shape[1]):
                    netpbm.write_pgm(class_dir / f"{stem}.part{k}.pgm",
                                     ds.part_masks[i, k] * 255)
            written += 1
    return written


def load_dir(path, image_size: int | None = None) -> Dataset:
    """Load a directory-per-class tree of P6 images.

    Labels follow sorted directory-name order; sibling ``*.region.pgm`` /
    ``*.part<k>.pgm`` masks are picked up when present.  All malformed or
    unreadable files are collected and reported in one error.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    class_dirs = sorted(d for d in path.iterdir() if d.is_dir())
    if not class_dirs:
        raise ContractError(f"{path}: no class directories found")
    images, labels, regions, parts_all = [], [], [], []
    errors = []
    have_all_masks = True
    for label, class_dir in enumerate(class_dirs):
        ppms = sorted(class_dir.glob("*.ppm"))
        if not ppms:
            errors.append(f"{class_dir}: empty class directory")
            continue
        for ppm in ppms:
            try:
                rgb = netpbm.read_ppm(ppm)
            except (OSError, netpbm.NetpbmError) as exc:
                errors.append(str(exc))
                continue
            img = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
            region, parts = _load_masks(ppm, errors)
            if image_size is not None and img.shape[1:] != (image_size, image_size):
                img = resize_image_np(img.astype(np.float64), image_size,
                                      image_size, "bilinear").astype(np.float32)
                region, parts = None, None  # masks are only valid at native size
            images.append(img)
            labels.append(label)
            if region is None or parts is None:
                have_all_masks = False
            regions.append(region)
            parts_all.append(parts)
    if errors:
        listing = "\n  ".join(errors)
        raise ContractError(f"{len(errors)} unreadable dataset entries:\n  {listing}")
    return Dataset(
        images=np.stack(images), labels=np.asarray(labels, dtype=np.int64),
        class_names=[d.name for d in class_dirs],
        region_masks=np.stack(regions) if have_all_masks else None,
        part_masks=np.stack(parts_all) if have_all_masks else None)


def _load_masks(ppm: Path, errors: list[str]):
    region_path = ppm.with_suffix("").with_suffix(".region.pgm")
    if not region_path.is_file():
        return None, None
    try:
        region = (netpbm.read_pgm(region_path) > 127).astype(np.uint8)
        parts = []
        for k in itertools.count():
            part_path = ppm.with_suffix("").with_suffix(f".part{k}.pgm")
            if not part_path.is_file():
                break
            parts.append((netpbm.read_pgm(part_path) > 127).astype(np.uint8))
    except (OSError, netpbm.NetpbmError) as exc:
        errors.append(str(exc))
        return None, None
    return region, np.stack(parts) if parts else None


def load_dataset(root, image_size: int | None = None) -> dict[str, Dataset]:
    """Load the train/test splits written by :func:`save_dataset`."""
    root = Path(root)
    splits = {}
    for split in ("train", "test"):
        split_dir = root / split
        if split_dir.is_dir():
            splits[split] = load_dir(split_dir, image_size)
    if not splits:
        raise FileNotFoundError(f"{root}: no train/ or test/ split directories")
    return splits
