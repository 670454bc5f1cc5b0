"""Dataset loading, the train-time augmentation policy, and a synthetic
fundus generator for desk-scale end-to-end experiments.

On-disk layout: ``images/<id>.png`` (8-bit RGB), ``masks/<id>.png`` (8-bit
grayscale, values {0, 128, 255}), optional ``labels.csv`` with header
``id,glaucoma`` and values {0, 1}. Mask grey levels encode cup=0 (black),
rim=128 (grey), retina=255 (white); in-memory classes are 0=background,
1=rim, 2=cup.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import ShapeError
from .interp import resize_bilinear, resize_nearest

CLASS_BACKGROUND, CLASS_RIM, CLASS_CUP = 0, 1, 2

_GREY_TO_CLASS = {255: CLASS_BACKGROUND, 128: CLASS_RIM, 0: CLASS_CUP}
_CLASS_TO_GREY = np.array([255, 128, 0], dtype=np.uint8)


class FormatError(ValueError):
    """Input file or array does not match the expected pixel format."""


class MaskValueError(ValueError):
    """Mask contains grey levels outside the {0, 128, 255} encoding."""


@dataclass
class Sample:
    """One fundus image with its 3-class mask and optional glaucoma flag."""

    image: np.ndarray            # [H, W, 3] float32 in [0, 1]
    mask: np.ndarray             # [H, W] uint8 in {0, 1, 2}
    label: int | None = None
    id: str = ""

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise FormatError(f"sample image must be [H, W, 3], got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeError(f"image {self.image.shape[:2]} and mask {self.mask.shape} "
                             f"dimensions differ (sample {self.id!r})")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"glaucoma label must be 0 or 1, got {self.label}")


def decode_mask(grey: np.ndarray) -> np.ndarray:
    """Map grey levels {0, 128, 255} to classes {2, 1, 0}; anything else is rejected."""
    grey = np.asarray(grey)
    legal = np.isin(grey, list(_GREY_TO_CLASS))
    if not legal.all():
        bad = sorted(int(v) for v in np.unique(grey[~legal]))
        raise MaskValueError(f"illegal mask grey levels {bad}; expected 0, 128 or 255")
    out = np.empty(grey.shape, dtype=np.uint8)
    for level, cls in _GREY_TO_CLASS.items():
        out[grey == level] = cls
    return out


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """Inverse of ``decode_mask``: classes {0, 1, 2} to grey {255, 128, 0}."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 2):
        raise MaskValueError(f"mask classes must lie in {{0, 1, 2}}, "
                             f"got range [{mask.min()}, {mask.max()}]")
    return _CLASS_TO_GREY[mask.astype(np.int64)]


def load_sample(image_path: Path | str, mask_path: Path | str) -> Sample:
    image_path, mask_path = Path(image_path), Path(mask_path)
    with Image.open(image_path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{image_path}: expected 8-bit RGB, got mode {im.mode!r}")
        image = np.asarray(im, dtype=np.float32) / 255.0
    with Image.open(mask_path) as im:
        if im.mode != "L":
            raise FormatError(f"{mask_path}: expected 8-bit grayscale, got mode {im.mode!r}")
        grey = np.asarray(im)
    mask = decode_mask(grey)
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"image {image.shape[:2]} ({image_path}) and mask {mask.shape} "
                         f"({mask_path}) dimensions differ")
    return Sample(image=image, mask=mask, id=image_path.stem)


def load_labels(path: Path | str) -> dict[str, int]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "glaucoma"]:
            raise FormatError(f"{path}: expected header 'id,glaucoma', got {header}")
        labels: dict[str, int] = {}
        for row in reader:
            if len(row) != 2 or row[1] not in ("0", "1"):
                raise FormatError(f"{path}: bad row {row}; values must be 0 or 1")
            labels[row[0]] = int(row[1])
    return labels


def load_dataset(root: Path | str) -> list[Sample]:
    """Load every image/mask pair under ``root``, attaching labels.csv if present."""
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"missing image directory {image_dir}")
    labels = load_labels(root / "labels.csv") if (root / "labels.csv").exists() else {}
    samples = []
    for image_path in sorted(image_dir.glob("*.png")):
        mask_path = mask_dir / image_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask {mask_path} for image {image_path}")
        sample = load_sample(image_path, mask_path)
        sample.label = labels.get(sample.id)
        samples.append(sample)
    return samples


def write_dataset(samples: list[Sample], root: Path | str, force: bool = False) -> None:
    """Write the directory layout; refuses a non-empty target unless forced."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"output directory {root} is not empty (use force to overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for sample in samples:
        img8 = np.rint(np.clip(sample.image, 0.0, 1.0) * 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"{sample.id}.png")
        Image.fromarray(encode_mask(sample.mask), mode="L").save(root / "masks" / f"{sample.id}.png")
    if any(s.label is not None for s in samples):
        with open(root / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "glaucoma"])
            for sample in samples:
                if sample.label is None:
                    raise ValueError(f"sample {sample.id!r} has no label but others do")
                writer.writerow([sample.id, sample.label])


# ---------------------------------------------------------------------------
# augmentation


def apply_augment(sample: Sample, *, flip: bool, scale: float,
                  crop_frac_y: float, crop_frac_x: float,
                  off_y: float, off_x: float) -> Sample:
    """Deterministic augmentation kernel: flip, zoom in place, crop+resize back.

    The same geometric transform is applied to image (bilinear) and mask
    (nearest); output dims always equal input dims. ``scale`` zooms the
    content on a fixed canvas (zero/background padding when shrinking,
    center crop when growing), so object pixel counts change by ~scale**2.
    All-identity arguments (no flip, scale 1, full crop) return the sample
    unchanged.
    """
    h, w = sample.mask.shape
    image, mask = sample.image, sample.mask

    if flip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]

    if scale != 1.0:
        hs, ws = max(1, round(h * scale)), max(1, round(w * scale))
        img_s = np.moveaxis(resize_bilinear(np.moveaxis(image, 2, 0), hs, ws), 0, 2)
        mask_s = resize_nearest(mask, hs, ws)
        if hs >= h:
            top, left = (hs - h) // 2, (ws - w) // 2
            image = img_s[top:top + h, left:left + w]
            mask = mask_s[top:top + h, left:left + w]
        else:
            top, left = (h - hs) // 2, (w - ws) // 2
            image = np.zeros((h, w, 3), dtype=np.float32)
            mask = np.full((h, w), CLASS_BACKGROUND, dtype=np.uint8)
            image[top:top + hs, left:left + ws] = img_s
            mask[top:top + hs, left:left + ws] = mask_s

    ch = max(1, round(h * crop_frac_y))
    cw = max(1, round(w * crop_frac_x))
    if (ch, cw) != (h, w) or off_y or off_x:
        r0 = round(off_y * (h - ch))
        c0 = round(off_x * (w - cw))
        img_c = image[r0:r0 + ch, c0:c0 + cw]
        mask_c = mask[r0:r0 + ch, c0:c0 + cw]
        image = np.moveaxis(resize_bilinear(np.moveaxis(img_c, 2, 0), h, w), 0, 2)
        mask = resize_nearest(mask_c, h, w)

    return Sample(image=np.ascontiguousarray(image, dtype=np.float32),
                  mask=np.ascontiguousarray(mask), label=sample.label, id=sample.id)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip (p=0.5), uniform zoom in [0.75, 1.25], and a
    random crop of >= 90% of each dimension resized back to the input dims."""
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.75, 1.25))
    crop_frac_y, crop_frac_x = (float(v) for v in rng.uniform(0.9, 1.0, size=2))
    off_y, off_x = (float(v) for v in rng.random(2))
    return apply_augment(sample, flip=flip, scale=scale,
                         crop_frac_y=crop_frac_y, crop_frac_x=crop_frac_x,
                         off_y=off_y, off_x=off_x)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic fundus dataset: textured background, bright disk ellipse,
    concentric darker cup whose area ratio is drawn from the class range,
    dark vessel stripes across the disk. Labels alternate 0/1 by index so
    small datasets stay class-balanced."""

    count: int = 20
    size: int = 128
    disk_radius: tuple[float, float] = (0.16, 0.24)      # fraction of size
    cdr_normal: tuple[float, float] = (0.15, 0.40)       # cup/disk area ratio
    cdr_glaucoma: tuple[float, float] = (0.55, 0.85)
    noise_amp: float = 0.03
    vessel_count: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("disk_radius", "cdr_normal", "cdr_glaucoma"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo < hi < 1.0):
                raise ValueError(f"{name} must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")
        if self.cdr_glaucoma[0] <= self.cdr_normal[1]:
            raise ValueError("glaucoma CDR range must lie strictly above the non-glaucoma range")
        if self.count < 0 or self.size < 16:
            raise ValueError(f"count must be >= 0 and size >= 16, got {self.count}, {self.size}")
        if self.noise_amp < 0 or self.vessel_count < 0:
            raise ValueError("noise_amp and vessel_count must be >= 0")


_BG_COLOR = np.array([0.46, 0.24, 0.13], dtype=np.float32)
_DISK_COLOR = np.array([0.93, 0.82, 0.50], dtype=np.float32)
_CUP_COLOR = np.array([0.78, 0.52, 0.30], dtype=np.float32)
_VESSEL_COLOR = np.array([0.35, 0.10, 0.08], dtype=np.float32)


def _paint_ellipse(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
                   ry: float, rx: float) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _synth_one(cfg: SynthConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    label = index % 2
    ratio_lo, ratio_hi = cfg.cdr_glaucoma if label else cfg.cdr_normal

    ry = rng.uniform(*cfg.disk_radius) * size
    rx = float(np.clip(ry * rng.uniform(0.85, 1.15), 3.0, size / 2 - 3))
    ry = float(np.clip(ry, 3.0, size / 2 - 3))
    cy = rng.uniform(ry + 2, size - ry - 3)
    cx = rng.uniform(rx + 2, size - rx - 3)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    disk = _paint_ellipse(yy, xx, cy, cx, ry, rx)
    disk_count = int(np.count_nonzero(disk))

    # pixel counts are quantized: nudge the cup radius until the measured
    # area ratio lands inside the configured class range
    target = rng.uniform(ratio_lo, ratio_hi)
    eps = 0.02 * (ratio_hi - ratio_lo)
    scale = float(np.sqrt(target))
    cup = _paint_ellipse(yy, xx, cy, cx, ry * scale, rx * scale)
    for _ in range(60):
        measured = np.count_nonzero(cup) / disk_count
        if ratio_lo + eps <= measured <= ratio_hi - eps:
            break
        correction = np.sqrt(target / max(measured, 1e-6))
        scale = float(np.clip(scale * np.clip(correction, 0.8, 1.25), 0.05, 0.999))
        cup = _paint_ellipse(yy, xx, cy, cx, ry * scale, rx * scale)
    else:
        raise RuntimeError(f"could not hit CDR range ({ratio_lo}, {ratio_hi}) "
                           f"for sample {index} at size {size}")

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[disk] = CLASS_RIM
    mask[cup] = CLASS_CUP

    image = np.broadcast_to(_BG_COLOR, (size, size, 3)).copy()
    image[disk] = _DISK_COLOR
    image[cup] = _CUP_COLOR
    width = max(1.2, size / 80.0)
    for _ in range(cfg.vessel_count):
        angle = rng.uniform(0, np.pi)
        py = cy + rng.uniform(-ry / 2, ry / 2)
        px = cx + rng.uniform(-rx / 2, rx / 2)
        dist = np.abs((yy - py) * np.cos(angle) - (xx - px) * np.sin(angle))
        stripe = dist <= width / 2
        image[stripe] = 0.35 * image[stripe] + 0.65 * _VESSEL_COLOR
    image += rng.normal(0.0, cfg.noise_amp, (size, size, 3))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return Sample(image=image, mask=mask, label=label, id=f"synth{index:04d}")


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    """Deterministic synthetic dataset; each sample has its own rng stream
    derived from (seed, index)."""
    return [_synth_one(cfg, i) for i in range(cfg.count)]
