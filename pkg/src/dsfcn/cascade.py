"""The dual-stage pipeline: preprocess, full-frame Stage I, disk detection,
crop of image plus both probability channels, Stage II on the crop, and the
inverse mapping of the refined prediction back to original resolution.

Stage II consumes three channels: the green-channel crop, the cup
probability, and the disk (rim+cup) probability from Stage I. Pixels the
crop never showed to Stage II keep Stage I's prediction when mapping back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SgdConfig, Tensor, sgd_step, softmax_cross_entropy
from .data import FormatError, Sample, augment
from .interp import resize_bilinear, resize_nearest
from .metrics import UndefinedMetricError, cdr_area
from .model import FcnModel, ProbMap, forward, predict_probabilities


@dataclass(frozen=True)
class CascadeConfig:
    """Pipeline geometry and detection parameters.

    ``stage1_size`` is the preprocessed full-frame resolution (512 at paper
    scale); ``stage2_size`` the crop resolution fed to Stage II. Both must
    suit the models' ``num_scales``.
    """

    stage1_size: int = 512
    stage2_size: int = 512
    threshold: float = 0.5
    margin_frac: float = 0.15

    def __post_init__(self) -> None:
        if self.stage1_size < 8 or self.stage2_size < 8:
            raise ValueError(f"stage sizes must be >= 8, got {self.stage1_size}, {self.stage2_size}")
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.margin_frac < 0:
            raise ValueError(f"margin_frac must be >= 0, got {self.margin_frac}")


@dataclass
class CropRegion:
    """Axis-aligned box in preprocessed-image coordinates."""

    row0: int
    col0: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.row0 < 0 or self.col0 < 0 or self.height < 1 or self.width < 1:
            raise ValueError(f"invalid crop region {self}")

    @property
    def row_slice(self) -> slice:
        return slice(self.row0, self.row0 + self.height)

    @property
    def col_slice(self) -> slice:
        return slice(self.col0, self.col0 + self.width)

    def within(self, h: int, w: int) -> bool:
        return self.row0 + self.height <= h and self.col0 + self.width <= w


@dataclass
class TransformRecord:
    """Everything needed to map points and masks between original and
    preprocessed coordinates: pad amounts, the square padded size, and the
    resize target. ``crop`` is filled in once Stage I has located the disk."""

    original_h: int
    original_w: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    padded_size: int
    target: int
    crop: CropRegion | None = None

    def map_point(self, r: float, c: float) -> tuple[float, float]:
        """Original pixel-center coordinates to preprocessed coordinates."""
        s = self.target / self.padded_size
        return ((r + self.pad_top + 0.5) * s - 0.5,
                (c + self.pad_left + 0.5) * s - 0.5)

    def invert_point(self, r: float, c: float) -> tuple[float, float]:
        """Inverse of ``map_point``."""
        s = self.padded_size / self.target
        return ((r + 0.5) * s - 0.5 - self.pad_top,
                (c + 0.5) * s - 0.5 - self.pad_left)


def preprocess(raw: np.ndarray, target: int = 512) -> tuple[Tensor, TransformRecord]:
    """Pad the short axis with zeros to a square (extra pixel goes to the
    bottom/right when odd), bilinear-resize to target x target, and extract
    the green channel. Returns the [1, 1, target, target] tensor and the
    transform record."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"preprocess: expected [H, W, 3] image, got {raw.shape}")
    h, w = raw.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"preprocess: image must be at least 8x8, got {h}x{w}")
    side = max(h, w)
    pad_top = (side - h) // 2
    pad_bottom = side - h - pad_top
    pad_left = (side - w) // 2
    pad_right = side - w - pad_left
    green = np.pad(raw[:, :, 1].astype(np.float32),
                   ((pad_top, pad_bottom), (pad_left, pad_right)))
    resized = resize_bilinear(green, target, target).astype(np.float32)
    record = TransformRecord(original_h=h, original_w=w,
                             pad_top=pad_top, pad_bottom=pad_bottom,
                             pad_left=pad_left, pad_right=pad_right,
                             padded_size=side, target=target)
    return Tensor(resized[None, None]), record


def preprocess_mask(mask: np.ndarray, target: int = 512) -> np.ndarray:
    """Same geometry as ``preprocess`` with nearest-neighbor resampling;
    padding is background (class 0)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    side = max(h, w)
    pad_top, pad_left = (side - h) // 2, (side - w) // 2
    padded = np.zeros((side, side), dtype=mask.dtype)
    padded[pad_top:pad_top + h, pad_left:pad_left + w] = mask
    return resize_nearest(padded, target, target)


def postprocess_mask(mask_t: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Inverse of ``preprocess_mask``: nearest-resize back to the padded
    square, then drop the padding."""
    mask_t = np.asarray(mask_t)
    if mask_t.shape != (record.target, record.target):
        raise ValueError(f"postprocess_mask: mask {mask_t.shape} does not match "
                         f"record target {record.target}")
    padded = resize_nearest(mask_t, record.padded_size, record.padded_size)
    return padded[record.pad_top:record.pad_top + record.original_h,
                  record.pad_left:record.pad_left + record.original_w]


def detect_disk_region(prob: ProbMap, threshold: float = 0.5,
                       margin_frac: float = 0.15) -> CropRegion:
    """Tight bounding box of pixels with disk probability >= threshold,
    expanded by ``margin_frac`` of the box's larger side, clipped to bounds.
    Falls back to the full image when nothing passes the threshold."""
    h, w = prob.shape
    ys, xs = np.nonzero(prob.disk >= threshold)
    if ys.size == 0:
        return CropRegion(0, 0, h, w)
    r0, r1 = int(ys.min()), int(ys.max())
    c0, c1 = int(xs.min()), int(xs.max())
    margin = int(round(margin_frac * max(r1 - r0 + 1, c1 - c0 + 1)))
    r0, c0 = max(r0 - margin, 0), max(c0 - margin, 0)
    r1, c1 = min(r1 + margin, h - 1), min(c1 + margin, w - 1)
    return CropRegion(row0=r0, col0=c0, height=r1 - r0 + 1, width=c1 - c0 + 1)


def crop_and_stack(image: Tensor, prob: ProbMap, region: CropRegion,
                   stage2_size: int) -> Tensor:
    """Stage-II input [1, 3, s, s]: channel 0 the cropped green image,
    channel 1 the cropped cup probability, channel 2 the cropped disk
    probability, each bilinear-resized to ``stage2_size``."""
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 1:
        raise ad.ShapeError(f"crop_and_stack: expected image [1, 1, S, S], got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if prob.shape != (h, w):
        raise ad.ShapeError(f"crop_and_stack: probability map {prob.shape} does not match "
                            f"image {(h, w)}")
    if not region.within(h, w):
        raise ValueError(f"crop_and_stack: region {region} exceeds image bounds {h}x{w}")
    sl = (region.row_slice, region.col_slice)
    channels = np.stack([image.data[0, 0][sl], prob.cup[sl], prob.disk[sl]])
    resized = resize_bilinear(channels, stage2_size, stage2_size).astype(np.float32)
    return Tensor(resized[None])


def uncrop(pred: np.ndarray, region: CropRegion, record: TransformRecord,
           background: np.ndarray | None = None) -> np.ndarray:
    """Map a Stage-II class map back to original resolution.

    The prediction is nearest-resized to the crop extent and pasted onto a
    full preprocessed-size canvas; pixels outside the crop keep
    ``background`` (Stage I's argmax; zeros when omitted). The canvas is
    then inverse-resized and un-padded to the original dims."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise ValueError(f"uncrop: expected a 2-D class map, got {pred.shape}")
    t = record.target
    if not region.within(t, t):
        raise ValueError(f"uncrop: region {region} exceeds the preprocessed size {t}")
    if record.crop is not None and record.crop != region:
        raise ValueError(f"uncrop: region {region} does not match the record's crop {record.crop}")
    if background is None:
        canvas = np.zeros((t, t), dtype=pred.dtype)
    else:
        background = np.asarray(background)
        if background.shape != (t, t):
            raise ValueError(f"uncrop: background {background.shape} does not match "
                             f"preprocessed size {t}")
        canvas = background.copy()
    canvas[region.row_slice, region.col_slice] = resize_nearest(
        pred, region.height, region.width)
    return postprocess_mask(canvas, record)


# ---------------------------------------------------------------------------
# inference

Predictor = FcnModel | Callable[[Tensor], ProbMap]


def _predict(stage: Predictor, image: Tensor) -> ProbMap:
    if isinstance(stage, FcnModel):
        return predict_probabilities(stage, image)
    return stage(image)


def _gamma(mask: np.ndarray) -> float:
    try:
        return cdr_area(mask)
    except UndefinedMetricError:
        return 0.0


@dataclass
class CascadeResult:
    mask: np.ndarray          # [H0, W0] classes {0, 1, 2}
    prob_stage1: ProbMap
    prob_stage2: ProbMap
    gamma: float              # area CDR of the final mask, 0 when disk empty
    region: CropRegion
    record: TransformRecord


def run_cascade(stage1: Predictor, stage2: Predictor, raw: np.ndarray,
                cfg: CascadeConfig | None = None) -> CascadeResult:
    """Full two-stage inference on one raw RGB image.

    Stages are usually ``FcnModel``s but any callable Tensor -> ProbMap
    works, which keeps degenerate pipelines testable."""
    cfg = cfg or CascadeConfig()
    x1, record = preprocess(raw, cfg.stage1_size)
    prob1 = _predict(stage1, x1)
    region = detect_disk_region(prob1, cfg.threshold, cfg.margin_frac)
    record.crop = region
    x2 = crop_and_stack(x1, prob1, region, cfg.stage2_size)
    prob2 = _predict(stage2, x2)
    final = uncrop(prob2.argmax(), region, record, background=prob1.argmax())
    return CascadeResult(mask=final, prob_stage1=prob1, prob_stage2=prob2,
                         gamma=_gamma(final), region=region, record=record)


def run_single_stage(stage1: Predictor, raw: np.ndarray,
                     cfg: CascadeConfig | None = None) -> tuple[np.ndarray, ProbMap, float]:
    """Stage-I-only inference: preprocess, predict, argmax, map back."""
    cfg = cfg or CascadeConfig()
    x1, record = preprocess(raw, cfg.stage1_size)
    prob1 = _predict(stage1, x1)
    mask = postprocess_mask(prob1.argmax(), record)
    return mask, prob1, _gamma(mask)


# ---------------------------------------------------------------------------
# training


def _stage_example(sample: Sample, stage: int, stage1_for_inputs: Predictor | None,
                   cfg: CascadeConfig) -> tuple[np.ndarray, np.ndarray]:
    """One training pair (input array, target class map) for the given stage."""
    x1, _ = preprocess(sample.image, cfg.stage1_size)
    target_full = preprocess_mask(sample.mask, cfg.stage1_size).astype(np.int64)
    if stage == 1:
        return x1.data[0], target_full
    prob1 = _predict(stage1_for_inputs, x1)
    region = detect_disk_region(prob1, cfg.threshold, cfg.margin_frac)
    x2 = crop_and_stack(x1, prob1, region, cfg.stage2_size)
    target = resize_nearest(target_full[region.row_slice, region.col_slice],
                            cfg.stage2_size, cfg.stage2_size)
    return x2.data[0], target


def train_stage(model: FcnModel, dataset: Sequence[Sample], cfg: SgdConfig,
                stage: int, stage1_for_inputs: Predictor | None = None, *,
                cascade: CascadeConfig | None = None, seed: int = 0,
                augment_data: bool = True) -> tuple[FcnModel, list[float]]:
    """SGD training of one stage; returns the model and per-epoch mean loss.

    Stage 2 needs a frozen Stage-I model: its inputs are Stage I's inference
    outputs on each (possibly augmented) sample, cropped at the detected
    disk — not ground-truth crops — so training matches what the cascade
    sees at test time."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and stage1_for_inputs is None:
        raise ValueError("stage 2 training requires the trained stage-1 model")
    expected_channels = 1 if stage == 1 else 3
    if model.config.in_channels != expected_channels:
        raise ValueError(f"stage {stage} model must take {expected_channels} channels, "
                         f"config has {model.config.in_channels}")
    if not dataset:
        raise ValueError("train_stage: empty dataset")
    cascade_cfg = cascade or CascadeConfig()
    rng = np.random.default_rng([seed, stage])
    history: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        loss_sum, n_seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            inputs, targets = [], []
            for idx in chunk:
                sample = dataset[int(idx)]
                if augment_data:
                    sample = augment(sample, rng)
                x, t = _stage_example(sample, stage, stage1_for_inputs, cascade_cfg)
                inputs.append(x)
                targets.append(t)
            batch = Tensor(np.stack(inputs))
            logits = forward(model, batch)
            loss = softmax_cross_entropy(logits, np.stack(targets))
            loss.backward()
            sgd_step(model.params, cfg)
            loss_sum += loss.item() * len(chunk)
            n_seen += len(chunk)
        history.append(loss_sum / n_seen)
    return model, history
