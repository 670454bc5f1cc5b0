"""Segmentation and classification evaluation: per-class Dice / Jaccard /
sensitivity / specificity / accuracy, cup-to-disk ratios, MAE-CDR, and AUC.

Conventions (the usual challenge ones): empty-vs-empty comparisons score 1.0,
an empty predicted disk contributes CDR 0, and AUC ties count one half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ShapeError
from .data import CLASS_CUP, CLASS_RIM


class UndefinedMetricError(ValueError):
    """Metric has no defined value on this input (empty disk, single-class AUC)."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class PairScores:
    counts: ConfusionCounts
    dice: float
    jaccard: float
    sensitivity: float
    specificity: float
    accuracy: float


def binarize(mask: np.ndarray, target: str) -> np.ndarray:
    """'cup' selects class 2; 'disk' selects classes 1 and 2 (cup lies inside the disk)."""
    mask = np.asarray(mask)
    if target == "cup":
        return mask == CLASS_CUP
    if target == "disk":
        return mask >= CLASS_RIM
    raise ValueError(f"target must be 'cup' or 'disk', got {target!r}")


def score_pair(pred: np.ndarray, gt: np.ndarray) -> PairScores:
    """Pixel-count scores between two same-shape binary maps."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"score_pair: shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    dice = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
    jaccard = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0
    sen = tp / (tp + fn) if (tp + fn) else 1.0
    spe = tn / (tn + fp) if (tn + fp) else 1.0
    acc = (tp + tn) / counts.total
    return PairScores(counts=counts, dice=dice, jaccard=jaccard,
                      sensitivity=sen, specificity=spe, accuracy=acc)


def cdr_area(mask: np.ndarray) -> float:
    """Pixel-count cup-to-disk ratio |cup| / |disk|; always in [0, 1]."""
    cup = int(np.count_nonzero(binarize(mask, "cup")))
    disk = int(np.count_nonzero(binarize(mask, "disk")))
    if disk == 0:
        raise UndefinedMetricError("cdr_area: mask has no disk pixels")
    return cup / disk


def cdr_vertical(mask: np.ndarray) -> float:
    """Vertical-extent cup-to-disk ratio: occupied-row counts of cup vs disk."""
    cup_rows = int(np.count_nonzero(binarize(mask, "cup").any(axis=1)))
    disk_rows = int(np.count_nonzero(binarize(mask, "disk").any(axis=1)))
    if disk_rows == 0:
        raise UndefinedMetricError("cdr_vertical: mask has no disk pixels")
    return cup_rows / disk_rows


def _pred_cdr_vertical(mask: np.ndarray) -> float:
    # empty predicted disk contributes CDR 0 by convention
    try:
        return cdr_vertical(mask)
    except UndefinedMetricError:
        return 0.0


def mae_cdr(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """Mean absolute vertical-CDR error across aligned mask lists."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"mae_cdr: {len(pred_masks)} predictions vs {len(gt_masks)} ground truths")
    if not gt_masks:
        raise ValueError("mae_cdr: empty input")
    errors = [abs(_pred_cdr_vertical(p) - cdr_vertical(g))
              for p, g in zip(pred_masks, gt_masks)]
    return float(np.mean(errors))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counting one half. Computed via midranks, which is
    exactly the pairwise statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"auc: scores {scores.shape} and labels {labels.shape} must be "
                         f"equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("auc: scores must be finite")
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = int(np.count_nonzero(labels == 0))
    if n_pos + n_neg != labels.size:
        raise ValueError("auc: labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: both classes must be present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    midranks = starts[inverse] + (counts[inverse] + 1) / 2.0
    rank_sum = midranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# report assembly

REPORT_FIELDS = ("id",
                 "dice_cup", "dice_disk", "jac_cup", "jac_disk",
                 "sen_cup", "sen_disk", "spe_cup", "spe_disk",
                 "acc_cup", "acc_disk",
                 "cdr_area", "cdr_vertical", "mae_cdr", "auc")


@dataclass
class ImageRow:
    id: str
    dice_cup: float
    dice_disk: float
    jac_cup: float
    jac_disk: float
    sen_cup: float
    sen_disk: float
    spe_cup: float
    spe_disk: float
    acc_cup: float
    acc_disk: float
    cdr_area: float       # predicted area CDR (0 when the predicted disk is empty)
    cdr_vertical: float   # predicted vertical CDR (same convention)


@dataclass
class SegReport:
    rows: list[ImageRow]
    mae_cdr: float
    auc: float | None     # None when no labels were supplied

    def mean(self, field_name: str) -> float:
        return float(np.mean([getattr(r, field_name) for r in self.rows]))


def build_report(ids: Sequence[str], pred_masks: Sequence[np.ndarray],
                 gt_masks: Sequence[np.ndarray],
                 labels: Sequence[int] | None = None) -> SegReport:
    """Score aligned prediction/ground-truth mask lists.

    When ``labels`` is given, AUC is computed from the predicted area CDRs;
    any monotone classifier fitted on them shares that AUC exactly.
    """
    if not (len(ids) == len(pred_masks) == len(gt_masks)):
        raise ValueError(f"build_report: mismatched lengths {len(ids)}, "
                         f"{len(pred_masks)}, {len(gt_masks)}")
    rows = []
    for sid, pred, gt in zip(ids, pred_masks, gt_masks):
        cup = score_pair(binarize(pred, "cup"), binarize(gt, "cup"))
        disk = score_pair(binarize(pred, "disk"), binarize(gt, "disk"))
        try:
            gamma = cdr_area(pred)
        except UndefinedMetricError:
            gamma = 0.0
        rows.append(ImageRow(
            id=sid,
            dice_cup=cup.dice, dice_disk=disk.dice,
            jac_cup=cup.jaccard, jac_disk=disk.jaccard,
            sen_cup=cup.sensitivity, sen_disk=disk.sensitivity,
            spe_cup=cup.specificity, spe_disk=disk.specificity,
            acc_cup=cup.accuracy, acc_disk=disk.accuracy,
            cdr_area=gamma, cdr_vertical=_pred_cdr_vertical(pred)))
    mae = mae_cdr(pred_masks, gt_masks)
    auc_value = None
    if labels is not None:
        auc_value = auc([r.cdr_area for r in rows], labels)
    return SegReport(rows=rows, mae_cdr=mae, auc=auc_value)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def write_report_csv(report: SegReport, path: Path | str) -> None:
    """One row per image plus a final aggregate row (id 'mean'); the
    aggregate-only fields mae_cdr and auc stay empty on per-image rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for row in report.rows:
            writer.writerow([row.id] + [_fmt(getattr(row, f)) for f in REPORT_FIELDS[1:13]]
                            + ["", ""])
        writer.writerow(["mean"] + [_fmt(report.mean(f)) for f in REPORT_FIELDS[1:13]]
                        + [_fmt(report.mae_cdr), _fmt(report.auc)])


def format_report(report: SegReport) -> str:
    """Human-readable summary of the aggregate scores."""
    lines = [f"images: {len(report.rows)}"]
    for region in ("cup", "disk"):
        lines.append(f"{region:>5}: dice {report.mean(f'dice_{region}'):.4f}  "
                     f"jaccard {report.mean(f'jac_{region}'):.4f}  "
                     f"sen {report.mean(f'sen_{region}'):.4f}  "
                     f"spe {report.mean(f'spe_{region}'):.4f}  "
                     f"acc {report.mean(f'acc_{region}'):.4f}")
    lines.append(f"mae-cdr: {report.mae_cdr:.4f}")
    if report.auc is not None:
        lines.append(f"auc: {report.auc:.4f}")
    return "\n".join(lines)
