"""Localization and detection scoring.

Localization compares binarized predicted masks against ground truth at
ground-truth resolution (pixel-level IoU, Matthews correlation, and the
mask metric (TP-FN-FP)/|GT| clipped at -1).  Detection ranks pairs by the
tamper-probability score: per mask, the mean of tampered probabilities
strictly above 0.5 (0 if none), averaged over the two masks.  AUC is the
rank statistic P(s+ > s-) + P(tie)/2, which equals trapezoidal integration
of the ROC curve; EER interpolates the FPR = FNR crossing linearly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, MetricError, ParameterError
from .matching import upsample_mask

EPS = 1e-12


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly-greater thresholding of a probability map."""
    return np.asarray(mask) > threshold


@dataclass
class ConfusionCounts:
    """Pixel counts with tampered as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)), fp=int(np.sum(pred & ~gt)),
        tn=int(np.sum(~pred & ~gt)), fn=int(np.sum(~pred & gt)))


def iou(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0       # both masks empty
    return counts.tp / denom


def mcc(counts: ConfusionCounts) -> float:
    t, f = counts, counts
    factors = [(t.tp + t.fp), (t.tp + t.fn), (t.tn + f.fp), (t.tn + f.fn)]
    if any(x == 0 for x in factors):
        return 0.0
    num = t.tp * t.tn - t.fp * t.fn
    return float(num / np.sqrt(np.prod([float(x) for x in factors])))


def nmm(counts: ConfusionCounts) -> float:
    gt_area = counts.tp + counts.fn
    if gt_area == 0:
        return -1.0 if counts.fp else 0.0
    return max(-1.0, (counts.tp - counts.fn - counts.fp) / gt_area)


def detection_score(masks) -> float:
    """Tamper probability of a pair from its two soft masks.

    Per mask: mean of tampered-channel values strictly above 0.5, or 0 when
    nothing exceeds the threshold; the pair score averages the two masks.
    """
    values = []
    for mask in (masks.y_a, masks.y_b) if hasattr(masks, "y_a") else masks:
        arr = mask.data if isinstance(mask, ad.Tensor) else np.asarray(mask)
        if arr.ndim == 4:
            arr = arr[0]
        tampered = arr[1] if arr.ndim == 3 else arr
        hot = tampered[tampered > 0.5]
        values.append(float(hot.mean()) if hot.size else 0.0)
    return 0.5 * (values[0] + values[1])


# ---------------------------------------------------------------------------
# set-level detection metrics
# ---------------------------------------------------------------------------


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.all() or not labels.any():
        raise MetricError("need at least one positive and one negative sample")


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC with tie correction (average ranks)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    _check_two_classes(labels)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC vertices swept over the unique score values, descending.

    Ties advance both rates simultaneously, so trapezoidal integration of
    this curve equals the rank-statistic AUC.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    distinct = np.flatnonzero(np.diff(sorted_scores)) if len(scores) > 1 else np.array([], int)
    cut = np.concatenate([distinct, [len(scores) - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    fp = np.cumsum(~sorted_labels)[cut]
    tpr = np.concatenate([[0.0], tp / labels.sum()])
    fpr = np.concatenate([[0.0], fp / (~labels).sum()])
    thresholds = np.concatenate([[np.inf], sorted_scores[cut]])
    return fpr, tpr, thresholds


def trapezoid_auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def eer(scores, labels) -> float:
    """Equal error rate: the FPR = FNR crossing, linearly interpolated
    between adjacent ROC vertices."""
    fpr, tpr, _ = roc_curve(scores, labels)
    fnr = 1.0 - tpr
    for i in range(len(fpr)):
        if fpr[i] >= fnr[i]:
            if i == 0 or fpr[i] == fnr[i]:
                return float(fpr[i])
            df = (fpr[i] - fpr[i - 1]) - (fnr[i] - fnr[i - 1])
            if df == 0:
                return float(fpr[i - 1])
            t = (fnr[i - 1] - fpr[i - 1]) / df
            return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))
    return 1.0


def precision_recall_f1(scores, labels, threshold: float = 0.5) -> tuple:
    """Standard definitions with 0 conventions on empty denominators;
    a sample is predicted positive when its score is strictly above the
    threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError("threshold must lie in [0, 1]")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


# ---------------------------------------------------------------------------
# whole-set evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-pair rows plus recomputable aggregates."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": self.summary}, sort_keys=True) + "\n")


def aggregate_rows(rows: list, threshold: float = 0.5) -> dict:
    """Aggregates recomputed from per-pair rows (the report's own oracle)."""
    summary: dict = {"threshold": threshold, "pairs": len(rows),
                     "errors": sum(1 for r in rows if "error" in r)}
    per_bucket: dict = {}
    for row in rows:
        if "error" in row or row["label"] != "correlated":
            continue
        bucket = per_bucket.setdefault(row["difficulty"],
                                       {"iou": [], "mcc": [], "nmm": []})
        for key in ("iou", "mcc", "nmm"):
            bucket[key].append(row[key])
    summary["localization"] = {
        bucket: {k: float(np.mean(v)) for k, v in vals.items()}
        for bucket, vals in sorted(per_bucket.items())}
    scored = [(r["score"], r["label"] == "correlated")
              for r in rows if "error" not in r]
    if scored:
        scores = np.array([s for s, _ in scored])
        labels = np.array([l for _, l in scored])
        p, r, f1 = precision_recall_f1(scores, labels, threshold)
        summary["detection"] = {"precision": p, "recall": r, "f1": f1}
        try:
            summary["detection"]["auc"] = roc_auc(scores, labels)
            summary["detection"]["eer"] = eer(scores, labels)
        except MetricError:
            # single-class or degenerate sets: chance-level convention
            summary["detection"]["auc"] = 0.5
            summary["detection"]["eer"] = 0.5
    return summary


def evaluate_set(checkpoint, manifest_path, threshold: float = 0.5,
                 dump_dir=None, report_path=None) -> MetricsReport:
    """Run the matcher over every manifest pair and score it.

    Localization metrics are computed on positive pairs at ground-truth
    resolution (bilinear upsampling then strict binarization), averaged
    over the pair's two masks; detection scores cover all pairs.  Missing
    files produce per-pair error rows; the report is still written.
    """
    from . import datagen
    from .training import Checkpoint, load_checkpoint, matcher_from_checkpoint

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    matcher, _config = matcher_from_checkpoint(checkpoint)
    root = os.path.dirname(os.path.abspath(manifest_path))
    _info, meta_rows = datagen.load_manifest(manifest_path)

    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
    rows = []
    for meta in meta_rows:
        row = {"id": meta["id"], "kind": meta["kind"], "label": meta["label"],
               "difficulty": meta["difficulty"]}
        try:
            paths = meta["paths"]
            probe = datagen.load_image_png(os.path.join(root, paths["probe"]))
            donor = datagen.load_image_png(os.path.join(root, paths["donor"]))
            gt_p = datagen.load_mask_png(os.path.join(root, paths["mask_p"]))
            gt_d = datagen.load_mask_png(os.path.join(root, paths["mask_d"]))
        except (OSError, KeyError) as exc:
            row["error"] = str(exc)
            rows.append(row)
            continue
        with ad.no_grad():
            masks = matcher(matcher.preprocess(probe.transpose(2, 0, 1)),
                            matcher.preprocess(donor.transpose(2, 0, 1)))
        row["score"] = detection_score(masks)
        if meta["label"] == "correlated":
            loc = {"iou": [], "mcc": [], "nmm": []}
            for mask_t, gt in ((masks.y_a, gt_p), (masks.y_b, gt_d)):
                up = upsample_mask(ad.Tensor(mask_t.data[0]), gt.shape[0])
                counts = confusion(binarize(up.data[1], threshold), gt)
                loc["iou"].append(iou(counts))
                loc["mcc"].append(mcc(counts))
                loc["nmm"].append(nmm(counts))
            for key, vals in loc.items():
                row[key] = float(np.mean(vals))
        if dump_dir:
            for suffix, mask_t in (("a", masks.y_a), ("b", masks.y_b)):
                up = upsample_mask(ad.Tensor(mask_t.data[0]), probe.shape[0])
                arr = np.clip(up.data[1] * 255.0, 0, 255).astype(np.uint8)
                datagen.save_mask_png_gray(
                    arr, os.path.join(dump_dir, f"{meta['id']}_{suffix}.png"))
        rows.append(row)

    report = MetricsReport(rows, aggregate_rows(rows, threshold))
    if report_path:
        report.write(report_path)
    return report
