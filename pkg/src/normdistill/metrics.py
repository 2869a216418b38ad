"""Evaluation metrics: AUROC, average precision, AUPRO, and the report table.

All metrics are rank-based (invariant under strictly increasing score
transforms). AUROC uses the Mann-Whitney formulation with ties counted 1/2;
AP is the step-wise sum over descending distinct thresholds; AUPRO sweeps
every distinct threshold, computes mean per-connected-region recall against
the false-positive rate over normal pixels, clamps FPR at the integration
limit and trapezoid-integrates, normalized by the limit.
"""

import csv
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError

METRIC_COLUMNS = ("i_auroc", "p_auroc", "aupro", "i_map", "p_map")


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under precision-recall: sum of (R_k - R_{k-1}) * P_k over
    descending distinct score thresholds."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels)
    # threshold boundaries: last row of each tied group
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0)
    boundary = np.append(boundary, scores.size - 1)
    tp = cum_tp[boundary].astype(np.float64)
    predicted = (boundary + 1).astype(np.float64)
    precision = tp / predicted
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise UndefinedMetricError(f"connectivity must be 4 or 8, got {connectivity}")


def aupro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray],
          fpr_limit: float = 0.3, connectivity: int = 8) -> float:
    """Area under the per-region-overlap curve up to an FPR limit, normalized.

    Thresholds sweep every distinct score value (descending). At each
    threshold the PRO is the mean recall over all connected anomalous
    regions, the FPR pools all normal pixels. Curve points beyond the limit
    keep their PRO but have their FPR clamped to the limit, which makes a
    single-threshold (constant) map integrate like AUROC's tie convention.
    """
    if len(maps) != len(masks):
        raise UndefinedMetricError(f"{len(maps)} maps vs {len(masks)} masks")
    structure = _connectivity_structure(connectivity)
    region_scores: list[np.ndarray] = []
    normal_scores: list[np.ndarray] = []
    for score_map, mask in zip(maps, masks):
        score_map = np.asarray(score_map, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if score_map.shape != mask.shape:
            raise UndefinedMetricError(
                f"map shape {score_map.shape} != mask shape {mask.shape}")
        normal_scores.append(score_map[~mask])
        labeled, n_regions = ndimage.label(mask, structure=structure)
        for region in range(1, n_regions + 1):
            region_scores.append(np.sort(score_map[labeled == region]))
    if not region_scores:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    normal = np.sort(np.concatenate(normal_scores))
    if normal.size == 0:
        raise UndefinedMetricError("AUPRO needs at least one normal pixel")

    thresholds = np.unique(np.concatenate(
        [np.concatenate(region_scores), normal]))[::-1]  # descending
    # count(x >= t) via searchsorted on ascending-sorted arrays
    fpr = (normal.size - np.searchsorted(normal, thresholds, side="left")) / normal.size
    pro = np.zeros_like(thresholds)
    for region in region_scores:
        recall = (region.size - np.searchsorted(region, thresholds, side="left")) / region.size
        pro += recall
    pro /= len(region_scores)

    xs = np.concatenate([[0.0], np.minimum(fpr, fpr_limit)])
    ys = np.concatenate([[0.0], pro])
    return float(np.trapezoid(ys, xs) / fpr_limit)


@dataclass
class MetricRow:
    i_auroc: float
    p_auroc: float
    aupro: float
    i_map: float
    p_map: float


@dataclass
class MetricsReport:
    """Per-category metric rows plus their unweighted mean."""

    categories: dict
    mean: MetricRow

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("category",) + METRIC_COLUMNS)
            for name in sorted(self.categories):
                row = self.categories[name]
                writer.writerow([name] + [repr(getattr(row, c)) for c in METRIC_COLUMNS])
            writer.writerow(["mean"] + [repr(getattr(self.mean, c)) for c in METRIC_COLUMNS])


def _category_metrics(samples, results, connectivity: int, fpr_limit: float) -> MetricRow:
    image_scores = np.array([r.image_score for r in results])
    image_labels = np.array([s.is_anomalous for s in samples], dtype=bool)
    pixel_scores = np.concatenate([r.pixel_map.ravel() for r in results])
    masks = []
    for s, r in zip(samples, results):
        if s.mask is not None:
            masks.append(np.asarray(s.mask, dtype=bool))
        else:
            masks.append(np.zeros(r.pixel_map.shape, dtype=bool))
    pixel_labels = np.concatenate([m.ravel() for m in masks])
    return MetricRow(
        i_auroc=auroc(image_scores, image_labels),
        p_auroc=auroc(pixel_scores, pixel_labels),
        aupro=aupro([r.pixel_map for r in results], masks,
                    fpr_limit=fpr_limit, connectivity=connectivity),
        i_map=average_precision(image_scores, image_labels),
        p_map=average_precision(pixel_scores, pixel_labels),
    )


def evaluate_scored(samples: Sequence, results: Sequence,
                    connectivity: int = 8, fpr_limit: float = 0.3) -> MetricsReport:
    """All five metrics per category from precomputed anomaly results.

    Pixel metrics pool every pixel of the category (normal test images
    contribute all-negative pixels). The mean row is the unweighted mean of
    the category rows.
    """
    if len(samples) != len(results):
        raise UndefinedMetricError(f"{len(samples)} samples vs {len(results)} results")
    by_category: dict[str, tuple[list, list]] = {}
    for s, r in zip(samples, results):
        by_category.setdefault(s.category, ([], []))
        by_category[s.category][0].append(s)
        by_category[s.category][1].append(r)
    rows = {}
    for name in sorted(by_category):
        cat_samples, cat_results = by_category[name]
        try:
            rows[name] = _category_metrics(cat_samples, cat_results, connectivity, fpr_limit)
        except UndefinedMetricError as exc:
            raise UndefinedMetricError(f"category {name!r}: {exc}") from exc
    mean = MetricRow(**{
        f.name: float(np.mean([getattr(r, f.name) for r in rows.values()]))
        for f in fields(MetricRow)})
    return MetricsReport(categories=rows, mean=mean)


def evaluate(state, samples: Sequence, batch_size: int = 8,
             connectivity: int = 8, fpr_limit: float = 0.3) -> MetricsReport:
    """Score a test set with the model and compute the full metric table."""
    from .scoring import score_dataset

    results = score_dataset(state, samples, batch_size=batch_size)
    return evaluate_scored(samples, results, connectivity=connectivity, fpr_limit=fpr_limit)


__all__ = [
    "METRIC_COLUMNS",
    "auroc",
    "average_precision",
    "aupro",
    "MetricRow",
    "MetricsReport",
    "evaluate_scored",
    "evaluate",
]
