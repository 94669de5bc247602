"""Anomaly scoring and evaluation metrics.

Scores are residual-driven: the squared channel distance between the
projected clean RGB feature and the fused-and-compressed feature, upsampled
to image resolution and Gaussian-smoothed. Metrics are image AUROC, pixel
AUROC, per-region-overlap AUPRO, and the forgetting measure used to compare
incremental schedules.

All metric functions are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

__all__ = [
    "UndefinedMetricError",
    "AnomalyScoreMap",
    "MetricsHistory",
    "bilinear_resize",
    "anomaly_map",
    "anomaly_map_from_logits",
    "auroc",
    "pixel_auroc",
    "aupro",
    "forgetting_metric",
]


class UndefinedMetricError(ValueError):
    """The metric has no defined value on this input (e.g. one class only)."""


@dataclass
class AnomalyScoreMap:
    """Pixel score map at image resolution plus its image-level score."""

    map: np.ndarray
    image_score: float


def bilinear_resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D array using half-pixel-center alignment."""
    h_in, w_in = img.shape
    h_out, w_out = out_hw
    ys = (np.arange(h_out) + 0.5) * (h_in / h_out) - 0.5
    xs = (np.arange(w_out) + 0.5) * (w_in / w_out) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h_in - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w_in - 1)
    y1 = np.clip(y0 + 1, 0, h_in - 1)
    x1 = np.clip(x0 + 1, 0, w_in - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def anomaly_map(
    f_org: np.ndarray,
    f_fu_g: np.ndarray,
    target_hw: tuple[int, int],
    sigma: float = 4.0,
) -> AnomalyScoreMap:
    """Residual score map: per-location squared channel L2, upsampled, smoothed.

    ``f_org`` and ``f_fu_g`` are (C, H', W') feature maps on the same grid.
    The raw map is bilinearly upsampled to ``target_hw`` and smoothed with a
    Gaussian of ``sigma`` pixels; the image score is the smoothed maximum.
    """
    f_org = np.asarray(f_org, dtype=np.float64)
    f_fu_g = np.asarray(f_fu_g, dtype=np.float64)
    if f_org.shape != f_fu_g.shape or f_org.ndim != 3:
        raise ValueError("anomaly_map expects two (C, H, W) arrays of equal shape")
    residual = f_org - f_fu_g
    raw = (residual * residual).sum(axis=0)
    up = bilinear_resize(raw, target_hw)
    smoothed = ndimage.gaussian_filter(up, sigma=sigma)
    return AnomalyScoreMap(map=smoothed, image_score=float(smoothed.max()))


def anomaly_map_from_logits(
    logits: np.ndarray, target_hw: tuple[int, int], sigma: float = 4.0
) -> AnomalyScoreMap:
    """Score map from a learned per-pixel head: sigmoid, upsample, smooth."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("expected a 2-D logit map")
    prob = 1.0 / (1.0 + np.exp(-logits))
    up = bilinear_resize(prob, target_hw)
    smoothed = ndimage.gaussian_filter(up, sigma=sigma)
    return AnomalyScoreMap(map=smoothed, image_score=float(smoothed.max()))


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half.

    Computed with average ranks (Mann-Whitney). Raises
    :class:`UndefinedMetricError` unless both classes are present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auroc needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """AUROC over the flattened pixels of all test images."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks)
    if maps.shape != masks.shape:
        raise ValueError("maps and masks must have equal shapes")
    return auroc(maps.ravel(), (masks > 0).astype(np.int64).ravel())


def _pro_curve(maps: np.ndarray, masks: np.ndarray):
    """FPR and mean per-region-overlap step curves over descending thresholds.

    Returns arrays starting at the virtual (0, 0) anchor and ending at
    (1, 1), one point per distinct score value.
    """
    # label ground-truth defect regions per image, 8-connectivity
    structure = np.ones((3, 3), dtype=bool)
    region_id = np.full(masks.shape, -1, dtype=np.int64)
    n_regions = 0
    region_sizes = []
    for i in range(masks.shape[0]):
        lab, n = ndimage.label(masks[i], structure=structure)
        for r in range(1, n + 1):
            sel = lab == r
            region_id[i][sel] = n_regions
            region_sizes.append(int(sel.sum()))
            n_regions += 1
    if n_regions == 0:
        raise UndefinedMetricError("aupro needs at least one anomalous region")

    neg = ~masks
    neg_total = int(neg.sum())
    if neg_total == 0:
        raise UndefinedMetricError("aupro needs at least one normal pixel")

    scores = maps.ravel()
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    neg_sorted = neg.ravel()[order]
    rid_sorted = region_id.ravel()[order]

    # each pixel contributes 1/|its region| to the summed overlap
    sizes = np.asarray(region_sizes, dtype=np.float64)
    weights = np.where(rid_sorted >= 0, 1.0 / sizes[np.maximum(rid_sorted, 0)], 0.0)

    fpr_cum = np.cumsum(neg_sorted) / neg_total
    pro_cum = np.cumsum(weights) / n_regions

    # one curve point per distinct threshold: the last index of each run
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundaries, [sorted_scores.size - 1]])
    fprs = np.concatenate([[0.0], fpr_cum[idx]])
    pros = np.concatenate([[0.0], pro_cum[idx]])
    return fprs, pros


def aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    """Area under the per-region-overlap vs FPR curve, normalized to the limit.

    Connected defect regions use 8-connectivity. The step curve over all
    distinct thresholds is integrated by trapezoid up to ``fpr_limit`` (with
    linear interpolation at the cut) and divided by the limit.
    """
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError("fpr_limit must be in (0, 1]")
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks) > 0
    if maps.ndim == 2:
        maps = maps[None]
        masks = masks[None]
    if maps.shape != masks.shape or maps.ndim != 3:
        raise ValueError("aupro expects matching (N, H, W) maps and masks")

    fprs, pros = _pro_curve(maps, masks)
    area = 0.0
    for i in range(1, fprs.size):
        x0, x1 = fprs[i - 1], fprs[i]
        y0, y1 = pros[i - 1], pros[i]
        if x0 >= fpr_limit:
            break
        if x1 <= x0:
            continue
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
        if x1 >= fpr_limit:
            break
    return float(area / fpr_limit)


@dataclass
class MetricsHistory:
    """Per-step, per-object evaluation records for incremental training.

    ``records[(step, obj)]`` holds a metric dict for every object evaluated
    at that step; every object introduced at or before a step must have a
    record at that step.
    """

    records: dict[tuple[int, str], dict[str, float]] = field(default_factory=dict)

    def add(self, step: int, obj: str, **metrics: float) -> None:
        self.records[(int(step), str(obj))] = {k: float(v) for k, v in metrics.items()}

    def steps(self) -> list[int]:
        return sorted({s for s, _ in self.records})

    def objects(self) -> list[str]:
        return sorted({o for _, o in self.records})

    def value(self, step: int, obj: str, kind: str) -> float:
        rec = self.records.get((step, obj))
        if rec is None:
            raise KeyError(f"no record for object {obj!r} at step {step}")
        if kind not in rec:
            raise KeyError(f"metric {kind!r} missing for object {obj!r} at step {step}")
        return rec[kind]

    def first_step(self, obj: str) -> int:
        steps = [s for (s, o) in self.records if o == obj]
        if not steps:
            raise KeyError(f"object {obj!r} never evaluated")
        return min(steps)


def forgetting_metric(history: MetricsHistory, kind: str = "iauroc") -> float:
    """Mean over early objects of their worst accuracy drop to the final step.

    For each object first evaluated before the final step, take the maximum
    over earlier steps of (accuracy then - accuracy at the final step), and
    average those maxima. The result inherits the scale of the recorded
    accuracies and is undefined for single-step histories.
    """
    steps = history.steps()
    if len(steps) < 2:
        raise UndefinedMetricError("forgetting is undefined for a single step")
    final = steps[-1]
    drops = []
    for obj in history.objects():
        first = history.first_step(obj)
        if first >= final:
            continue
        final_val = history.value(final, obj, kind)
        candidates = [
            history.value(s, obj, kind) - final_val
            for s in steps
            if first <= s < final and (s, obj) in history.records
        ]
        drops.append(max(candidates))
    if not drops:
        raise UndefinedMetricError("no object was evaluated before the final step")
    return float(np.mean(drops))
