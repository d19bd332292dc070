"""Segmentation evaluation metrics.

Pixelwise metrics (dice, jaccard, precision, recall, specificity, MAE) are
computed from confusion counts and are brute-force verifiable. The
structure-aware metrics follow their origin definitions:

* weighted F-measure: errors are smoothed inside the foreground by a 7x7
  Gaussian (sigma 5) and discounted in the background by distance to the
  nearest foreground pixel, then combined into weighted precision/recall.
* structure measure: object-level similarity of foreground/background means
  blended with a 4-quadrant region similarity around the foreground centroid.
* max enhanced-alignment: mean-centered agreement between a binarized
  prediction and the mask, quadratically enhanced, maximized over the
  binarizations the prediction can produce. Scores are normalized by pixel
  count so a perfect prediction scores exactly 1.

Degenerate conventions (empty masks, empty predictions) are pinned by the
test suite. Metrics that are undefined for an input (weighted F-measure on
an all-background mask, boundary distance for a class absent everywhere)
return NaN and are excluded from dataset aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DimensionError

EPS = float(np.spacing(1.0))


@dataclass
class MetricParams:
    binarize_threshold: float = 0.5
    e_measure_thresholds: int = 256
    s_alpha: float = 0.5
    fw_beta2: float = 1.0
    fw_gauss_size: int = 7
    fw_gauss_sigma: float = 5.0
    threshold_mode: str = "fixed"  # or "sweep_mean"

    def __post_init__(self):
        if self.e_measure_thresholds < 1:
            raise ConfigError(f"e_measure_thresholds must be >= 1, got {self.e_measure_thresholds}")
        if not 0.0 < self.s_alpha < 1.0:
            raise ConfigError(f"s_alpha must be in (0,1), got {self.s_alpha}")
        if self.threshold_mode not in ("fixed", "sweep_mean"):
            raise ConfigError(f"threshold_mode must be 'fixed' or 'sweep_mean', got {self.threshold_mode!r}")


def _as_binary(arr: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == bool:
        return a
    vals = np.unique(a)
    if not np.all(np.isin(vals, (0, 1))):
        raise DataError(f"{what} must be binary 0/1, found values {vals[:8]}")
    return a.astype(bool)


def _check_same_shape(p: np.ndarray, g: np.ndarray) -> None:
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != mask shape {g.shape}")


# ---------------------------------------------------------------------------
# confusion-count metrics


def confusion(pred_bin, mask_bin) -> Tuple[int, int, int, int]:
    p = _as_binary(pred_bin, "prediction")
    g = _as_binary(mask_bin, "mask")
    _check_same_shape(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return tp, fp, fn, tn


def dice(pred_bin, mask_bin) -> float:
    tp, fp, fn, _ = confusion(pred_bin, mask_bin)
    if tp + fp + fn == 0:
        return 1.0  # both empty
    return 2.0 * tp / (2.0 * tp + fp + fn)


def iou_jaccard(pred_bin, mask_bin) -> float:
    tp, fp, fn, _ = confusion(pred_bin, mask_bin)
    if tp + fp + fn == 0:
        return 1.0  # both empty
    return tp / (tp + fp + fn)


def precision(pred_bin, mask_bin) -> float:
    tp, fp, fn, _ = confusion(pred_bin, mask_bin)
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0  # nothing predicted: perfect only on empty masks
    return tp / (tp + fp)


def recall(pred_bin, mask_bin) -> float:
    tp, _, fn, _ = confusion(pred_bin, mask_bin)
    if tp + fn == 0:
        return 1.0  # empty mask: vacuously recalled
    return tp / (tp + fn)


def specificity(pred_bin, mask_bin) -> float:
    _, fp, _, tn = confusion(pred_bin, mask_bin)
    if tn + fp == 0:
        return 1.0  # mask covers everything: no negatives to protect
    return tn / (tn + fp)


def mae(pred_prob, mask) -> float:
    p = np.asarray(pred_prob, dtype=np.float64)
    g = np.asarray(mask, dtype=np.float64)
    _check_same_shape(p, g)
    return float(np.abs(p - g).mean())


# ---------------------------------------------------------------------------
# weighted F-measure


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def f_beta_w(pred_prob, mask_bin, params: Optional[MetricParams] = None) -> float:
    """Boundary-aware weighted F-measure; NaN when the mask has no foreground."""
    params = params or MetricParams()
    p = np.asarray(pred_prob, dtype=np.float64)
    g = _as_binary(mask_bin, "mask")
    _check_same_shape(p, g)
    if not g.any():
        return float("nan")

    err = np.abs(p - g)
    dist, idx = ndimage.distance_transform_edt(~g, return_indices=True)
    err_t = err.copy()
    bg = ~g
    err_t[bg] = err[idx[0][bg], idx[1][bg]]
    smoothed = ndimage.correlate(
        err_t, _gauss_kernel(params.fw_gauss_size, params.fw_gauss_sigma), mode="constant"
    )
    min_err = err.copy()
    take = g & (smoothed < err)
    min_err[take] = smoothed[take]
    importance = np.ones_like(err)
    importance[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    ew = min_err * importance

    fg_total = float(g.sum())
    tp_w = fg_total - float(ew[g].sum())
    fp_w = float(ew[bg].sum())
    r_w = 1.0 - float(ew[g].mean())
    p_w = tp_w / (tp_w + fp_w + EPS)
    b2 = params.fw_beta2
    return (1.0 + b2) * p_w * r_w / (b2 * p_w + r_w + EPS)


# ---------------------------------------------------------------------------
# structure measure


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(p: np.ndarray, g: np.ndarray) -> float:
    o_fg = _object_score(p[g])
    o_bg = _object_score((1.0 - p)[~g])
    u = float(g.mean())
    return u * o_fg + (1.0 - u) * o_bg


def _ssim_block(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 1.0
    x = float(p.mean())
    y = float(g.mean())
    sx = float(((p - x) ** 2).sum()) / (n - 1 + EPS)
    sy = float(((g - y) ** 2).sum()) / (n - 1 + EPS)
    sxy = float(((p - x) * (g - y)).sum()) / (n - 1 + EPS)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0.0:
        return a / (b + EPS)
    return 1.0 if b == 0.0 else 0.0


def _s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    total = g.sum()
    if total == 0:
        cx, cy = round(w / 2), round(h / 2)
    else:
        cols = np.arange(1, w + 1, dtype=np.float64)
        rows = np.arange(1, h + 1, dtype=np.float64)
        cx = int(round(float((g.sum(axis=0) * cols).sum() / total)))
        cy = int(round(float((g.sum(axis=1) * rows).sum() / total)))
    cx = min(max(cx, 1), w - 1) if w > 1 else 1
    cy = min(max(cy, 1), h - 1) if h > 1 else 1

    area = float(h * w)
    weights = [
        cx * cy / area,
        (w - cx) * cy / area,
        cx * (h - cy) / area,
    ]
    weights.append(1.0 - sum(weights))
    blocks = [
        (p[:cy, :cx], g[:cy, :cx]),
        (p[:cy, cx:], g[:cy, cx:]),
        (p[cy:, :cx], g[cy:, :cx]),
        (p[cy:, cx:], g[cy:, cx:]),
    ]
    return sum(wt * _ssim_block(pb, gb.astype(np.float64)) for wt, (pb, gb) in zip(weights, blocks))


def s_measure(pred_prob, mask_bin, alpha: float = 0.5) -> float:
    """Structure measure in [0,1]; degenerate masks fall back to mean scores."""
    p = np.asarray(pred_prob, dtype=np.float64)
    g = _as_binary(mask_bin, "mask")
    _check_same_shape(p, g)
    y = float(g.mean())
    if y == 0.0:
        return 1.0 - float(p.mean())
    if y == 1.0:
        return float(p.mean())
    score = alpha * _s_object(p, g) + (1.0 - alpha) * _s_region(p, g)
    return max(score, 0.0)


# ---------------------------------------------------------------------------
# enhanced-alignment measure


def _alignment_score(fm: np.ndarray, g: np.ndarray) -> float:
    n = g.size
    dfm = fm.astype(np.float64)
    dg = g.astype(np.float64)
    if not g.any():
        enhanced = 1.0 - dfm
    elif g.all():
        enhanced = dfm
    else:
        afm = dfm - dfm.mean()
        ag = dg - dg.mean()
        align = 2.0 * ag * afm / (ag * ag + afm * afm + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.sum()) / n


def e_measure_max(pred_prob, mask_bin, n_thresholds: int = 256) -> float:
    """Max enhanced-alignment score over the prediction's binarizations.

    When the prediction has at most n_thresholds distinct values the sweep
    covers every binarization it can produce (plus the empty one), making
    the result invariant to strictly monotone remappings; denser maps fall
    back to a uniform threshold grid.
    """
    p = np.asarray(pred_prob, dtype=np.float64)
    g = _as_binary(mask_bin, "mask")
    _check_same_shape(p, g)
    levels = np.unique(p)
    if levels.size > n_thresholds:
        levels = np.linspace(float(p.min()), float(p.max()), n_thresholds)
    best = _alignment_score(np.zeros_like(g), g)  # empty binarization
    for t in levels:
        best = max(best, _alignment_score(p >= t, g))
    return best


# ---------------------------------------------------------------------------
# layer boundary distance


def med(pred_labels, mask_labels, class_id: int, height_penalty: Optional[float] = None) -> float:
    """Mean distance in pixels between predicted and true band boundaries.

    Per column, the class must occupy one contiguous row band in the mask;
    the top and bottom rows of the band are compared against the
    prediction's extremes. Columns without the class in the mask are
    skipped; columns where only the prediction misses it cost the image
    height. NaN when the class appears nowhere in the mask.
    """
    p = np.asarray(pred_labels)
    g = np.asarray(mask_labels)
    _check_same_shape(p, g)
    if p.ndim != 2:
        raise DimensionError(f"label maps must be 2-D, got shape {p.shape}")
    h, w = g.shape
    penalty = float(height_penalty if height_penalty is not None else h)
    diffs: List[float] = []
    for col in range(w):
        g_rows = np.flatnonzero(g[:, col] == class_id)
        if g_rows.size == 0:
            continue
        if g_rows[-1] - g_rows[0] + 1 != g_rows.size:
            raise DataError(
                f"mask class {class_id} is not a contiguous band in column {col}"
            )
        p_rows = np.flatnonzero(p[:, col] == class_id)
        if p_rows.size == 0:
            diffs.extend((penalty, penalty))
        else:
            diffs.append(abs(float(p_rows[0]) - float(g_rows[0])))
            diffs.append(abs(float(p_rows[-1]) - float(g_rows[-1])))
    if not diffs:
        return float("nan")
    return float(np.mean(diffs))


# ---------------------------------------------------------------------------
# dataset-level evaluation


BINARY_METRICS = ("dice", "iou", "precision", "recall", "specificity", "mae", "fbw", "s_measure", "e_measure")


@dataclass
class MetricReport:
    per_image: List[Dict[str, float]] = field(default_factory=list)
    aggregate: Dict[str, float] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)

    def to_kv_lines(self) -> str:
        lines = [f"{k}={v}" for k, v in sorted(self.meta.items())]
        lines += [f"{k}={v:.6f}" for k, v in sorted(self.aggregate.items())]
        return "\n".join(lines) + "\n"

    def to_text_table(self) -> str:
        keys = sorted(self.aggregate)
        width = max((len(k) for k in keys), default=6) + 2
        rows = [f"{'metric':<{width}}value"]
        rows += [f"{k:<{width}}{self.aggregate[k]:.6f}" for k in keys]
        return "\n".join(rows) + "\n"


def _aggregate(per_image: List[Dict[str, float]]) -> Dict[str, float]:
    agg: Dict[str, float] = {}
    if not per_image:
        return agg
    for key in per_image[0]:
        vals = np.array([img[key] for img in per_image], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        agg["m" + key] = float(vals.mean()) if vals.size else float("nan")
    return agg


def _sweep_mean(metric_fn, p: np.ndarray, g: np.ndarray, n: int) -> float:
    ts = np.linspace(0.0, 1.0, n)
    return float(np.mean([metric_fn(p >= t, g) for t in ts]))


def evaluate_binary(
    predictions: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    params: Optional[MetricParams] = None,
) -> MetricReport:
    """Per-image metrics over probability maps and binary masks, then means.

    NaN entries (undefined metrics) are excluded from the aggregation.
    """
    params = params or MetricParams()
    if len(predictions) != len(masks):
        raise DataError(f"{len(predictions)} predictions vs {len(masks)} masks")
    report = MetricReport(meta={"threshold_mode": params.threshold_mode, "n_images": str(len(masks))})
    for p, g in zip(predictions, masks):
        p = np.asarray(p, dtype=np.float64)
        gb = _as_binary(g, "mask")
        if params.threshold_mode == "sweep_mean":
            d = _sweep_mean(dice, p, gb, params.e_measure_thresholds)
            j = _sweep_mean(iou_jaccard, p, gb, params.e_measure_thresholds)
            pb = p >= params.binarize_threshold
        else:
            pb = p >= params.binarize_threshold
            d = dice(pb, gb)
            j = iou_jaccard(pb, gb)
        report.per_image.append(
            {
                "dice": d,
                "iou": j,
                "precision": precision(pb, gb),
                "recall": recall(pb, gb),
                "specificity": specificity(pb, gb),
                "mae": mae(p, gb),
                "fbw": f_beta_w(p, gb, params),
                "s_measure": s_measure(p, gb, params.s_alpha),
                "e_measure": e_measure_max(p, gb, params.e_measure_thresholds),
            }
        )
    report.aggregate = _aggregate(report.per_image)
    return report


def evaluate_labels(
    predictions: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    num_classes: int,
    params: Optional[MetricParams] = None,
) -> MetricReport:
    """Per-class dice and boundary distance for label maps (argmax output).

    Class 0 is treated as background and excluded from the macro means.
    """
    params = params or MetricParams()
    if num_classes < 2:
        raise ConfigError("evaluate_labels needs num_classes >= 2")
    report = MetricReport(meta={"n_images": str(len(masks)), "num_classes": str(num_classes)})
    for p, g in zip(predictions, masks):
        p = np.asarray(p)
        g = np.asarray(g)
        row: Dict[str, float] = {}
        for c in range(1, num_classes):
            row[f"dice_c{c}"] = dice(p == c, g == c)
            row[f"med_c{c}"] = med(p, g, c)
        row["dice"] = float(np.mean([row[f"dice_c{c}"] for c in range(1, num_classes)]))
        med_vals = [row[f"med_c{c}"] for c in range(1, num_classes)]
        med_vals = [v for v in med_vals if not np.isnan(v)]
        row["med"] = float(np.mean(med_vals)) if med_vals else float("nan")
        report.per_image.append(row)
    report.aggregate = _aggregate(report.per_image)
    return report


def fold_summary(reports: Sequence[MetricReport]) -> Dict[str, Tuple[float, float]]:
    """Across-fold mean and population standard deviation per metric."""
    keys = sorted(set().union(*(r.aggregate.keys() for r in reports)))
    out = {}
    for k in keys:
        vals = np.array([r.aggregate[k] for r in reports if k in r.aggregate], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"
