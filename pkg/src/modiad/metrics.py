"""Image-level AUROC and pixel-level AUPRO."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .anomaly import score_set
from .errors import ConfigError, DegenerateLabelsError, InvalidInputError

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def auroc(scores, labels) -> float:
    """Probability that a random anomalous score beats a random normal one (ties count 1/2).

    Computed from average ranks (Mann-Whitney U), which equals trapezoidal
    integration of the ROC curve.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUROC needs both anomalous and normal samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def label_regions(mask, connectivity: int = 4):
    """Connected components of a boolean grid; returns ``(labels, n_regions)``."""
    if connectivity not in _STRUCTURES:
        raise ConfigError("connectivity must be 4 or 8", key="metrics.connectivity")
    return ndimage.label(np.asarray(mask, dtype=bool), structure=_STRUCTURES[connectivity])


def pro_curve(maps, masks, connectivity: int = 4):
    """Exact (FPR, PRO) points over every distinct map value, starting at (0, 0).

    Regions are pooled over all samples. A pixel is predicted anomalous when
    its score is >= the threshold. PRO is the mean over regions of the covered
    fraction; FPR is measured over every pixel outside all regions.
    """
    scores, weights, negatives = [], [], []
    n_regions = 0
    per_region_weight = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.zeros(amap.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if amap.shape != mask.shape:
            raise InvalidInputError(f"map shape {amap.shape} does not match mask shape {mask.shape}")
        labels, n = label_regions(mask, connectivity)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        w = np.zeros(labels.size)
        flat = labels.ravel()
        inside = flat > 0
        w[inside] = 1.0 / sizes[flat[inside]]
        per_region_weight.append(w)
        scores.append(amap.ravel())
        negatives.append(~inside)
        n_regions += n
    if n_regions == 0:
        raise DegenerateLabelsError("AUPRO needs at least one anomalous region")
    scores = np.concatenate(scores)
    weights = np.concatenate(per_region_weight) / n_regions
    negatives = np.concatenate(negatives)
    n_neg = int(negatives.sum())
    if n_neg == 0:
        raise DegenerateLabelsError("AUPRO needs at least one anomaly-free pixel")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pro = np.cumsum(weights[order])
    fpr = np.cumsum(negatives[order]) / n_neg
    last_of_level = np.r_[s[1:] != s[:-1], True]
    return np.r_[0.0, fpr[last_of_level]], np.r_[0.0, pro[last_of_level]]


def integrate_until(x, y, limit: float) -> float:
    """Trapezoid area under the piecewise-linear (x, y) curve on ``[0, limit]``."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def aupro(maps, masks, fpr_limit: float = 0.3, connectivity: int = 4) -> float:
    """Area under PRO vs FPR on ``[0, fpr_limit]``, divided by ``fpr_limit``."""
    if not 0.0 < fpr_limit <= 1.0:
        raise ConfigError(f"fpr_limit must lie in (0, 1], got {fpr_limit}", key="metrics.fpr_limits")
    fpr, pro = pro_curve(maps, masks, connectivity)
    return float(integrate_until(fpr, pro, fpr_limit) / fpr_limit)


def per_class_report(bank, test_sets, fpr_limits=(0.1, 0.05), *, reduction="max", connectivity=4,
                     adapters=None) -> dict:
    """Per-class I-AUROC and AUPRO at each limit, plus the unweighted class mean.

    ``bank`` maps class id to ClassModel; ``test_sets`` maps class id to a
    sequence of labeled samples. Returns ``{"classes": {c: {...}}, "mean": {...}}``
    with metric keys ``i_auroc`` and ``aupro@<limit>``.
    """
    if set(bank) != set(test_sets):
        raise InvalidInputError("bank and test sets must cover the same classes")
    adapters = adapters or {}
    rows = {}
    for c in sorted(bank):
        scores, maps, labels, masks = score_set(bank[c], test_sets[c], adapters.get(c), reduction)
        try:
            row = {"i_auroc": auroc(scores, labels)}
            for lim in fpr_limits:
                row[aupro_key(lim)] = aupro(maps, masks, lim, connectivity)
        except DegenerateLabelsError as exc:
            raise DegenerateLabelsError(f"class {c}: {exc}") from exc
        rows[c] = row
    keys = ["i_auroc"] + [aupro_key(lim) for lim in fpr_limits]
    mean = {k: float(np.mean([rows[c][k] for c in rows])) if rows else float("nan") for k in keys}
    return {"classes": rows, "mean": mean}


def aupro_key(limit: float) -> str:
    return f"aupro@{limit:g}"
