"""Anomaly maps from cross-modal prediction discrepancy."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .lora import ClassAdapter, lora_forward
from .nn import COS_GUARD, ClassModel, mapper_forward

REDUCTIONS = ("max", "mean")


def _unit_rows(x):
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + COS_GUARD)


def discrepancy(observed, predicted) -> np.ndarray:
    """Per-row Euclidean distance between L2-normalized rows (a chord length in [0, 2])."""
    return np.linalg.norm(_unit_rows(observed) - _unit_rows(predicted), axis=1)


def predict(model: ClassModel, e2d, e3d, adapter: ClassAdapter | None = None):
    """Return ``(pred2d, pred3d)``."""
    if adapter is None:
        return mapper_forward(model.map_3d_to_2d, e3d), mapper_forward(model.map_2d_to_3d, e2d)
    return lora_forward(model.map_3d_to_2d, adapter.bwd, e3d), lora_forward(model.map_2d_to_3d, adapter.fwd, e2d)


def anomaly_map(model: ClassModel, sample, adapter: ClassAdapter | None = None):
    """``(psi2d, psi3d, fused)`` as ``grid x grid`` arrays; fused is the elementwise product."""
    if sample.e2d.shape[1] != model.d2d or sample.e3d.shape[1] != model.d3d:
        raise InvalidInputError("sample feature dims do not match the class model")
    grid = sample.grid
    if grid * grid != sample.e2d.shape[0]:
        raise InvalidInputError("sample patches do not form a square grid")
    pred2d, pred3d = predict(model, sample.e2d, sample.e3d, adapter)
    psi2d = discrepancy(sample.e2d, pred2d).reshape(grid, grid)
    psi3d = discrepancy(sample.e3d, pred3d).reshape(grid, grid)
    return psi2d, psi3d, psi2d * psi3d


def image_score(fused, reduction: str = "max") -> float:
    if reduction == "max":
        return float(np.max(fused))
    if reduction == "mean":
        return float(np.mean(fused))
    raise InvalidInputError(f"unknown score reduction {reduction!r}")


def score_set(model: ClassModel, samples, adapter=None, reduction="max"):
    """Image scores, fused maps, labels and masks for a labeled set."""
    scores, maps, labels, masks = [], [], [], []
    for s in samples:
        _, _, fused = anomaly_map(model, s, adapter)
        scores.append(image_score(fused, reduction))
        maps.append(fused)
        labels.append(s.is_anomalous)
        masks.append(s.mask)
    return np.array(scores), maps, np.array(labels, dtype=bool), masks
