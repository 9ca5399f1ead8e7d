"""Best-of-S displacement errors."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def displacement_errors(pred, gt):
    """Per-sample ADE and FDE, each ``(N, S)``."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.ndim != 4 or gt.ndim != 3 or pred.shape[0] != gt.shape[0] or pred.shape[2:] != gt.shape[1:]:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} are not (N,S,T,2) / (N,T,2)")
    dist = np.linalg.norm(pred - gt[:, None], axis=-1)
    return dist.mean(axis=-1), dist[..., -1]


def ade_fde(pred, gt) -> tuple[float, float]:
    """Mean over agents of min-over-S ADE and min-over-S FDE.

    The two minima are taken independently, so the best sample for ADE need
    not be the best one for FDE.
    """
    ade, fde = displacement_errors(pred, gt)
    if ade.shape[0] == 0:
        raise ShapeError("no agents to evaluate")
    return float(ade.min(axis=1).mean()), float(fde.min(axis=1).mean())
