"""Per-probe losses: scaled MSE, positive-weighted BCE and categorical CE."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..trajectory import SPECS, Trajectory, TrajectoryStep


def _node_weights(name: str, src_mask, tgt_mask, n):
    if src_mask is None:
        return np.ones(n)
    return (tgt_mask if name.endswith("_tgt") else src_mask).astype(np.float64)


def _edge_weights(src_mask, tgt_mask, n):
    if src_mask is None:
        return np.ones((n, n))
    return np.outer(src_mask, tgt_mask).astype(np.float64)


def scalar_term(pred: Tensor, target, weights=None) -> Tensor:
    diff = pred - np.asarray(target, dtype=np.float64)
    sq = diff * diff
    if weights is None:
        return ad.mean(sq)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64).reshape(
        weights.shape + (1,) * (sq.ndim - np.ndim(weights))), sq.shape)
    return ad.sum_all(sq * w) * (1.0 / max(w.sum(), 1.0))


def pos_weight(target, weights=None, eps: float = 1e-8) -> float:
    y = np.asarray(target, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    ones = float((w * (y == 1)).sum())
    zeros = float((w * (y == 0)).sum())
    return zeros / (ones + eps)


def mask_term(logits: Tensor, target, weights=None, eps: float = 1e-8) -> Tensor:
    """Weighted BCE on logits: -mean(w_pos y log p + (1 - y) log(1 - p))."""
    y = np.asarray(target, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    wp = pos_weight(y, w, eps)
    # -log(sigmoid(l)) = softplus(-l), -log(1 - sigmoid(l)) = softplus(l)
    per = ad.softplus(-logits) * (wp * y * w) + ad.softplus(logits) * ((1.0 - y) * w)
    return ad.sum_all(per) * (1.0 / max(w.sum(), 1.0))


def categorical_term(logits: Tensor, label: int) -> Tensor:
    return -ad.log_softmax(logits)[int(label)]


def stop_term(logit: Tensor, label: int) -> Tensor:
    return ad.softplus(-logit) if int(label) == 1 else ad.softplus(logit)


def step_loss(pred: Dict[str, Tensor], target: TrajectoryStep, alpha: float = 1.0,
              src_mask=None, tgt_mask=None, eps: float = 1e-8,
              components: Optional[dict] = None) -> Tensor:
    """Loss between a predicted frame and its target over the probes both carry.

    ``alpha`` times the mean of per-probe MSEs, plus weighted BCE per mask
    probe, plus CE per categorical probe. ``components`` (if given) receives
    each probe's term as a float.
    """
    scalars, others = [], []
    for name, p in pred.items():
        if name not in target:
            continue
        spec = SPECS[name]
        y = target[name]
        if spec.kind == "scalar":
            if spec.location == "node":
                term = scalar_term(p, y, _node_weights(name, src_mask, tgt_mask, p.shape[0]))
            elif spec.location == "edge":
                term = scalar_term(p, y, _edge_weights(src_mask, tgt_mask, p.shape[0]))
            else:
                term = scalar_term(p, y)
            scalars.append(term)
        elif spec.kind == "mask":
            term = mask_term(p, y, _edge_weights(src_mask, tgt_mask, p.shape[0]), eps)
            others.append(term)
        elif name == "stop":
            term = stop_term(p, y)
            others.append(term)
        else:
            term = categorical_term(p, y)
            others.append(term)
        if components is not None:
            components[name] = float(term.data)
    total = Tensor(0.0)
    if scalars:
        s = scalars[0]
        for t in scalars[1:]:
            s = s + t
        total = total + s * (alpha / len(scalars))
    for t in others:
        total = total + t
    return total


def final_loss(pred_final: Dict[str, Tensor], traj: Trajectory, alpha: float = 1.0,
               eps: float = 1e-8, components: Optional[dict] = None) -> Tensor:
    """Loss on the output probes against the trajectory's output frame.

    The output frame already holds the algorithm result or, for trajectories
    recorded with ground-truth optimisation, the ground-truth targets.
    """
    return step_loss(pred_final, traj.output, alpha, traj.src_mask, traj.tgt_mask, eps,
                     components)
