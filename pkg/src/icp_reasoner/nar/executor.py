"""Teacher-forced and self-fed rollouts of the executor, and inference on raw clouds."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..geometry import CorrespondenceSet, PointCloud
from ..trajectory import (
    SPECS,
    NormalizationParams,
    Trajectory,
    TrajectoryStep,
    _input_step,
    _scale,
    _unscale,
    COORD_GROUP,
    initial_hint,
)
from .model import (
    ModelParams,
    ProcessorState,
    decode_step,
    encode_step,
    postprocess,
    process_step,
)

HINT_NAMES = tuple(p.name for p in SPECS.values() if p.stage == "hint")
PHASES = 2


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"


def rollout_cap(t_max: int) -> int:
    return 2 * int(t_max) * PHASES


@dataclass
class RolloutResult:
    preds: List[Dict[str, Tensor]]
    final: Dict[str, Tensor]
    stop_index: int
    terminated: bool
    encoder_hints: List[Dict[str, np.ndarray]] = field(default_factory=list)
    stop_probs: List[float] = field(default_factory=list)


def _as_encoder_hint(step: TrajectoryStep) -> Dict[str, np.ndarray]:
    return {k: step[k] for k in HINT_NAMES}


def _feed(pred: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Detached soft predictions, ready to be re-encoded."""
    return postprocess({k: pred[k] for k in HINT_NAMES})


def _step(params, inputs, hint_vals, state, n, hints=True, outputs=False):
    values = dict(inputs)
    values.update(hint_vals)
    z = encode_step(values, params, n)
    state = process_step(z, state, params)
    return state, decode_step(state, z, params, hints=hints, outputs=outputs)


def rollout(traj: Trajectory, params: ModelParams, mode: Mode = Mode.TRAIN,
            teacher_prob: Optional[float] = None, rng: Optional[np.random.Generator] = None,
            gt_step: Optional[bool] = None, cap: Optional[int] = None,
            per_step_coin: bool = True) -> RolloutResult:
    """Run the executor over a normalised trajectory.

    Train mode runs exactly as many steps as the trajectory has hints. Each
    step's encoder hint is the ground truth of the previous step with
    probability ``teacher_prob``, otherwise the previous prediction. Inference
    always self-feeds and halts after the first step whose termination
    probability exceeds 0.5, or at ``cap``. With ``gt_step`` the output probes
    are decoded at one extra step, otherwise at the stopping step.
    """
    mode = Mode(mode)
    n = traj.n
    hidden = params.cfg.hidden_dim
    inputs = dict(traj.input.values)
    gt_step = bool(traj.meta.get("gt_optimisation", False)) if gt_step is None else gt_step
    teacher_prob = params.cfg.teacher_prob if teacher_prob is None else teacher_prob
    rng = np.random.default_rng(0) if rng is None else rng
    traj_coin = rng.random() < teacher_prob if not per_step_coin else None

    state = ProcessorState.zeros(n, hidden)
    hint_vals = _as_encoder_hint(initial_hint(traj))
    preds, seen, probs = [], [], []
    if mode is Mode.TRAIN:
        horizon = len(traj.hints)
    else:
        horizon = cap if cap is not None else rollout_cap(traj.meta.get("t_max", 50))
    terminated = False
    final = None
    t = 0
    while t < horizon:
        last_train = mode is Mode.TRAIN and t == horizon - 1
        seen.append(hint_vals)
        state, pred = _step(params, inputs, hint_vals, state, n,
                            outputs=last_train and not gt_step)
        preds.append(pred)
        p_stop = float(ad.sigmoid_np(pred["stop"].data))
        probs.append(p_stop)
        t += 1
        if mode is Mode.INFERENCE and p_stop > 0.5:
            terminated = True
            break
        if mode is Mode.TRAIN and t < horizon:
            coin = rng.random() < teacher_prob if per_step_coin else traj_coin
            hint_vals = _as_encoder_hint(traj.hints[t - 1]) if coin else _feed(pred)
        else:
            hint_vals = _feed(pred)
    if mode is Mode.TRAIN:
        terminated = True
    last_pred = preds[-1]
    if gt_step or mode is Mode.INFERENCE:
        if mode is Mode.TRAIN:
            coin = rng.random() < teacher_prob if per_step_coin else traj_coin
            hint_vals = _as_encoder_hint(traj.hints[-1]) if coin else _feed(last_pred)
        else:
            hint_vals = _feed(last_pred)
        if gt_step:
            seen.append(hint_vals)
            _, final = _step(params, inputs, hint_vals, state, n, hints=False, outputs=True)
        else:
            # outputs read from the stopping step's latent state
            final = _decode_outputs(params, inputs, seen[-1], state, n)
    else:
        final = {k: v for k, v in last_pred.items() if SPECS[k].stage == "output"}
    preds = [{k: v for k, v in p.items() if SPECS[k].stage == "hint"} for p in preds]
    return RolloutResult(preds, final, t, terminated, seen, probs)


def _decode_outputs(params, inputs, hint_vals, state, n):
    values = dict(inputs)
    values.update(hint_vals)
    z = encode_step(values, params, n)
    return decode_step(state, z, params, hints=False, outputs=True)


# -- inference on raw clouds ----------------------------------------------


@dataclass
class InferenceResult:
    final_src: PointCloud
    final_tgt: PointCloud
    correspondences: CorrespondenceSet
    stop_step: int
    phase_labels: List[int]
    terminated: bool
    steps: List[TrajectoryStep] = field(default_factory=list, repr=False)


def decode_mask(probs: np.ndarray, src_mask=None, tgt_mask=None) -> CorrespondenceSet:
    """Threshold at 0.5 then keep each row's argmax, so a row has at most one match."""
    p = np.asarray(probs, dtype=np.float64)
    n_src, n_tgt = p.shape
    if tgt_mask is not None:
        p = np.where(np.asarray(tgt_mask, bool)[None, :], p, -np.inf)
    idx = np.full(n_src, -1, dtype=np.int64)
    for i in range(n_src):
        if src_mask is not None and not src_mask[i]:
            continue
        j = int(np.argmax(p[i]))
        if p[i, j] > 0.5:
            idx[i] = j
    return CorrespondenceSet.from_indices(idx, n_tgt)


def input_normalization(src: PointCloud, tgt: PointCloud, squash_c: float) -> NormalizationParams:
    """Coordinate range from the input clouds alone (no trajectory is available)."""
    pts = np.concatenate([src.points[src.mask], tgt.points[tgt.mask]])
    lo, hi = float(pts.min()), float(pts.max())
    return NormalizationParams({COORD_GROUP: (lo, hi), "distances": (0.0, hi - lo)}, squash_c)


def infer(src: PointCloud, tgt: PointCloud, params: ModelParams, t_max: int = 50,
          gt_step: bool = False, squash_c: float = 5.0) -> InferenceResult:
    """Self-fed rollout on a raw pair, returned in the clouds' own units."""
    if len(src) != len(tgt):
        raise ValueError("fit both clouds to the model node count first")
    norm = input_normalization(src, tgt, squash_c)
    lo, hi = norm.ranges[COORD_GROUP]
    inp = _input_step(src, tgt)
    pc = np.array(inp["pointclouds"])
    pc[:, :6] = _scale(pc[:, :6], lo, hi)
    inp.values["pointclouds"] = pc
    traj = Trajectory(inp, [], TrajectoryStep(), np.array(src.mask), np.array(tgt.mask),
                      norm, None, {"t_max": int(t_max), "gt_optimisation": bool(gt_step)})
    with ad.no_grad():
        res = rollout(traj, params, Mode.INFERENCE, gt_step=gt_step)
    final = postprocess(res.final)
    f_src = _unscale(final["final_src"], lo, hi)
    f_tgt = _unscale(final["final_tgt"], lo, hi)
    corr = decode_mask(final["final_correspondences"], src.mask, tgt.mask)
    phases = [int(np.argmax(postprocess({"phase": p["phase"]})["phase"])) for p in res.preds]
    steps = [TrajectoryStep(postprocess(p)) for p in res.preds]
    return InferenceResult(
        final_src=PointCloud(f_src, src.features, src.mask),
        final_tgt=PointCloud(f_tgt, tgt.features, tgt.mask),
        correspondences=corr,
        stop_step=res.stop_index,
        phase_labels=phases,
        terminated=res.terminated,
        steps=steps,
    )
