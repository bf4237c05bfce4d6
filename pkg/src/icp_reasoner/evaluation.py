"""Registration and classification metrics, and run-level report assembly.

Three metric families are produced. ``T`` compares a prediction with the
classical algorithm's final output, ``t`` compares predicted hint steps with
the recorded ones, and ``GT`` compares with the dataset ground truth.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import _io
from . import autodiff as ad
from .datasets import RegistrationSample, fit_pair
from .geometry import CorrespondenceSet, PointCloud, RigidTransform, kabsch_points
from .icp import IcpConfig
from .nar.executor import Mode, decode_mask, rollout
from .nar.model import ModelParams, postprocess
from .trajectory import (
    HintMode,
    Trajectory,
    TrajectoryStep,
    denormalize_step,
    ground_truth_targets,
    normalize,
    record_trajectory,
)


class EvalMode(str, enum.Enum):
    NAR = "nar"
    CLASSICAL = "classical"


class Reference(str, enum.Enum):
    ALGORITHM = "algorithm"
    GROUND_TRUTH = "ground_truth"


# -- primitive metrics -------------------------------------------------------


def rre_argument(r_pred: np.ndarray, r_gt: np.ndarray) -> float:
    """Unclamped ``(trace(R_pred^T R_gt) - 1) / 2``."""
    return float((np.trace(np.asarray(r_pred).T @ np.asarray(r_gt)) - 1.0) / 2.0)


def rte_rre(pred: RigidTransform, gt: RigidTransform):
    """Translation distance and geodesic rotation angle in radians.

    The angle is ``arccos`` of the clamped trace argument. Where the
    argument exceeds 0.5 the same angle is evaluated as
    ``2 arcsin(||R_pred - R_gt||_F / sqrt(8))``, which is identical for
    rotations but keeps full precision at small angles.
    """
    rte = float(np.linalg.norm(pred.translation - gt.translation))
    c = min(1.0, max(-1.0, rre_argument(pred.rotation, gt.rotation)))
    if c > 0.5:
        diff = float(np.linalg.norm(pred.rotation - gt.rotation))
        rre = 2.0 * math.asin(min(1.0, diff / math.sqrt(8.0)))
    else:
        rre = math.acos(c)
    return rte, min(rre, math.pi)


def extract_transform(src_original: PointCloud, pred_src_transformed: PointCloud) -> RigidTransform:
    """Kabsch fit between original and predicted source points, row for row."""
    if len(src_original) != len(pred_src_transformed):
        raise ValueError("clouds must have the same node count")
    mask = src_original.mask & pred_src_transformed.mask
    if mask.sum() != src_original.mask.sum():
        raise ValueError("predicted cloud must keep every unmasked source point")
    return kabsch_points(src_original.points[mask], pred_src_transformed.points[mask])


@dataclass(frozen=True)
class ClassScores:
    f1: float
    precision: float
    recall: float
    balanced_accuracy: float


def _ratio(num, den, empty):
    return num / den if den > 0 else empty


def classification_metrics(pred, truth) -> ClassScores:
    """Entrywise binary scores over two correspondence matrices.

    A ratio with an empty denominator counts as perfect when the matching
    error count is also zero, else as zero.
    """
    p = np.asarray(pred.matrix if isinstance(pred, CorrespondenceSet) else pred) != 0
    t = np.asarray(truth.matrix if isinstance(truth, CorrespondenceSet) else truth) != 0
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    tp = float(np.sum(p & t))
    fp = float(np.sum(p & ~t))
    fn = float(np.sum(~p & t))
    tn = float(np.sum(~p & ~t))
    precision = _ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    tnr = _ratio(tn, tn + fp, 1.0 if fn == 0 else 0.0)
    return ClassScores(f1, precision, recall, (recall + tnr) / 2.0)


def per_axis_mse(pred: PointCloud, truth: PointCloud) -> np.ndarray:
    """MSE along x, y and z separately over unmasked points."""
    if len(pred) != len(truth):
        raise ValueError(f"node count mismatch {len(pred)} vs {len(truth)}")
    if not np.array_equal(pred.mask, truth.mask):
        raise ValueError("clouds must share a padding mask")
    d = pred.points[truth.mask] - truth.points[truth.mask]
    if len(d) == 0:
        raise ValueError("no unmasked points")
    return (d * d).mean(axis=0)


# -- run-level scoring -------------------------------------------------------


@dataclass
class RegistrationScore:
    tag: str
    reference: str
    rte: float
    rre: float
    mse_xyz: List[float]
    mse_xyz_normalized: List[float]
    f1: float
    precision: float
    recall: float
    balanced_accuracy: float
    steps: int
    runtime: float


@dataclass
class Prediction:
    """A registration prediction in dataset units plus its predicted hint steps."""

    sample: RegistrationSample
    src: PointCloud
    tgt: PointCloud
    final_src: PointCloud
    correspondences: CorrespondenceSet
    steps: List[TrajectoryStep]
    stop_step: int
    runtime: float
    reference: Trajectory  # recorded algorithm trajectory, normalised
    terminated: bool = True


def prediction_from_trajectory(sample: RegistrationSample, traj: Trajectory,
                               runtime: float = 0.0, src: Optional[PointCloud] = None,
                               tgt: Optional[PointCloud] = None) -> Prediction:
    """Use a recorded trajectory as the prediction itself (oracle substitution)."""
    norm = traj if traj.normalized else normalize(traj)
    out = denormalize_step(norm.output, norm.normalization)
    src = src or sample.src
    tgt = tgt or sample.tgt
    final_src = PointCloud(out["final_src"], src.features, src.mask)
    corr = CorrespondenceSet(np.asarray(out["final_correspondences"], dtype=np.int8))
    return Prediction(sample, src, tgt, final_src, corr, [h.copy() for h in norm.hints],
                      len(norm.hints), runtime, norm)


def predict(samples: Sequence[RegistrationSample], model: Union[ModelParams, IcpConfig],
            mode: EvalMode, icp_cfg: Optional[IcpConfig] = None,
            hint_mode: HintMode = HintMode.P12, n: Optional[int] = None,
            seed: int = 0, gt_step: bool = False) -> List[Prediction]:
    """Run the classical algorithm or the executor on every sample.

    The executor rolls out self-fed on the normalised reference trajectory,
    so predictions and references share units.
    """
    mode = EvalMode(mode)
    if mode is EvalMode.CLASSICAL:
        icp_cfg = model if isinstance(model, IcpConfig) else icp_cfg
    if icp_cfg is None:
        raise ValueError("an IcpConfig is needed to record reference trajectories")
    out = []
    for s in samples:
        src, tgt = fit_pair(s, n, seed)
        t0 = time.perf_counter()
        raw = record_trajectory(src, tgt, icp_cfg, hint_mode)
        ref = normalize(raw)
        if mode is EvalMode.CLASSICAL:
            out.append(prediction_from_trajectory(s, ref, time.perf_counter() - t0, src, tgt))
            continue
        if not isinstance(model, ModelParams):
            raise TypeError("nar mode needs trained ModelParams")
        model_in = ref
        if gt_step:
            # same ranges the model was trained with (they include the GT output)
            gt_traj = normalize(record_trajectory(src, tgt, icp_cfg, hint_mode,
                                                  s.gt_transform, gt_optimisation=True))
            model_in = gt_traj
            ref = normalize(raw, params=gt_traj.normalization)
        t0 = time.perf_counter()
        with ad.no_grad():
            res = rollout(model_in, model, Mode.INFERENCE, gt_step=gt_step)
        runtime = time.perf_counter() - t0
        final = postprocess(res.final)
        lo_hi = denormalize_step(TrajectoryStep({"final_src": final["final_src"]}),
                                 ref.normalization)["final_src"]
        corr = decode_mask(final["final_correspondences"], src.mask, tgt.mask)
        steps = [TrajectoryStep(postprocess(p)) for p in res.preds]
        out.append(Prediction(s, src, tgt, PointCloud(lo_hi, src.features, src.mask), corr,
                              steps, res.stop_index, runtime, ref, res.terminated))
    return out


def step_mse(pred_steps: Sequence[TrajectoryStep], ref_steps: Sequence[TrajectoryStep],
             probes=("transformed_src", "transformed_tgt"), mask=None) -> List[float]:
    """Per-step MSE of node scalar probes (normalised units) up to the shorter length."""
    out = []
    for p, r in zip(pred_steps, ref_steps):
        errs = []
        for name in probes:
            d = np.asarray(p[name], dtype=np.float64) - np.asarray(r[name], dtype=np.float64)
            if mask is not None:
                d = d[mask]
            errs.append(float((d * d).mean()))
        out.append(float(np.mean(errs)))
    return out


def score(pred: Prediction, reference: Reference) -> RegistrationScore:
    """Score one prediction against the algorithm output or the ground truth.

    Transforms on both sides are extracted by the same Kabsch fit, so a
    prediction equal to the reference scores exactly zero.
    """
    reference = Reference(reference)
    src = pred.src
    norm = pred.reference.normalization
    if reference is Reference.ALGORITHM:
        out = denormalize_step(pred.reference.output, norm)
        ref_src = PointCloud(out["final_src"], src.features, src.mask)
        ref_corr = CorrespondenceSet(np.asarray(out["final_correspondences"], dtype=np.int8))
    else:
        ref_src, _, ref_corr = ground_truth_targets(src, pred.tgt, pred.sample.gt_transform)
    t_pred = extract_transform(src, pred.final_src)
    t_ref = extract_transform(src, ref_src)
    rte, rre = rte_rre(t_pred, t_ref)
    lo, hi = norm.ranges["coordinates"]
    span = hi - lo if hi > lo else 1.0
    mse = per_axis_mse(pred.final_src, ref_src)
    cls = classification_metrics(pred.correspondences, ref_corr)
    return RegistrationScore(
        tag=pred.sample.tag, reference=reference.value, rte=rte, rre=rre,
        mse_xyz=[float(v) for v in mse], mse_xyz_normalized=[float(v) / span ** 2 for v in mse],
        f1=cls.f1, precision=cls.precision, recall=cls.recall,
        balanced_accuracy=cls.balanced_accuracy, steps=pred.stop_step, runtime=pred.runtime,
    )


def summarize(values: Sequence[float]) -> Dict[str, float]:
    """Median, quartiles, IQR and the count of points beyond 1.5 IQR."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return {"count": 0, "median": math.nan, "q1": math.nan, "q3": math.nan,
                "iqr": math.nan, "outliers": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    outliers = int(np.sum((v < q1 - 1.5 * iqr) | (v > q3 + 1.5 * iqr)))
    return {"count": int(len(v)), "median": float(med), "q1": float(q1), "q3": float(q3),
            "iqr": float(iqr), "outliers": outliers}


SUMMARY_FIELDS = ("rte", "rre", "mse", "mse_normalized", "f1", "precision", "recall",
                  "balanced_accuracy", "steps", "runtime")


@dataclass
class RunReport:
    mode: str
    reference: str
    scores: List[RegistrationScore]
    step_mse: List[List[float]] = field(default_factory=list)
    length_mismatch: List[int] = field(default_factory=list)

    def summary(self) -> Dict[str, Dict[str, float]]:
        cols = {
            "rte": [s.rte for s in self.scores],
            "rre": [s.rre for s in self.scores],
            "mse": [float(np.mean(s.mse_xyz)) for s in self.scores],
            "mse_normalized": [float(np.mean(s.mse_xyz_normalized)) for s in self.scores],
            "f1": [s.f1 for s in self.scores],
            "precision": [s.precision for s in self.scores],
            "recall": [s.recall for s in self.scores],
            "balanced_accuracy": [s.balanced_accuracy for s in self.scores],
            "steps": [s.steps for s in self.scores],
            "runtime": [s.runtime for s in self.scores],
        }
        out = {k: summarize(cols[k]) for k in SUMMARY_FIELDS}
        flat = [v for row in self.step_mse for v in row]
        out["step_mse"] = summarize(flat)
        out["length_mismatch"] = {"count": int(sum(1 for m in self.length_mismatch if m))}
        return out


def build_report(preds: Sequence[Prediction], mode: EvalMode, reference: Reference) -> RunReport:
    scores = [score(p, reference) for p in preds]
    smse, mismatch = [], []
    for p in preds:
        mask = p.src.mask & p.tgt.mask
        smse.append(step_mse(p.steps, p.reference.hints, mask=mask))
        mismatch.append(len(p.steps) - len(p.reference.hints))
    return RunReport(EvalMode(mode).value, Reference(reference).value, scores, smse, mismatch)


def evaluate_run(samples: Sequence[RegistrationSample], model: Union[ModelParams, IcpConfig],
                 mode: EvalMode, gt_reference: Reference = Reference.GROUND_TRUTH,
                 icp_cfg: Optional[IcpConfig] = None, hint_mode: HintMode = HintMode.P12,
                 n: Optional[int] = None, seed: int = 0, gt_step: bool = False) -> RunReport:
    preds = predict(samples, model, mode, icp_cfg, hint_mode, n, seed, gt_step)
    return build_report(preds, mode, gt_reference)


# -- report files ------------------------------------------------------------

CSV_FIELDS = ("tag", "family", "rte", "rre", "mse_x", "mse_y", "mse_z", "mse_x_norm",
              "mse_y_norm", "mse_z_norm", "f1", "precision", "recall", "balanced_accuracy",
              "steps", "runtime", "step_mse")


def _num(x) -> str:
    return format(float(x), ".17g")


def reports_csv(reports: Sequence[RunReport], include_runtime: bool = True) -> str:
    """One row per sample per metric family."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for rep in reports:
        family = "T" if rep.reference == Reference.ALGORITHM.value else "GT"
        for s, steps in zip(rep.scores, rep.step_mse):
            w.writerow([s.tag, family, _num(s.rte), _num(s.rre), *map(_num, s.mse_xyz),
                        *map(_num, s.mse_xyz_normalized), _num(s.f1), _num(s.precision),
                        _num(s.recall), _num(s.balanced_accuracy), s.steps,
                        _num(s.runtime) if include_runtime else "",
                        " ".join(_num(v) for v in steps)])
    return buf.getvalue()


def reports_json(reports: Sequence[RunReport], name: str = "run",
                 include_runtime: bool = True) -> str:
    doc = {name: {}}
    for rep in reports:
        family = "T" if rep.reference == Reference.ALGORITHM.value else "GT"
        summary = rep.summary()
        if not include_runtime:
            summary.pop("runtime")
        doc[name][family] = {"mode": rep.mode, "samples": len(rep.scores), "metrics": summary}
    return _io.dumps(doc)
