"""Training loop, Adam with global-norm clipping, and a finite-difference gradient check."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..seeding import stream
from ..trajectory import Trajectory
from .executor import Mode, rollout
from .losses import final_loss, step_loss
from .model import ModelConfig, ModelParams

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the loss turns non-finite; names the step and probe."""

    def __init__(self, message, step=None, probe=None):
        super().__init__(message)
        self.step = step
        self.probe = probe


def sample_loss(traj: Trajectory, params: ModelParams, rng: np.random.Generator,
                teacher_prob: Optional[float] = None, probes: Optional[Sequence[str]] = None,
                components: Optional[dict] = None) -> Tensor:
    """Mean over hint steps of the step loss, plus the final-output loss.

    ``probes`` restricts which probe terms contribute.
    """
    if not traj.normalized:
        raise ValueError("training needs normalised trajectories")
    cfg = params.cfg
    res = rollout(traj, params, Mode.TRAIN, teacher_prob=teacher_prob, rng=rng,
                  per_step_coin=cfg.teacher_per_step)
    keep = (lambda d: d) if probes is None else (
        lambda d: {k: v for k, v in d.items() if k in probes})
    total = Tensor(0.0)
    for t, pred in enumerate(res.preds):
        comp = {} if components is not None else None
        total = total + step_loss(keep(pred), traj.hints[t], cfg.scalar_loss_scale,
                                  traj.src_mask, traj.tgt_mask, cfg.pos_weight_eps, comp)
        if comp is not None:
            for k, v in comp.items():
                components.setdefault(k, []).append(v)
    total = total * (1.0 / max(len(res.preds), 1))
    comp = {} if components is not None else None
    total = total + final_loss(keep(res.final), traj, cfg.scalar_loss_scale,
                               cfg.pos_weight_eps, comp)
    if comp is not None:
        for k, v in comp.items():
            components.setdefault(k, []).append(v)
    return total


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-3, b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params}
        self.v = {k: np.zeros_like(t.data) for k, t in params}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, t in self.params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            t.data = t.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class TrainRecord:
    step: int
    loss: float
    grad_norm: float
    clipped_norm: float


@dataclass
class TrainHistory:
    records: List[TrainRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]


def _diagnose(traj, params, rng_state, teacher_prob):
    comps: dict = {}
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    with ad.no_grad():
        sample_loss(traj, params, rng, teacher_prob, components=comps)
    for name, vals in comps.items():
        if not np.all(np.isfinite(vals)):
            return name
    return None


def batch_gradients(batch: Sequence[Trajectory], params: ModelParams, rng: np.random.Generator,
                    step: int = 0):
    """Mean loss over the batch and its parameter gradients (fixed summation order)."""
    params.zero_grad()
    total = 0.0
    for traj in batch:
        state = rng.bit_generator.state
        loss = sample_loss(traj, params, rng) * (1.0 / len(batch))
        if not np.isfinite(loss.data):
            probe = _diagnose(traj, params, state, None)
            raise TrainingError(f"non-finite loss at step {step} (probe {probe})", step, probe)
        loss.backward()
        total += float(loss.data)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params}
    return total, grads


def train(dataset: Sequence[Trajectory], cfg: ModelConfig,
          params: Optional[ModelParams] = None,
          callback: Optional[Callable[[TrainRecord, ModelParams], Optional[bool]]] = None):
    """Fit the executor to normalised trajectories; returns ``(params, history)``.

    A callback returning ``True`` ends training after the current step.
    """
    if not dataset:
        raise ValueError("training set is empty")
    fdim = dataset[0].feature_dim
    n = dataset[0].n
    for traj in dataset:
        if traj.feature_dim != fdim or traj.n != n:
            raise ValueError("all trajectories must share node count and feature width")
    if params is None:
        params = ModelParams.init(cfg, fdim, stream(cfg.seed, "init"))
    batch_rng = stream(cfg.seed, "batches")
    coin_rng = stream(cfg.seed, "teacher")
    opt = Adam(params, cfg.learn_rate)
    history = TrainHistory()
    size = len(dataset)
    for step in range(cfg.train_steps):
        if size <= cfg.batch_size:
            idx = np.arange(size)
        else:
            idx = batch_rng.choice(size, cfg.batch_size, replace=False)
        loss, grads = batch_gradients([dataset[i] for i in idx], params, coin_rng, step)
        grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient at step {step} in {k}", step, k)
        opt.step(grads)
        rec = TrainRecord(step, loss, norm, global_norm(grads))
        history.records.append(rec)
        if callback is not None and callback(rec, params) is True:
            break
    params.zero_grad()
    return params, history


# -- gradient check --------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_ties: int
    worst: Optional[str] = None
    details: List[tuple] = field(default_factory=list, repr=False)


def grad_check(params: ModelParams, sample: Trajectory, probes: Optional[Sequence[str]] = None,
               n_checks: int = 100, h: float = 1e-5, seed: int = 0,
               param_prefixes: Optional[Sequence[str]] = None,
               abs_floor: float = 1e-6) -> GradCheckResult:
    """Compare analytic gradients with central differences on random coordinates.

    Every step is teacher-forced, since fed-back predictions are detached and
    would otherwise hide part of the loss from backprop. A coordinate whose
    perturbation flips any ReLU or max branch is a tie and is skipped. Relative error is
    ``|a - f| / max(|a|, |f|, abs_floor)``.
    """
    rng = np.random.default_rng(seed)

    def loss_at(record=False):
        coin = np.random.default_rng(seed + 1)
        if record:
            with ad.record_patterns() as pat:
                val = sample_loss(sample, params, coin, 1.0, probes=probes)
            return val, pat
        with ad.no_grad():
            return sample_loss(sample, params, coin, 1.0, probes=probes), None

    params.zero_grad()
    loss, base_pat = loss_at(record=True)
    loss.backward()
    names = [k for k, _ in params
             if param_prefixes is None or any(k.startswith(p) for p in param_prefixes)]
    if not names:
        raise ValueError("no parameters match the requested prefixes")
    sizes = np.array([params[k].data.size for k in names], dtype=np.float64)
    analytic = {k: (params[k].grad.copy() if params[k].grad is not None
                    else np.zeros_like(params[k].data)) for k in names}
    params.zero_grad()

    worst, worst_name, checked, skipped, details = 0.0, None, 0, 0, []
    attempts = 0
    while checked < n_checks and attempts < 20 * n_checks:
        attempts += 1
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        t = params[k]
        flat = int(rng.integers(t.data.size))
        pos = np.unravel_index(flat, t.data.shape)
        orig = t.data[pos]
        t.data[pos] = orig + h
        with ad.record_patterns() as pat_p:
            with ad.no_grad():
                lp = sample_loss(sample, params, np.random.default_rng(seed + 1), 1.0, probes=probes)
        t.data[pos] = orig - h
        with ad.record_patterns() as pat_m:
            with ad.no_grad():
                lm = sample_loss(sample, params, np.random.default_rng(seed + 1), 1.0, probes=probes)
        t.data[pos] = orig
        if pat_p != base_pat or pat_m != base_pat:
            skipped += 1
            continue
        fd = (float(lp.data) - float(lm.data)) / (2 * h)
        a = float(analytic[k][pos])
        rel = abs(a - fd) / max(abs(a), abs(fd), abs_floor)
        details.append((k, tuple(int(i) for i in pos), a, fd, rel))
        checked += 1
        if rel > worst:
            worst, worst_name = rel, f"{k}{list(pos)}"
    return GradCheckResult(worst, checked, skipped, worst_name, details)
