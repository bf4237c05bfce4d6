"""Instrumented ICP execution recorded as input / hint / output probe frames.

Probe names and their roles:

=====================  ======  ========  ===========
name                   stage   location  kind
=====================  ======  ========  ===========
pointclouds            input   node      scalar
node_positions         input   node      scalar
transformed_src        hint    node      scalar
transformed_tgt        hint    node      scalar
correspondences        hint    edge      mask
distances              hint    edge      scalar
error                  hint    graph     scalar
iterations             hint    graph     scalar
phase                  hint    graph     categorical
stop                   hint    graph     categorical
final_src              output  node      scalar
final_tgt              output  node      scalar
final_correspondences  output  edge      mask
=====================  ======  ========  ===========

Node ``i`` carries source point ``i`` and target point ``i``; edge ``(i, j)``
is the candidate match of source ``i`` to target ``j``.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import _io
from .geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply_transform,
    nearest_correspondences,
)
from .icp import IcpConfig, alignment_error, iterate_icp

SQUASH_C = 5.0
ERROR_FLOOR = 1e-300
COORD_GROUP = "coordinates"


class HintMode(str, enum.Enum):
    P2 = "p2"
    P12 = "p12"
    P1I = "p1i"
    P1I2 = "p1i2"


class TrajectoryParseError(ValueError):
    pass


class SchemaError(TrajectoryParseError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    name: str
    stage: str  # input | hint | output
    location: str  # node | edge | graph
    kind: str  # scalar | mask | categorical
    categories: int = 0

    def __post_init__(self):
        if self.stage not in ("input", "hint", "output"):
            raise SchemaError(f"{self.name}: bad stage {self.stage!r}")
        if self.location not in ("node", "edge", "graph"):
            raise SchemaError(f"{self.name}: bad location {self.location!r}")
        if self.kind not in ("scalar", "mask", "categorical"):
            raise SchemaError(f"{self.name}: bad kind {self.kind!r}")
        if self.kind == "categorical" and self.categories < 2:
            raise SchemaError(f"{self.name}: categorical probe needs >= 2 categories")


SCHEMA: Tuple[ProbeSpec, ...] = (
    ProbeSpec("pointclouds", "input", "node", "scalar"),
    ProbeSpec("node_positions", "input", "node", "scalar"),
    ProbeSpec("transformed_src", "hint", "node", "scalar"),
    ProbeSpec("transformed_tgt", "hint", "node", "scalar"),
    ProbeSpec("correspondences", "hint", "edge", "mask"),
    ProbeSpec("distances", "hint", "edge", "scalar"),
    ProbeSpec("error", "hint", "graph", "scalar"),
    ProbeSpec("iterations", "hint", "graph", "scalar"),
    ProbeSpec("phase", "hint", "graph", "categorical", 2),
    ProbeSpec("stop", "hint", "graph", "categorical", 2),
    ProbeSpec("final_src", "output", "node", "scalar"),
    ProbeSpec("final_tgt", "output", "node", "scalar"),
    ProbeSpec("final_correspondences", "output", "edge", "mask"),
)
SPECS: Dict[str, ProbeSpec] = {p.name: p for p in SCHEMA}

# probes that share one coordinate min/max
COORD_PROBES = ("pointclouds", "transformed_src", "transformed_tgt", "final_src", "final_tgt")
# already bounded in [0, 1] at recording time
PREBOUNDED = ("node_positions", "iterations")


def probes(stage: str) -> List[ProbeSpec]:
    return [p for p in SCHEMA if p.stage == stage]


@dataclass
class TrajectoryStep:
    """Probe values of one frame, keyed by probe name.

    Node arrays are (n, d), edge arrays (n, n), graph scalars 0-d floats and
    categoricals 0-d ints (class index).
    """

    values: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def _where(self, location):
        return {k: v for k, v in self.values.items() if SPECS[k].location == location}

    @property
    def node_values(self):
        return self._where("node")

    @property
    def edge_values(self):
        return self._where("edge")

    @property
    def graph_values(self):
        return self._where("graph")

    def copy(self) -> "TrajectoryStep":
        return TrajectoryStep({k: np.array(v) for k, v in self.values.items()})


@dataclass(frozen=True)
class NormalizationParams:
    ranges: Dict[str, Tuple[float, float]]
    squash_c: float = SQUASH_C


@dataclass
class Trajectory:
    input: TrajectoryStep
    hints: List[TrajectoryStep]
    output: TrajectoryStep
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    normalization: Optional[NormalizationParams] = None
    gt_transform: Optional[RigidTransform] = None
    meta: Dict[str, object] = field(default_factory=dict)
    schema: Tuple[ProbeSpec, ...] = SCHEMA

    @property
    def n(self) -> int:
        return len(self.src_mask)

    @property
    def normalized(self) -> bool:
        return self.normalization is not None

    @property
    def feature_dim(self) -> int:
        return (self.input["pointclouds"].shape[1] - 6) // 2


def squash_error(e, c: float = SQUASH_C):
    """Map a nonnegative error into (0, 1): ``1 / (1 + exp(c - ln e))``.

    Errors at or below zero are clamped to 1e-300 first.
    """
    e = np.maximum(np.asarray(e, dtype=np.float64), ERROR_FLOOR)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(c - np.log(e)))
    return out if out.ndim else float(out)


def unsquash_error(f, c: float = SQUASH_C):
    f = np.asarray(f, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        out = np.exp(c + np.log(f) - np.log1p(-f))
    return out if out.ndim else float(out)


def fit_node_count(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Pad by repeating random points (flagged as padding) or drop random points."""
    if len(cloud) == 0:
        raise ValueError("cannot fit an empty cloud")
    if n < 1:
        raise ValueError("n must be >= 1")
    m = len(cloud)
    if m == n:
        return cloud
    rng = np.random.default_rng(seed)
    if m > n:
        keep = np.sort(rng.choice(m, size=n, replace=False))
        feats = None if cloud.features is None else cloud.features[keep]
        return PointCloud(cloud.points[keep], feats, cloud.mask[keep])
    valid = np.nonzero(cloud.mask)[0]
    if len(valid) == 0:
        raise ValueError("cannot pad a cloud with no unmasked points")
    extra = rng.choice(valid, size=n - m, replace=True)
    idx = np.concatenate([np.arange(m), extra])
    feats = None if cloud.features is None else cloud.features[idx]
    mask = np.concatenate([cloud.mask, np.zeros(n - m, dtype=bool)])
    return PointCloud(cloud.points[idx], feats, mask)


def ground_truth_targets(src: PointCloud, tgt: PointCloud, gt: RigidTransform):
    moved = apply_transform(src, gt)
    return moved, tgt, nearest_correspondences(moved, tgt)


def _matched_distances(src_pts, tgt_pts, corr: CorrespondenceSet) -> np.ndarray:
    d = np.zeros(corr.matrix.shape)
    rows, cols = corr.pairs()
    d[rows, cols] = np.linalg.norm(src_pts[rows] - tgt_pts[cols], axis=1)
    return d


def _hint(src_pts, tgt_pts, adj, dist, error, it, phase, stop) -> TrajectoryStep:
    return TrajectoryStep({
        "transformed_src": np.array(src_pts, dtype=np.float64),
        "transformed_tgt": np.array(tgt_pts, dtype=np.float64),
        "correspondences": np.array(adj, dtype=np.int64),
        "distances": np.array(dist, dtype=np.float64),
        "error": np.array(error, dtype=np.float64),
        "iterations": np.array(it, dtype=np.float64),
        "phase": np.array(phase, dtype=np.int64),
        "stop": np.array(stop, dtype=np.int64),
    })


def _input_step(src: PointCloud, tgt: PointCloud) -> TrajectoryStep:
    n = len(src)
    cols = [src.points, tgt.points]
    if src.features is not None or tgt.features is not None:
        if src.feature_dim != tgt.feature_dim:
            raise ValueError("source and target feature dimensions differ")
        cols += [src.features, tgt.features]
    pos = np.arange(n, dtype=np.float64) / max(n - 1, 1)
    return TrajectoryStep({
        "pointclouds": np.hstack(cols),
        "node_positions": pos[:, None],
    })


def record_trajectory(src: PointCloud, tgt: PointCloud, cfg: IcpConfig,
                      hint_mode: HintMode = HintMode.P12,
                      gt: Optional[RigidTransform] = None,
                      gt_optimisation: bool = False) -> Trajectory:
    """Run ICP and record its probe trajectory (unnormalised).

    The last pass never advances ``transformed_src``: its phase-1 frame keeps
    the pre-step cloud and carries ``stop = 1``, and ``final_src`` is that
    cloud moved by the last step transform.
    """
    hint_mode = HintMode(hint_mode)
    if len(src) != len(tgt):
        raise ValueError("fit both clouds to the same node count before recording")
    if gt_optimisation and gt is None:
        raise ValueError("gt_optimisation requires a ground-truth transform")
    t_max = cfg.max_iter
    tgt_pts = tgt.points
    hints: List[TrajectoryStep] = []
    records = list(iterate_icp(src, tgt, cfg))
    it = 0
    prev_error = None
    for rec in records:
        src_pts = rec.src_before.points
        adj = rec.corr.matrix
        dist = _matched_distances(src_pts, tgt_pts, rec.corr)
        if prev_error is None:
            # before any step: misalignment under the first correspondences
            prev_error = alignment_error(src, tgt, rec.corr, cfg)
        it_before = it / t_max
        if hint_mode in (HintMode.P1I, HintMode.P1I2):
            rows, _ = rec.corr.pairs()
            reveal = np.zeros_like(adj)
            reveal_d = np.zeros_like(dist)
            for r in rows:
                reveal[r] = adj[r]
                reveal_d[r] = dist[r]
                hints.append(_hint(src_pts, tgt_pts, reveal, reveal_d, prev_error,
                                   it_before, 0, 0))
        elif hint_mode is HintMode.P12:
            hints.append(_hint(src_pts, tgt_pts, adj, dist, prev_error, it_before, 0, 0))
        if rec.last:
            after_pts, after_dist, it_after = src_pts, dist, it_before
        else:
            it += 1
            after_pts = rec.src_after.points
            after_dist = _matched_distances(after_pts, tgt_pts, rec.corr)
            it_after = it / t_max
        if hint_mode is not HintMode.P1I:
            hints.append(_hint(after_pts, tgt_pts, adj, after_dist, rec.error,
                               it_after, 1, 0))
        prev_error = rec.error
    hints[-1].values["stop"] = np.array(1, dtype=np.int64)

    final = records[-1]
    if gt_optimisation:
        f_src, f_tgt, f_corr = ground_truth_targets(src, tgt, gt)
    else:
        f_src, f_tgt, f_corr = final.src_after, tgt, final.corr
    output = TrajectoryStep({
        "final_src": np.array(f_src.points),
        "final_tgt": np.array(f_tgt.points),
        "final_correspondences": np.array(f_corr.matrix, dtype=np.int64),
    })
    meta = {
        "variant": cfg.variant.value,
        "hint_mode": hint_mode.value,
        "tolerance": cfg.tolerance,
        "t_max": t_max,
        "k_neighbors": cfg.k_neighbors,
        "gt_optimisation": bool(gt_optimisation),
        "iterations_used": len(records),
        "converged": bool(final.converged),
        "algorithm_transform": final.total.matrix().tolist(),
    }
    return Trajectory(_input_step(src, tgt), hints, output, np.array(src.mask),
                      np.array(tgt.mask), None, gt, meta)


def _coord_arrays(traj: Trajectory):
    yield traj.input["pointclouds"][:, :6]
    for h in traj.hints:
        yield h["transformed_src"]
        yield h["transformed_tgt"]
    yield traj.output["final_src"]
    yield traj.output["final_tgt"]


def _scale(x, lo, hi):
    if hi > lo:
        return (x - lo) / (hi - lo)
    return np.full_like(np.asarray(x, dtype=np.float64), 0.5)


def _unscale(x, lo, hi):
    if hi > lo:
        return np.asarray(x) * (hi - lo) + lo
    return np.full_like(np.asarray(x, dtype=np.float64), lo)


def _map_step(step: TrajectoryStep, params: NormalizationParams, fwd: bool) -> TrajectoryStep:
    f_scale = _scale if fwd else _unscale
    out = step.copy()
    lo, hi = params.ranges[COORD_GROUP]
    for name, v in out.values.items():
        if name == "pointclouds":
            v = np.array(v)
            v[:, :6] = f_scale(v[:, :6], lo, hi)
            out.values[name] = v
        elif name in COORD_PROBES:
            out.values[name] = f_scale(v, lo, hi)
        elif name == "distances":
            d_lo, d_hi = params.ranges["distances"]
            out.values[name] = f_scale(v, d_lo, d_hi)
        elif name == "error":
            out.values[name] = np.asarray(
                squash_error(v, params.squash_c) if fwd else unsquash_error(v, params.squash_c))
    return out


def normalization_params(traj: Trajectory, squash_c: float = SQUASH_C) -> NormalizationParams:
    coords = np.concatenate([a.ravel() for a in _coord_arrays(traj)])
    dists = np.concatenate([h["distances"].ravel() for h in traj.hints])
    return NormalizationParams({
        COORD_GROUP: (float(coords.min()), float(coords.max())),
        "distances": (float(dists.min()), float(dists.max())),
    }, squash_c)


def normalize(traj: Trajectory, squash_c: float = SQUASH_C,
              params: Optional[NormalizationParams] = None) -> Trajectory:
    """Min-max scale scalar probes per trajectory; squash the error probe.

    ``params`` reuses ranges fitted on another trajectory of the same pair.
    """
    if traj.normalized:
        raise ValueError("trajectory is already normalised")
    if params is None:
        params = normalization_params(traj, squash_c)
    return replace(
        traj,
        input=_map_step(traj.input, params, True),
        hints=[_map_step(h, params, True) for h in traj.hints],
        output=_map_step(traj.output, params, True),
        normalization=params,
    )


def denormalize(traj: Trajectory) -> Trajectory:
    if not traj.normalized:
        raise ValueError("trajectory is not normalised")
    p = traj.normalization
    return replace(
        traj,
        input=_map_step(traj.input, p, False),
        hints=[_map_step(h, p, False) for h in traj.hints],
        output=_map_step(traj.output, p, False),
        normalization=None,
    )


def denormalize_step(step: TrajectoryStep, params: NormalizationParams) -> TrajectoryStep:
    return _map_step(step, params, False)


def initial_hint(traj: Trajectory) -> TrajectoryStep:
    """Hint frame before any algorithm step: clouds at rest, nothing matched."""
    pc = traj.input["pointclouds"]
    n = traj.n
    err = 1.0 if traj.normalized else np.inf
    return _hint(pc[:, :3], pc[:, 3:6], np.zeros((n, n), dtype=np.int64),
                 np.zeros((n, n)), err, 0.0, 0, 0)


# -- serialisation ---------------------------------------------------------

SECTIONS = ("schema", "input", "hints", "output", "normalization", "gt_transform")
FORMAT_TAG = "icp-reasoner-trajectory"


def _step_doc(step: TrajectoryStep):
    return {k: v for k, v in step.values.items()}


def serialize_trajectory(traj: Trajectory) -> bytes:
    doc = {
        "format": FORMAT_TAG,
        "version": 1,
        "meta": {**traj.meta, "src_mask": traj.src_mask.astype(int),
                 "tgt_mask": traj.tgt_mask.astype(int)},
        "schema": [
            {"name": p.name, "stage": p.stage, "location": p.location,
             "kind": p.kind, "categories": p.categories} for p in traj.schema
        ],
        "input": _step_doc(traj.input),
        "hints": [_step_doc(h) for h in traj.hints],
        "output": _step_doc(traj.output),
        "normalization": None if traj.normalization is None else {
            "ranges": {k: list(v) for k, v in traj.normalization.ranges.items()},
            "squash_c": traj.normalization.squash_c,
        },
        "gt_transform": None if traj.gt_transform is None else {
            "rotation": traj.gt_transform.rotation,
            "translation": traj.gt_transform.translation,
        },
    }
    return _io.dumps(doc).encode()


def _expected_shape(spec: ProbeSpec, n: int, width: Optional[int]):
    if spec.location == "edge":
        return (n, n)
    if spec.location == "graph":
        return ()
    return (n, width)


def _parse_step(raw, stage: str, where: str, n: int) -> TrajectoryStep:
    if not isinstance(raw, dict):
        raise TrajectoryParseError(f"{where}: expected an object of probes")
    values = {}
    expected = {p.name for p in probes(stage)}
    for name, v in raw.items():
        spec = SPECS.get(name)
        if spec is None:
            raise SchemaError(f"{where}.{name}: unknown probe name")
        if spec.stage != stage:
            raise SchemaError(f"{where}.{name}: probe belongs to stage {spec.stage!r}")
        dtype = np.int64 if spec.kind in ("mask", "categorical") else np.float64
        try:
            arr = np.array(v, dtype=dtype)
        except (TypeError, ValueError) as exc:
            raise TrajectoryParseError(f"{where}.{name}: {exc}") from exc
        width = arr.shape[1] if arr.ndim == 2 and spec.location == "node" else None
        want = _expected_shape(spec, n, width)
        if arr.shape != want:
            raise TrajectoryParseError(f"{where}.{name}: shape {arr.shape}, expected {want}")
        values[name] = arr
    missing = expected - set(values)
    if missing:
        raise TrajectoryParseError(f"{where}: missing probes {sorted(missing)}")
    return TrajectoryStep(values)


def deserialize_trajectory(data) -> Trajectory:
    text = data.decode() if isinstance(data, (bytes, bytearray)) else str(data)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        missing = [s for s in SECTIONS if not re.search(rf'"{s}"\s*:', text)]
        what = f"missing section {missing[0]!r}" if missing else "malformed document"
        raise TrajectoryParseError(f"truncated or invalid at char {exc.pos}: {what}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise TrajectoryParseError("not a trajectory document")
    for s in SECTIONS:
        if s not in doc:
            raise TrajectoryParseError(f"missing section {s!r}")
    schema = []
    for i, p in enumerate(doc["schema"]):
        if p.get("name") not in SPECS:
            raise SchemaError(f"schema[{i}]: unknown probe name {p.get('name')!r}")
        spec = ProbeSpec(p["name"], p["stage"], p["location"], p["kind"], p.get("categories", 0))
        if spec != SPECS[spec.name]:
            raise SchemaError(f"schema[{i}]: {spec.name} does not match the known probe")
        schema.append(spec)
    meta = dict(doc.get("meta", {}))
    try:
        src_mask = np.array(meta.pop("src_mask"), dtype=bool)
        tgt_mask = np.array(meta.pop("tgt_mask"), dtype=bool)
    except KeyError as exc:
        raise TrajectoryParseError(f"meta: missing {exc.args[0]}") from exc
    n = len(src_mask)
    inp = _parse_step(doc["input"], "input", "input", n)
    if not doc["hints"]:
        raise TrajectoryParseError("hints: empty")
    hints = [_parse_step(h, "hint", f"hints[{i}]", n) for i, h in enumerate(doc["hints"])]
    out = _parse_step(doc["output"], "output", "output", n)
    norm = None
    if doc["normalization"] is not None:
        nd = doc["normalization"]
        norm = NormalizationParams({k: (float(v[0]), float(v[1])) for k, v in nd["ranges"].items()},
                                   float(nd["squash_c"]))
    gt = None
    if doc["gt_transform"] is not None:
        gt = RigidTransform(doc["gt_transform"]["rotation"], doc["gt_transform"]["translation"])
    return Trajectory(inp, hints, out, src_mask, tgt_mask, norm, gt, meta, tuple(schema))


def trajectories_equal(a: Trajectory, b: Trajectory) -> bool:
    """Field-for-field equality (exact, NaN-free)."""
    def steps_eq(x, y):
        return x.values.keys() == y.values.keys() and all(
            x[k].dtype == y[k].dtype and np.array_equal(x[k], y[k]) for k in x.values)

    if a.schema != b.schema or a.meta != b.meta or a.normalization != b.normalization:
        return False
    if not (np.array_equal(a.src_mask, b.src_mask) and np.array_equal(a.tgt_mask, b.tgt_mask)):
        return False
    if (a.gt_transform is None) != (b.gt_transform is None):
        return False
    if a.gt_transform is not None and not (
            np.array_equal(a.gt_transform.rotation, b.gt_transform.rotation)
            and np.array_equal(a.gt_transform.translation, b.gt_transform.translation)):
        return False
    return (steps_eq(a.input, b.input) and steps_eq(a.output, b.output)
            and len(a.hints) == len(b.hints)
            and all(steps_eq(x, y) for x, y in zip(a.hints, b.hints)))
