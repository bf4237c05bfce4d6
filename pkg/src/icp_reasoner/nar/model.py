"""Encode-process-decode executor network with a Triplet-MPNN processor."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .. import _io
from .. import autodiff as ad
from ..autodiff import Tensor
from ..trajectory import SCHEMA, SPECS

NODE_IN = ("pointclouds", "node_positions", "transformed_src", "transformed_tgt")
EDGE_IN = ("correspondences", "distances")
GRAPH_IN = ("error", "iterations", "phase", "stop")
NODE_OUT = ("transformed_src", "transformed_tgt")
EDGE_OUT = ("correspondences", "distances")
GRAPH_OUT = ("error", "iterations", "phase")
FINAL_NODE = ("final_src", "final_tgt")
FINAL_EDGE = ("final_correspondences",)


class Processor(str, enum.Enum):
    TRIPLET_MPNN = "triplet_mpnn"
    MPNN = "mpnn"


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 256
    processor: Processor = Processor.TRIPLET_MPNN
    teacher_prob: float = 0.1
    learn_rate: float = 1e-3
    batch_size: int = 8
    train_steps: int = 10000
    grad_clip: float = 1.0
    scalar_loss_scale: float = 1.0
    seed: int = 0
    triplet_dim: int = 8
    teacher_per_step: bool = True
    pos_weight_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "processor", Processor(self.processor))
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not 0.0 <= self.teacher_prob <= 1.0:
            raise ValueError("teacher_prob must lie in [0, 1]")
        if self.grad_clip <= 0 or self.scalar_loss_scale <= 0:
            raise ValueError("grad_clip and scalar_loss_scale must be positive")
        if self.batch_size < 1 or self.train_steps < 0:
            raise ValueError("batch_size must be >= 1 and train_steps >= 0")

    def to_dict(self):
        d = asdict(self)
        d["processor"] = self.processor.value
        return d


def input_dims(feature_dim: int) -> Dict[str, int]:
    return {
        "pointclouds": 6 + 2 * feature_dim,
        "node_positions": 1,
        "transformed_src": 3,
        "transformed_tgt": 3,
        "correspondences": 1,
        "distances": 1,
        "error": 1,
        "iterations": 1,
        "phase": 2,
        "stop": 2,
    }


def _param_shapes(cfg: ModelConfig, feature_dim: int) -> Dict[str, tuple]:
    h, tf = cfg.hidden_dim, cfg.triplet_dim
    shapes = {}
    for name, d in input_dims(feature_dim).items():
        shapes[f"enc.{name}.w"] = (d, h)
        shapes[f"enc.{name}.b"] = (h,)
    for k in ("m1", "m2", "me"):
        shapes[f"proc.{k}.w"] = (2 * h, h)
    shapes["proc.mg.w"] = (h, h)
    shapes["proc.m.b"] = (h,)
    shapes["proc.msg.w"] = (h, h)
    shapes["proc.msg.b"] = (h,)
    shapes["proc.o1.w"] = (2 * h, h)
    shapes["proc.o2.w"] = (h, h)
    shapes["proc.o.b"] = (h,)
    shapes["proc.ln_node.g"] = (h,)
    shapes["proc.ln_node.b"] = (h,)
    if cfg.processor is Processor.TRIPLET_MPNN:
        for k in ("t1", "t2", "t3", "te1", "te2", "te3"):
            shapes[f"proc.{k}.w"] = (2 * h, tf)
        shapes["proc.tg.w"] = (h, tf)
        shapes["proc.t.b"] = (tf,)
        shapes["proc.tr.w"] = (tf, h)
        shapes["proc.tr.b"] = (h,)
    else:
        shapes["proc.e.w"] = (2 * h, h)
        shapes["proc.e.b"] = (h,)
    shapes["proc.ln_edge.g"] = (h,)
    shapes["proc.ln_edge.b"] = (h,)
    for name in NODE_OUT + FINAL_NODE:
        shapes[f"dec.{name}.w"] = (2 * h, 3)
        shapes[f"dec.{name}.b"] = (3,)
    for name in EDGE_OUT + FINAL_EDGE:
        for k in ("e", "a", "c"):
            shapes[f"dec.{name}.{k}.w"] = (2 * h, 1)
        shapes[f"dec.{name}.p.w"] = (2 * h, h)
        shapes[f"dec.{name}.q.w"] = (2 * h, h)
        shapes[f"dec.{name}.b"] = (1,)
    for name in GRAPH_OUT:
        k = SPECS[name].categories or 1
        shapes[f"dec.{name}.w"] = (3 * h, k)
        shapes[f"dec.{name}.b"] = (k,)
    shapes["term.w"] = (3 * h, 1)
    shapes["term.b"] = (1,)
    return shapes


class ModelParams:
    """Named parameter tensors plus the configuration that shaped them."""

    def __init__(self, cfg: ModelConfig, feature_dim: int, tensors: Dict[str, Tensor]):
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.tensors = tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.feature_dim, {
            k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()})

    @classmethod
    def init(cls, cfg: ModelConfig, feature_dim: int = 0, rng=None, zero: bool = False) -> "ModelParams":
        """Xavier-uniform weights, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        tensors = {}
        for name, shape in _param_shapes(cfg, feature_dim).items():
            if zero:
                val = np.zeros(shape)
            elif name.endswith(".g"):
                val = np.ones(shape)
            elif len(shape) == 2:
                a = np.sqrt(6.0 / (shape[0] + shape[1]))
                val = rng.uniform(-a, a, size=shape)
            else:
                val = np.zeros(shape)
            tensors[name] = Tensor(val, requires_grad=True, name=name)
        return cls(cfg, feature_dim, tensors)

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


@dataclass
class ProcessorState:
    node_latents: Tensor
    edge_latents: Tensor

    @classmethod
    def zeros(cls, n: int, hidden: int) -> "ProcessorState":
        return cls(Tensor(np.zeros((n, hidden))), Tensor(np.zeros((n, n, hidden))))


@dataclass
class Embeddings:
    node: Tensor  # (n, h)
    edge: Tensor  # (n, n, h)
    graph: Tensor  # (h,)


def _enc(params, name, x):
    return ad.linear(x, params[f"enc.{name}.w"], params[f"enc.{name}.b"])


def encoder_inputs(values: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Shape raw probe values for the linear encoders.

    Categoricals given as class indices become one-hot; probability vectors
    pass through. Edge and graph scalars gain a trailing unit axis.
    """
    out = {}
    for name, v in values.items():
        spec = SPECS[name]
        v = np.asarray(v, dtype=np.float64)
        if spec.kind == "categorical":
            if v.ndim == 0:
                v = np.eye(spec.categories)[int(v)]
        elif spec.location == "edge":
            v = v[..., None]
        elif spec.location == "graph":
            v = v.reshape(1)
        out[name] = v
    return out


def encode_step(values: Dict[str, np.ndarray], params: ModelParams, n: int) -> Embeddings:
    """Sum per-probe linear embeddings at each location."""
    h = params.cfg.hidden_dim
    node = edge = graph = None
    for name, x in encoder_inputs(values).items():
        spec = SPECS[name]
        if spec.stage == "output":
            continue
        z = _enc(params, name, x)
        if spec.location == "node":
            if x.shape[0] != n:
                raise ValueError(f"{name}: expected {n} nodes, got {x.shape[0]}")
            node = z if node is None else node + z
        elif spec.location == "edge":
            if x.shape[:2] != (n, n):
                raise ValueError(f"{name}: expected ({n}, {n}) edges, got {x.shape[:2]}")
            edge = z if edge is None else edge + z
        else:
            graph = z if graph is None else graph + z
    node = Tensor(np.zeros((n, h))) if node is None else node
    edge = Tensor(np.zeros((n, n, h))) if edge is None else edge
    graph = Tensor(np.zeros(h)) if graph is None else graph
    return Embeddings(node, edge, graph)


def process_step(z: Embeddings, prev: ProcessorState, params: ModelParams) -> ProcessorState:
    p = params
    n, h = z.node.shape
    node_in = ad.concat([z.node, prev.node_latents], axis=-1)  # (n, 2h)
    edge_in = ad.concat([z.edge, prev.edge_latents], axis=-1)  # (n, n, 2h)

    # messages from j to i, reduced by max over senders j
    m_recv = ad.matmul(node_in, p["proc.m1.w"]).reshape(n, 1, h)
    m_send = ad.matmul(node_in, p["proc.m2.w"]).reshape(1, n, h)
    m_edge = ad.matmul(edge_in, p["proc.me.w"])
    m_graph = ad.matmul(z.graph, p["proc.mg.w"]) + p["proc.m.b"]
    pre = m_recv + m_send + m_edge + m_graph
    msgs = ad.linear(ad.relu(pre), p["proc.msg.w"], p["proc.msg.b"])
    agg = ad.max_axis(msgs, axis=1)  # (n, h)
    node_out = ad.matmul(node_in, p["proc.o1.w"]) + ad.matmul(agg, p["proc.o2.w"]) + p["proc.o.b"]
    node_out = ad.layer_norm(ad.relu(node_out), p["proc.ln_node.g"], p["proc.ln_node.b"])

    if params.cfg.processor is Processor.TRIPLET_MPNN:
        tf = params.cfg.triplet_dim
        # t[i, j, k] combines nodes i, j, k with edges (i, j), (i, k), (k, j)
        t_i = ad.matmul(node_in, p["proc.t1.w"]).reshape(n, 1, 1, tf)
        t_j = ad.matmul(node_in, p["proc.t2.w"]).reshape(1, n, 1, tf)
        t_k = ad.matmul(node_in, p["proc.t3.w"]).reshape(1, 1, n, tf)
        t_ij = ad.matmul(edge_in, p["proc.te1.w"]).reshape(n, n, 1, tf)
        t_ik = ad.matmul(edge_in, p["proc.te2.w"]).reshape(n, 1, n, tf)
        t_kj = ad.transpose(ad.matmul(edge_in, p["proc.te3.w"]), (1, 0, 2)).reshape(1, n, n, tf)
        t_g = ad.matmul(z.graph, p["proc.tg.w"]) + p["proc.t.b"]
        trip = t_i + t_j + t_k + t_ij + t_ik + t_kj + t_g
        reduced = ad.max_axis(trip, axis=2)  # (n, n, tf)
        edge_out = ad.linear(reduced, p["proc.tr.w"], p["proc.tr.b"])
    else:
        edge_out = ad.linear(edge_in, p["proc.e.w"], p["proc.e.b"])
    edge_out = ad.layer_norm(ad.relu(edge_out), p["proc.ln_edge.g"], p["proc.ln_edge.b"])
    return ProcessorState(node_out, edge_out)


def _pool(z: Embeddings, state: ProcessorState) -> Tensor:
    hn = state.node_latents
    return ad.concat([z.graph, ad.mean(hn, axis=0), ad.max_axis(hn, axis=0)], axis=-1)


def _edge_head(params, name, node_cat, edge_cat):
    n = node_cat.shape[0]
    p = lambda k: params[f"dec.{name}.{k}"]
    out = ad.matmul(edge_cat, p("e.w")).reshape(n, n)
    out = out + ad.matmul(node_cat, p("a.w")).reshape(n, 1)
    out = out + ad.matmul(node_cat, p("c.w")).reshape(1, n)
    u = ad.matmul(node_cat, p("p.w"))
    v = ad.matmul(node_cat, p("q.w"))
    scale = 1.0 / np.sqrt(u.shape[-1])
    out = out + ad.matmul(u, ad.transpose(v)) * scale
    return out + p("b")


def termination_logit(pooled: Tensor, params: ModelParams) -> Tensor:
    return ad.linear(pooled, params["term.w"], params["term.b"]).reshape(())


def decode_step(state: ProcessorState, z: Embeddings, params: ModelParams,
                hints: bool = True, outputs: bool = False) -> Dict[str, Tensor]:
    """Raw predictions: scalars as values, masks and categoricals as logits.

    The ``stop`` entry is the termination head's single logit.
    """
    node_cat = ad.concat([z.node, state.node_latents], axis=-1)
    edge_cat = ad.concat([z.edge, state.edge_latents], axis=-1)
    pooled = _pool(z, state)
    pred: Dict[str, Tensor] = {}
    names_node = (NODE_OUT if hints else ()) + (FINAL_NODE if outputs else ())
    names_edge = (EDGE_OUT if hints else ()) + (FINAL_EDGE if outputs else ())
    for name in names_node:
        pred[name] = ad.linear(node_cat, params[f"dec.{name}.w"], params[f"dec.{name}.b"])
    for name in names_edge:
        pred[name] = _edge_head(params, name, node_cat, edge_cat)
    if hints:
        for name in GRAPH_OUT:
            out = ad.linear(pooled, params[f"dec.{name}.w"], params[f"dec.{name}.b"])
            pred[name] = out if SPECS[name].kind == "categorical" else out.reshape(())
        pred["stop"] = termination_logit(pooled, params)
    return pred


def postprocess(pred: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Turn raw predictions into encoder-ready values (probabilities for discrete probes)."""
    out = {}
    for name, t in pred.items():
        spec = SPECS[name]
        v = t.data
        if name == "stop":
            s = float(ad.sigmoid_np(v))
            out[name] = np.array([1.0 - s, s])
        elif spec.kind == "mask":
            out[name] = ad.sigmoid_np(v)
        elif spec.kind == "categorical":
            out[name] = ad.softmax_np(v)
        else:
            out[name] = np.array(v)
    return out


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_TAG = "icp-reasoner-checkpoint"


def save_checkpoint(params: ModelParams, extra: Optional[dict] = None) -> bytes:
    doc = {
        "format": CHECKPOINT_TAG,
        "version": 1,
        "config": params.cfg.to_dict(),
        "feature_dim": params.feature_dim,
        "schema": [{"name": p.name, "stage": p.stage, "location": p.location,
                    "kind": p.kind, "categories": p.categories} for p in SCHEMA],
        "extra": extra or {},
        "params": {k: {"shape": list(v.shape), "values": v.data.ravel()}
                   for k, v in params.tensors.items()},
    }
    return _io.dumps(doc).encode()


class CheckpointError(ValueError):
    pass


def load_checkpoint(data):
    """Returns ``(params, extra)``; validates schema and parameter shapes."""
    text = data.decode() if isinstance(data, (bytes, bytearray)) else str(data)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if doc.get("format") != CHECKPOINT_TAG:
        raise CheckpointError("not a model checkpoint")
    names = [p["name"] for p in doc.get("schema", [])]
    if names != [p.name for p in SCHEMA]:
        raise CheckpointError("checkpoint probe schema does not match this build")
    cfg = ModelConfig(**doc["config"])
    fdim = int(doc["feature_dim"])
    expected = _param_shapes(cfg, fdim)
    got = doc["params"]
    if set(got) != set(expected):
        raise CheckpointError(f"parameter names differ: {sorted(set(got) ^ set(expected))[:5]}")
    tensors = {}
    for name, shape in expected.items():
        entry = got[name]
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"{name}: shape {entry['shape']} != {list(shape)}")
        arr = np.array(entry["values"], dtype=np.float64).reshape(shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(cfg, fdim, tensors), doc.get("extra", {})
