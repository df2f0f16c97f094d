"""Forward pass, hand-written backward pass and checkpoints for the fusion network.

Per source ``i`` the network

1. builds a KNN graph around the query location from that source's samples,
2. embeds every edge's (distance, angle) with the shared edge encoder,
3. runs ``L`` edge-conditioned mean-aggregation graph convolutions whose
   weights belong to source ``i`` alone,
4. decodes the query node's final embedding with the shared 3-layer decoder.

The per-source scalars are fused with the fidelity scores, renormalised over the
sources that had enough samples at the query timestamp.

Node inputs are ``[features ; target ; mask_flag]``; the query node always has
its target hidden (value 0, flag 1).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import fidelity
from .data import MASK_FLAG, MASK_VALUE, MaskedView, MultiSourceDataset
from .geometry import (EdgeGeometry, GeometryError, NeighborIndex, ReceptiveField, SpatialKnnGraph,
                       TARGET_KEY, as_points, receptive_field)


class ModelError(ValueError):
    pass


ACTIVATIONS = ("tanh", "identity")


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else z


def _act_grad(out: np.ndarray, kind: str) -> np.ndarray:
    # Derivative expressed through the activation's output.
    return 1.0 - out * out if kind == "tanh" else np.ones_like(out)


@dataclass
class ModelParams:
    """All learnable arrays, keyed by name, plus the architecture description.

    Names are ``encoder.*``, ``conv.<source>.<layer>.*``, ``decoder.*`` and
    ``fidelity.logits``.
    """

    blocks: dict[str, np.ndarray]
    feature_dims: list[int]
    hidden_dim: int = 16
    num_layers: int = 2
    k: int = 3
    activation: str = "tanh"

    @property
    def N(self) -> int:
        return len(self.feature_dims)

    @property
    def logits(self) -> np.ndarray:
        return self.blocks["fidelity.logits"]

    @property
    def scores(self) -> np.ndarray:
        return fidelity.scores_from_logits(self.logits)

    def meta(self) -> dict:
        return {"feature_dims": list(self.feature_dims), "hidden_dim": self.hidden_dim,
                "num_layers": self.num_layers, "k": self.k, "activation": self.activation}

    def copy(self) -> "ModelParams":
        return ModelParams({n: a.copy() for n, a in self.blocks.items()}, list(self.feature_dims),
                           self.hidden_dim, self.num_layers, self.k, self.activation)

    def groups(self) -> dict[str, list[str]]:
        """Parameter names grouped into encoder / conv(i,l) / decoder / fidelity blocks."""
        out: dict[str, list[str]] = {}
        for name in self.blocks:
            parts = name.split(".")
            key = ".".join(parts[:3]) if parts[0] == "conv" else parts[0]
            out.setdefault(key, []).append(name)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.blocks.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for name, arr in self.blocks.items():
            arr[...] = np.asarray(vec[pos:pos + arr.size]).reshape(arr.shape)
            pos += arr.size


def conv_prefix(source: int, layer: int) -> str:
    return f"conv.{source}.{layer}"


def init_params(feature_dims, hidden_dim: int = 16, num_layers: int = 2, k: int = 3,
                seed: int = 0, activation: str = "tanh") -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; zero logits."""
    if activation not in ACTIVATIONS:
        raise ModelError(f"unknown activation {activation!r}")
    if hidden_dim < 1 or num_layers < 1 or k < 1:
        raise ModelError("hidden_dim, num_layers and k must be positive")
    rng = np.random.default_rng(seed)
    H = hidden_dim
    blocks: dict[str, np.ndarray] = {}

    def dense(name: str, fan_out: int, fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        blocks[f"{name}W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        blocks[f"{name}b"] = rng.uniform(-bound, bound, size=fan_out)

    dense("encoder.", H, 2)
    for i, p in enumerate(feature_dims):
        for layer in range(num_layers):
            d_in = p + 2 if layer == 0 else H
            dense(f"{conv_prefix(i, layer)}.msg_", H, d_in + H)
            dense(f"{conv_prefix(i, layer)}.upd_", H, d_in + H)
    dense("decoder.1", H, H)
    dense("decoder.2", H, H)
    dense("decoder.3", 1, H)
    blocks["fidelity.logits"] = np.zeros(len(feature_dims))
    return ModelParams(blocks, [int(p) for p in feature_dims], H, num_layers, k, activation)


# ----------------------------------------------------------------- building blocks

def _encode(params: ModelParams, geom: np.ndarray) -> np.ndarray:
    b = params.blocks
    return _act(geom @ b["encoder.W"].T + b["encoder.b"], params.activation)


def encode_edge(params: ModelParams, geometry: EdgeGeometry) -> np.ndarray:
    """Embed one edge's ``(distance, angle)``; the same weights serve every source."""
    geom = np.array([geometry[0], geometry[1]], dtype=float)
    if not np.all(np.isfinite(geom)):
        raise GeometryError("invalid geometry: non-finite edge geometry")
    return _encode(params, geom[None, :])[0]


def _conv(params: ModelParams, source: int, layer: int, h_prev: np.ndarray, edge_emb: np.ndarray,
          src: np.ndarray, n_out: int):
    """One graph convolution for the first ``n_out`` nodes.

    ``src`` (n_out*k,) holds the in-neighbor rows of ``h_prev`` for each receiving
    node, grouped by node; ``edge_emb`` holds the matching edge embeddings.
    """
    b = params.blocks
    pre = conv_prefix(source, layer)
    d_in = h_prev.shape[1]
    if b[f"{pre}.msg_W"].shape[1] != d_in + params.hidden_dim:
        raise ModelError(f"dimension error: layer {layer} of source {source} expects "
                         f"{b[f'{pre}.msg_W'].shape[1] - params.hidden_dim} input features, got {d_in}")
    k = len(src) // n_out if n_out else params.k
    msg_in = np.concatenate([h_prev[src], edge_emb], axis=1)
    msg = _act(msg_in @ b[f"{pre}.msg_W"].T + b[f"{pre}.msg_b"], params.activation)
    agg = msg.reshape(n_out, k, -1).mean(axis=1)
    upd_in = np.concatenate([h_prev[:n_out], agg], axis=1)
    h = _act(upd_in @ b[f"{pre}.upd_W"].T + b[f"{pre}.upd_b"], params.activation)
    return h, (msg_in, msg, upd_in, h, src, n_out, k, d_in)


def _conv_backward(params: ModelParams, source: int, layer: int, cache, dh: np.ndarray,
                   n_prev: int, grads: dict, need_input_grad: bool):
    b = params.blocks
    pre = conv_prefix(source, layer)
    msg_in, msg, upd_in, h, src, n_out, k, d_in = cache
    kind = params.activation
    dz = dh * _act_grad(h, kind)
    grads[f"{pre}.upd_W"] += dz.T @ upd_in
    grads[f"{pre}.upd_b"] += dz.sum(axis=0)
    dupd = dz @ b[f"{pre}.upd_W"]
    dagg = dupd[:, d_in:]
    dmsg = np.repeat(dagg / k, k, axis=0)
    dzm = dmsg * _act_grad(msg, kind)
    grads[f"{pre}.msg_W"] += dzm.T @ msg_in
    grads[f"{pre}.msg_b"] += dzm.sum(axis=0)
    dmsg_in = dzm @ b[f"{pre}.msg_W"]
    de = dmsg_in[:, d_in:]
    dh_prev = None
    if need_input_grad:
        dh_prev = np.zeros((n_prev, d_in))
        dh_prev[:n_out] += dupd[:, :d_in]
        np.add.at(dh_prev, src, dmsg_in[:, :d_in])
    return dh_prev, de


def graph_conv_layer(params: ModelParams, source_id: int, layer: int,
                     node_features: np.ndarray, graph: SpatialKnnGraph) -> np.ndarray:
    """Apply source ``source_id``'s layer ``layer`` to every node of ``graph``."""
    h_prev = np.asarray(node_features, dtype=float)
    if h_prev.shape[0] != graph.num_nodes:
        raise ModelError("dimension error: one feature row per graph node required")
    geom = np.column_stack([graph.distances, graph.angles])
    e = _encode(params, geom)
    h, _ = _conv(params, source_id, layer, h_prev, e, graph.edges[:, 0], graph.num_nodes)
    return h


def _decode(params: ModelParams, emb: np.ndarray):
    b = params.blocks
    kind = params.activation
    a1 = _act(emb @ b["decoder.1W"].T + b["decoder.1b"], kind)
    a2 = _act(a1 @ b["decoder.2W"].T + b["decoder.2b"], kind)
    y = a2 @ b["decoder.3W"].T + b["decoder.3b"]
    return y[:, 0], (emb, a1, a2)


def _decode_backward(params: ModelParams, cache, dy: np.ndarray, grads: dict) -> np.ndarray:
    b = params.blocks
    kind = params.activation
    emb, a1, a2 = cache
    dy = dy[:, None]
    grads["decoder.3W"] += dy.T @ a2
    grads["decoder.3b"] += dy.sum(axis=0)
    dz2 = (dy @ b["decoder.3W"]) * _act_grad(a2, kind)
    grads["decoder.2W"] += dz2.T @ a1
    grads["decoder.2b"] += dz2.sum(axis=0)
    dz1 = (dz2 @ b["decoder.2W"]) * _act_grad(a1, kind)
    grads["decoder.1W"] += dz1.T @ emb
    grads["decoder.1b"] += dz1.sum(axis=0)
    return dz1 @ b["decoder.1W"]


def decode(params: ModelParams, node_embedding: np.ndarray) -> float:
    emb = np.asarray(node_embedding, dtype=float)
    if emb.shape != (params.hidden_dim,):
        raise ModelError(f"dimension error: embedding width {emb.shape} != ({params.hidden_dim},)")
    y, _ = _decode(params, emb[None, :])
    return float(y[0])


# ------------------------------------------------------------------------ plans

@dataclass
class SourcePlan:
    """Everything needed to run one source's branch for one query.

    ``inputs`` are the layer-0 rows for the nodes within ``L`` hops, ``geom`` the
    (distance, angle) of the in-edges of the nodes within ``L-1`` hops, and
    ``level_sizes[h]`` the number of nodes within ``h`` hops.
    """

    source: int
    inputs: np.ndarray
    geom: np.ndarray
    src: np.ndarray
    level_sizes: list[int]
    keys: np.ndarray

    def layer_slice(self, layer: int, num_layers: int) -> tuple[int, int]:
        """(n_out, n_in) node counts for 0-based ``layer``."""
        hops_out = num_layers - layer - 1
        return self.level_sizes[hops_out], self.level_sizes[hops_out + 1]


class PredictionContext:
    """Per-(source, timestamp) neighbor indices for one dataset, built lazily."""

    def __init__(self, dataset: MultiSourceDataset) -> None:
        self.dataset = dataset
        self._groups = [src.timestamp_groups() for src in dataset.sources]
        self._index: dict[tuple[int, int], NeighborIndex] = {}

    def group(self, source: int, timestamp: int) -> np.ndarray:
        return self._groups[source].get(int(timestamp), np.zeros(0, dtype=np.int64))

    def index(self, source: int, timestamp: int) -> NeighborIndex:
        key = (source, int(timestamp))
        if key not in self._index:
            idx = self.group(source, timestamp)
            self._index[key] = NeighborIndex(self.dataset[source].locations[idx])
        return self._index[key]


def build_plans(params: ModelParams, data, target_location=None, timestamp: int | None = None,
                context: PredictionContext | None = None) -> list[SourcePlan | None]:
    """One plan per source, ``None`` for sources with too few simultaneous samples.

    ``data`` is a dataset or a :class:`MaskedView`.  With a view and no explicit
    location, the query is the masked sample itself.
    """
    view = data if isinstance(data, MaskedView) else None
    base = view.base if view is not None else data
    if context is None or context.dataset is not base:
        context = PredictionContext(base)
    if len(base.feature_dims) != params.N or list(base.feature_dims) != list(params.feature_dims):
        raise ModelError(f"dimension error: dataset feature dims {base.feature_dims} "
                         f"do not match model {params.feature_dims}")
    masked_query = False
    if view is not None:
        m_loc = base[view.masked_source].locations[view.masked_index]
        m_ts = int(base[view.masked_source].timestamps[view.masked_index])
        if target_location is None:
            masked_query = True
        else:
            loc = as_points([target_location])[0]
            masked_query = bool(np.array_equal(loc, m_loc)) and (timestamp is None or int(timestamp) == m_ts)
        if masked_query:
            target_location, timestamp = m_loc, m_ts
    if target_location is None:
        raise ModelError("a target location is required")
    if timestamp is None:
        timestamp = 0
    target = as_points([target_location])[0]
    k, L = params.k, params.num_layers
    plans: list[SourcePlan | None] = []
    for i in range(base.N):
        group = context.group(i, timestamp)
        target_index = None
        if masked_query and i == view.masked_source:
            target_index = int(np.searchsorted(group, view.masked_index))
            n_nodes = len(group)
        else:
            n_nodes = len(group) + 1
        if n_nodes < k + 1:
            plans.append(None)
            continue
        index = context.index(i, timestamp)
        if target_index is not None:
            rf = receptive_field(index, k, L, target_index=target_index)
        else:
            rf = receptive_field(index, k, L, target_location=target)
        plans.append(_plan_from_field(params, data, i, group, rf, target_index))
    return plans


def _plan_from_field(params: ModelParams, data, source: int, group: np.ndarray,
                     rf: ReceptiveField, target_index: int | None) -> SourcePlan:
    L = params.num_layers
    n_in = rf.level_sizes[L]
    keys = rf.keys[:n_in]
    p = params.feature_dims[source]
    inputs = np.empty((n_in, p + 2))
    sample_rows = keys != TARGET_KEY
    if np.any(sample_rows):
        inputs[sample_rows] = data.node_inputs(source, group[keys[sample_rows]])
    if target_index is not None:
        # The masked sample: its features, hidden target.
        inputs[0] = data.node_inputs(source, group[[target_index]])[0]
        inputs[0, -2:] = (MASK_VALUE, MASK_FLAG)
    else:
        inputs[0] = 0.0
        inputs[0, -2:] = (MASK_VALUE, MASK_FLAG)
    n_dst = rf.level_sizes[L - 1]
    src = rf.nbr[:n_dst].ravel()
    geom = np.column_stack([rf.distances, rf.angles])
    global_keys = np.where(rf.keys == TARGET_KEY, -1,
                           group[np.maximum(rf.keys, 0)] if len(group) else -1)
    return SourcePlan(source, inputs, geom, src, list(rf.level_sizes), global_keys)


def plan_from_graph(params: ModelParams, source: int, graph: SpatialKnnGraph) -> SourcePlan:
    """Treat a fully materialised graph as a plan (every node updated every layer)."""
    n = graph.num_nodes
    geom = np.column_stack([graph.distances, graph.angles])
    return SourcePlan(source, np.asarray(graph.attributes, dtype=float), geom, graph.edges[:, 0],
                      [n] * (params.num_layers + 1), np.arange(n))


# ---------------------------------------------------------------------- forward

@dataclass
class SourcePrediction:
    per_source: np.ndarray
    fused: float
    scores: np.ndarray
    present: np.ndarray
    partial: bool = False


@dataclass
class ForwardCache:
    plans: list
    branch: dict = field(default_factory=dict)
    decoder: tuple | None = None
    present: np.ndarray | None = None
    y: np.ndarray | None = None
    weights: np.ndarray | None = None
    fused: float = 0.0


def fuse(per_source, scores, present=None) -> float:
    """Fidelity-weighted sum over the present sources, scores renormalised."""
    y = np.asarray(per_source, dtype=float)
    present = np.isfinite(y) if present is None else np.asarray(present, dtype=bool)
    w = fidelity.renormalized(np.asarray(scores, dtype=float), present)
    return float(w[present] @ y[present])


def _branch_forward(params: ModelParams, plan: SourcePlan):
    L = params.num_layers
    k = params.k
    e = _encode(params, plan.geom)
    h = plan.inputs
    caches = []
    for layer in range(L):
        n_out, _ = plan.layer_slice(layer, L)
        n_edges = n_out * k
        h, c = _conv(params, plan.source, layer, h, e[:n_edges], plan.src[:n_edges], n_out)
        caches.append(c)
    return h[0], (e, caches)


def forward_plans(params: ModelParams, plans: list) -> tuple[SourcePrediction, ForwardCache]:
    present = np.array([p is not None for p in plans])
    if not present.any():
        raise ModelError("no usable source")
    cache = ForwardCache(plans, present=present)
    embs = []
    for plan in plans:
        if plan is None:
            continue
        emb, bc = _branch_forward(params, plan)
        cache.branch[plan.source] = bc
        embs.append(emb)
    y_present, dec_cache = _decode(params, np.vstack(embs))
    cache.decoder = dec_cache
    y = np.full(params.N, np.nan)
    y[present] = y_present
    weights = fidelity.renormalized(params.scores, present)
    fused = float(weights[present] @ y_present)
    cache.y, cache.weights, cache.fused = y, weights, fused
    pred = SourcePrediction(y, fused, weights, present, partial=not present.all())
    return pred, cache


def backward_plans(params: ModelParams, cache: ForwardCache, dy: np.ndarray, grads: dict) -> None:
    """Accumulate into ``grads`` the gradient given ``dy`` = dJ/d(per-source outputs)."""
    present = cache.present
    demb = _decode_backward(params, cache.decoder, dy[present], grads)
    L = params.num_layers
    row = 0
    for plan in cache.plans:
        if plan is None:
            continue
        e, caches = cache.branch[plan.source]
        dh = np.zeros((1, params.hidden_dim))
        dh[0] = demb[row]
        row += 1
        de_total = np.zeros_like(e)
        for layer in reversed(range(L)):
            _, n_in = plan.layer_slice(layer, L)
            dh, de = _conv_backward(params, plan.source, layer, caches[layer], dh, n_in, grads,
                                    need_input_grad=layer > 0)
            de_total[:len(de)] += de
        dz = de_total * _act_grad(e, params.activation)
        grads["encoder.W"] += dz.T @ plan.geom
        grads["encoder.b"] += dz.sum(axis=0)


def forward(params: ModelParams, data, target_location=None, timestamp: int | None = None,
            context: PredictionContext | None = None) -> SourcePrediction:
    """Fused prediction at ``target_location`` (or at the masked sample of a view)."""
    plans = build_plans(params, data, target_location, timestamp, context)
    pred, _ = forward_plans(params, plans)
    if pred.partial:
        warnings.warn(f"sources {np.flatnonzero(~pred.present).tolist()} skipped: too few samples",
                      RuntimeWarning, stacklevel=2)
    return pred


# ------------------------------------------------------------------- checkpoints

MAGIC = b"DMSPCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ModelParams, extra_blocks: Mapping[str, np.ndarray] | None = None,
                    state: dict | None = None) -> None:
    """Write a checkpoint: magic, version, JSON manifest, then raw little-endian float64.

    ``extra_blocks`` (e.g. optimizer moments) and ``state`` (JSON-able training
    bookkeeping) ride along so a run can resume bit-exactly.
    """
    arrays = list(params.blocks.items())
    if extra_blocks:
        arrays += list(extra_blocks.items())
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    manifest = {"format": "dmsp-checkpoint", "version": FORMAT_VERSION, "model": params.meta(),
                "param_names": list(params.blocks), "blocks": entries, "state": state or {}}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`: ``(params, extra_blocks, state)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=20 + mlen)
    arrays = {}
    for ent in manifest["blocks"]:
        chunk = data[ent["offset"]:ent["offset"] + ent["count"]]
        arrays[ent["name"]] = chunk.reshape(ent["shape"]).astype(np.float64)
    meta = manifest["model"]
    names = manifest["param_names"]
    params = ModelParams({n: arrays.pop(n) for n in names}, meta["feature_dims"], meta["hidden_dim"],
                         meta["num_layers"], meta["k"], meta["activation"])
    return params, arrays, manifest["state"]
