"""Relation-level attention encoder with a softmax classifier head.

One layer, for an object ``i`` of type ``s``::

    z_i^r  = sum_j a_hat[r][i, j] * (h_j @ W[r])      (self: z_i = h_i @ W[self])
    e_i^r  = leaky_relu(a_s . [z_i^self @ Q_s || z_i^r @ K_s])
    beta_i = softmax over the relations with at least one neighbor at i
    h_i'   = elu(sum_r beta_i^r * z_i^r)

The classifier is ``softmax(H @ C)`` trained with summed cross-entropy over
all objects of all types (one shared class space).  Gradients are computed
by hand in reverse mode; everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeMismatchError
from .graph import FeatureSet, HinGraph, HinSchema
from .lpa import PseudoLabels

LEAKY_SLOPE = 0.2
PROB_FLOOR = 1e-12


def attention_dim(d: int) -> int:
    return (d + 1) // 2


@dataclass
class ModelParams:
    """Named parameter tensors.

    ``W/<layer>/<relation>`` projections, ``Q/<layer>/<type>`` and
    ``K/<layer>/<type>`` attention maps, ``a/<layer>/<type>`` attention
    vectors, and the classifier ``C``.
    """

    tensors: dict
    layer_dims: tuple
    k: int
    final_activation: bool = True
    schema_hash: str = ""

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({n: t.copy() for n, t in self.tensors.items()},
                           tuple(self.layer_dims), self.k, self.final_activation, self.schema_hash)

    def zeros_like(self) -> dict:
        return {n: np.zeros_like(t) for n, t in self.tensors.items()}

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


def is_attention_param(name: str) -> bool:
    return name.split("/", 1)[0] in ("Q", "K", "a")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(schema: HinSchema, input_dims: Mapping[str, int], hidden_dims: Sequence[int], k: int,
                rng: np.random.Generator, final_activation: bool = True) -> ModelParams:
    """Xavier-uniform initialization of every tensor."""
    hidden_dims = tuple(int(d) for d in hidden_dims)
    if not hidden_dims:
        raise ShapeMismatchError("need at least one encoder layer")
    tensors = {}
    for layer, d_out in enumerate(hidden_dims):
        for r in schema.relations:
            d_in = input_dims[r.target] if layer == 0 else hidden_dims[layer - 1]
            tensors[f"W/{layer}/{r.name}"] = xavier_uniform(rng, d_in, d_out)
        d_a = attention_dim(d_out)
        for t in schema.object_types:
            tensors[f"Q/{layer}/{t}"] = xavier_uniform(rng, d_out, d_a)
            tensors[f"K/{layer}/{t}"] = xavier_uniform(rng, d_out, d_a)
            tensors[f"a/{layer}/{t}"] = xavier_uniform(rng, 2 * d_a, 1, shape=(2 * d_a,))
    tensors["C"] = xavier_uniform(rng, hidden_dims[-1], k)
    return ModelParams(tensors, hidden_dims, int(k), final_activation, schema.schema_hash())


def check_params(params: ModelParams, graph: HinGraph, features: FeatureSet) -> None:
    features.check(graph)
    schema = graph.schema
    for layer, d_out in enumerate(params.layer_dims):
        for r in schema.relations:
            name = f"W/{layer}/{r.name}"
            if name not in params.tensors:
                raise ShapeMismatchError(f"missing parameter {name}")
            d_in = features[r.target].shape[1] if layer == 0 else params.layer_dims[layer - 1]
            if params[name].shape != (d_in, d_out):
                raise ShapeMismatchError(f"{name} has shape {params[name].shape}, expected {(d_in, d_out)}")
        d_a = attention_dim(d_out)
        for t in schema.object_types:
            for kind, shape in (("Q", (d_out, d_a)), ("K", (d_out, d_a)), ("a", (2 * d_a,))):
                name = f"{kind}/{layer}/{t}"
                if name not in params.tensors:
                    raise ShapeMismatchError(f"missing parameter {name}")
                if params[name].shape != shape:
                    raise ShapeMismatchError(f"{name} has shape {params[name].shape}, expected {shape}")
    if params["C"].shape != (params.layer_dims[-1], params.k):
        raise ShapeMismatchError(f"C has shape {params['C'].shape}, expected {(params.layer_dims[-1], params.k)}")


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


@dataclass(frozen=True)
class AttentionSnapshot:
    """Detached attention coefficients.

    ``relations[t]`` names the relations aggregated at type ``t`` (self
    first); ``beta[layer][t]`` is an ``(n_t, len(relations[t]))`` array whose
    rows sum to 1, with zeros for relations where the object has no
    neighbors.
    """

    relations: dict
    beta: list

    @property
    def num_layers(self) -> int:
        return len(self.beta)

    def coefficients(self, graph: HinGraph, layer: int, gid: int) -> dict:
        t, local = graph.localize(gid)
        return dict(zip(self.relations[t], self.beta[layer][t][local].tolist()))


@dataclass
class EmbeddingTable:
    """Top-layer embeddings in global object order plus per-layer outputs."""

    matrix: np.ndarray
    layers: list
    snapshot: AttentionSnapshot
    _cache: list = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]


def _check_finite(x, layer, t):
    if not np.isfinite(x).all():
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericalError(f"non-finite activation at layer {layer}, type {t!r}, object {int(bad[0])}")


def forward(params: ModelParams, graph: HinGraph, features: FeatureSet, uniform_attention: bool = False,
            keep_cache: bool = False, check: bool = True):
    """Run the encoder; returns ``(EmbeddingTable, AttentionSnapshot)``.

    With ``uniform_attention`` every available relation gets the same weight,
    bypassing the learned scores.
    """
    if check:
        check_params(params, graph, features)
    schema = graph.schema
    types = schema.object_types
    h = {t: features[t] for t in types}
    layers, betas, cache = [], [], []
    for layer in range(params.num_layers):
        last = layer == params.num_layers - 1
        activate = params.final_activation or not last
        new_h, layer_beta, layer_cache = {}, {}, {}
        for s in types:
            rels = schema.incoming(s)
            n = graph.counts[s]
            z = np.empty((len(rels), n, params.layer_dims[layer]))
            mask = np.ones((len(rels), n), dtype=bool)
            for k, r in enumerate(rels):
                proj = h[r.target] @ params[f"W/{layer}/{r.name}"]
                if r.is_self:
                    z[k] = proj
                else:
                    z[k] = graph.adjacency(r.name) @ proj
                    mask[k] = graph.has_neighbors(r.name)
            q = z[0] @ params[f"Q/{layer}/{s}"]
            keys = z @ params[f"K/{layer}/{s}"]
            a = params[f"a/{layer}/{s}"]
            d_a = q.shape[1]
            u = (q @ a[:d_a])[None, :] + keys @ a[d_a:]
            if uniform_attention:
                beta = mask / mask.sum(axis=0, keepdims=True)
            else:
                e = np.where(mask, leaky_relu(u), -np.inf)
                e = e - e.max(axis=0, keepdims=True)
                w = np.where(mask, np.exp(e), 0.0)
                beta = w / w.sum(axis=0, keepdims=True)
            pre = np.einsum("rn,rnd->nd", beta, z)
            out = elu(pre) if activate else pre
            _check_finite(out, layer, s)
            new_h[s] = out
            layer_beta[s] = beta.T.copy()
            if keep_cache:
                layer_cache[s] = dict(z=z, mask=mask, q=q, keys=keys, u=u, beta=beta, pre=pre, out=out,
                                      activate=activate, uniform=uniform_attention)
        layers.append(new_h)
        betas.append(layer_beta)
        cache.append(layer_cache)
        h = new_h

    snapshot = AttentionSnapshot({t: tuple(r.name for r in schema.incoming(t)) for t in types}, betas)
    matrix = np.concatenate([h[t] for t in types], axis=0)
    table = EmbeddingTable(matrix, layers, snapshot, cache if keep_cache else None)
    return table, snapshot


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def classify(params: ModelParams, embeddings) -> np.ndarray:
    """Row-stochastic ``|V| x K`` prediction matrix."""
    h = embeddings.matrix if isinstance(embeddings, EmbeddingTable) else np.asarray(embeddings)
    if h.shape[1] != params["C"].shape[0]:
        raise ShapeMismatchError(f"embedding dim {h.shape[1]} does not match classifier rows {params['C'].shape[0]}")
    return softmax_rows(h @ params["C"])


def _targets(labels) -> np.ndarray:
    return labels.assignment if isinstance(labels, PseudoLabels) else np.asarray(labels, dtype=np.int64)


def cross_entropy(predictions: np.ndarray, labels, index=None) -> float:
    """Summed cross-entropy; ``index`` restricts it to a subset of objects."""
    y = _targets(labels)
    if predictions.shape[0] != y.shape[0]:
        raise ShapeMismatchError(f"{predictions.shape[0]} predictions for {y.shape[0]} labels")
    if isinstance(labels, PseudoLabels) and predictions.shape[1] != labels.k:
        raise ShapeMismatchError(f"prediction width {predictions.shape[1]} != label space {labels.k}")
    rows = np.arange(y.shape[0]) if index is None else np.asarray(index)
    p = predictions[rows, y[rows]]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).sum())


def _layer_backward(params, graph, layer, h_in, layer_cache, d_out, grads, need_input_grad):
    schema = graph.schema
    d_in = {t: np.zeros_like(h_in[t]) for t in schema.object_types} if need_input_grad else None
    for s in schema.object_types:
        c = layer_cache[s]
        rels = schema.incoming(s)
        z, mask, beta = c["z"], c["mask"], c["beta"]
        if c["activate"]:
            d_pre = d_out[s] * np.where(c["pre"] > 0, 1.0, c["out"] + 1.0)
        else:
            d_pre = d_out[s]

        d_z = beta[:, :, None] * d_pre[None, :, :]
        if c["uniform"]:
            _project_back(params, graph, layer, rels, h_in, d_z, grads, d_in)
            continue
        d_beta = np.einsum("nd,rnd->rn", d_pre, z)
        # softmax over available relations; masked entries have beta == 0
        d_e = beta * (d_beta - (beta * d_beta).sum(axis=0, keepdims=True))
        d_u = d_e * np.where(c["u"] > 0, 1.0, LEAKY_SLOPE)

        a = params[f"a/{layer}/{s}"]
        Q = params[f"Q/{layer}/{s}"]
        K = params[f"K/{layer}/{s}"]
        d_a = c["q"].shape[1]
        du_total = d_u.sum(axis=0)
        grads[f"a/{layer}/{s}"][:d_a] += c["q"].T @ du_total
        grads[f"a/{layer}/{s}"][d_a:] += np.einsum("rnk,rn->k", c["keys"], d_u)
        d_q = np.outer(du_total, a[:d_a])
        d_keys = d_u[:, :, None] * a[d_a:][None, None, :]
        grads[f"Q/{layer}/{s}"] += z[0].T @ d_q
        grads[f"K/{layer}/{s}"] += np.einsum("rnd,rnk->dk", z, d_keys)
        d_z += d_keys @ K.T
        d_z[0] += d_q @ Q.T
        _project_back(params, graph, layer, rels, h_in, d_z, grads, d_in)
    return d_in


def _project_back(params, graph, layer, rels, h_in, d_z, grads, d_in):
    for k, r in enumerate(rels):
        if r.is_self:
            d_proj = d_z[k]
        else:
            d_proj = graph.adjacency(r.name).T @ d_z[k]
        grads[f"W/{layer}/{r.name}"] += h_in[r.target].T @ d_proj
        if d_in is not None:
            d_in[r.target] += d_proj @ params[f"W/{layer}/{r.name}"].T


def loss_and_grad(params: ModelParams, graph: HinGraph, features: FeatureSet, labels: PseudoLabels,
                  index=None, uniform_attention: bool = False, table: EmbeddingTable | None = None):
    """Loss and exact gradients of ``cross_entropy(classify(forward(...)))``.

    Pass a ``table`` produced by ``forward(..., keep_cache=True)`` with the
    same params to skip the forward pass.  Returns ``(loss, grads, table)``.
    """
    if table is None or table._cache is None:
        table, _ = forward(params, graph, features, uniform_attention=uniform_attention, keep_cache=True)
    y = _targets(labels)
    if y.shape[0] != graph.num_objects:
        raise ShapeMismatchError(f"{y.shape[0]} labels for {graph.num_objects} objects")
    if labels.k != params.k:
        raise ShapeMismatchError(f"label space {labels.k} != classifier width {params.k}")
    rows = np.arange(y.shape[0]) if index is None else np.asarray(index)

    H = table.matrix
    P = softmax_rows(H @ params["C"])
    picked = P[rows, y[rows]]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())

    d_logits = np.zeros_like(P)
    live = rows[picked >= PROB_FLOOR]
    d_logits[live] = P[live]
    d_logits[live, y[live]] -= 1.0

    grads = params.zeros_like()
    grads["C"] = H.T @ d_logits
    d_H = d_logits @ params["C"].T

    types = graph.schema.object_types
    d_out = {t: d_H[graph.type_slice(t)] for t in types}
    for layer in reversed(range(params.num_layers)):
        h_in = {t: features[t] for t in types} if layer == 0 else table.layers[layer - 1]
        d_out = _layer_backward(params, graph, layer, h_in, table._cache[layer], d_out, grads,
                                need_input_grad=layer > 0)

    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = tuple(int(v) for v in np.argwhere(~np.isfinite(g))[0])
            raise NumericalError(f"non-finite gradient in {name} at {bad}")
    return loss, grads, table


def backward(params: ModelParams, graph: HinGraph, features: FeatureSet, labels: PseudoLabels, index=None,
             uniform_attention: bool = False) -> dict:
    return loss_and_grad(params, graph, features, labels, index=index, uniform_attention=uniform_attention)[1]
