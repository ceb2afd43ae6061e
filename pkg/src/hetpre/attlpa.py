"""Attention-weighted label propagation.

Runs the encoder's aggregation over one-hot pseudo-labels instead of
projected features, reusing the attention coefficients the encoder produced
in the same pass, then hard-quantizes every layer with an argmax.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .encoder import AttentionSnapshot
from .errors import ShapeMismatchError
from .graph import HinGraph
from .lpa import TIE_RTOL, PseudoLabels

DENSE_MAX_K = 64


def _argmax_rows_dense(v: np.ndarray) -> np.ndarray:
    best = v.max(axis=1, keepdims=True)
    tied = v >= best - TIE_RTOL * np.abs(best)
    return tied.argmax(axis=1)


def _argmax_rows_sparse(v: sp.csr_matrix) -> np.ndarray:
    v = v.tocsr()
    v.sum_duplicates()
    v.eliminate_zeros()
    v.sort_indices()
    n = v.shape[0]
    # votes are nonnegative, so a row with no stored entry is an all-zero tie won by class 0
    out = np.zeros(n, dtype=np.int64)
    lengths = np.diff(v.indptr)
    nonempty = lengths > 0
    if not nonempty.any():
        return out
    starts = v.indptr[:-1][nonempty]
    best = np.maximum.reduceat(v.data, starts)
    row_of = np.repeat(np.arange(nonempty.sum()), lengths[nonempty])
    tied = v.data >= (best - TIE_RTOL * np.abs(best))[row_of]
    cols = np.where(tied, v.indices.astype(np.int64), np.iinfo(np.int64).max)
    out[nonempty] = np.minimum.reduceat(cols, starts)
    return out


def propagate(snapshot: AttentionSnapshot, graph: HinGraph, labels: PseudoLabels,
              num_layers: int | None = None) -> PseudoLabels:
    """One forward pass of label propagation, one hard step per layer.

    Layer ``l`` uses the layer-``l`` coefficients.  Argmax ties go to the
    smallest class id.
    """
    if num_layers is None:
        num_layers = snapshot.num_layers
    if num_layers != snapshot.num_layers:
        raise ShapeMismatchError(f"snapshot has {snapshot.num_layers} layers, asked for {num_layers}")
    if len(labels) != graph.num_objects:
        raise ShapeMismatchError(f"{len(labels)} labels for {graph.num_objects} objects")
    schema = graph.schema
    k = labels.k
    dense = k <= DENSE_MAX_K

    y = labels.assignment
    for layer in range(num_layers):
        new = np.empty_like(y)
        onehot = {}
        for t in schema.object_types:
            yt = y[graph.type_slice(t)]
            n = yt.size
            m = sp.csr_matrix((np.ones(n), (np.arange(n), yt)), shape=(n, k))
            onehot[t] = m.toarray() if dense else m
        for s in schema.object_types:
            beta = snapshot.beta[layer][s]
            rels = snapshot.relations[s]
            if beta.shape != (graph.counts[s], len(rels)):
                raise ShapeMismatchError(f"attention for type {s!r} at layer {layer} has shape {beta.shape}")
            votes = None
            for col, name in enumerate(rels):
                rel = schema.relation(name)
                b = beta[:, col]
                if rel.is_self:
                    part = onehot[s]
                else:
                    part = graph.adjacency(name) @ onehot[rel.target]
                part = b[:, None] * part if dense else sp.diags(b) @ part
                votes = part if votes is None else votes + part
            new[graph.type_slice(s)] = _argmax_rows_dense(votes) if dense else _argmax_rows_sparse(votes)
        y = new
    return labels.with_assignment(y)


def label_churn(before: PseudoLabels, after: PseudoLabels) -> float:
    """Fraction of objects whose label changed."""
    if len(before) != len(after):
        raise ShapeMismatchError(f"label sets differ in size: {len(before)} vs {len(after)}")
    if len(before) == 0:
        return 0.0
    return float(np.mean(before.assignment != after.assignment))
