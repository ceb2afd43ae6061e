"""Typed heterogeneous graph with per-relation sparse normalized adjacency.

A relation ``(name, source, target)`` aggregates *into* objects of the
``source`` type *from* neighbors of the ``target`` type.  Its adjacency is a
CSR matrix of shape ``(count[source], count[target])``.  Reverse relations are
never added implicitly: declare both directions when you want them.

Every object type also gets one implicit self-relation named ``self:<type>``
whose adjacency is the identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GraphError, ShapeMismatchError

SELF_PREFIX = "self:"
NORMALIZATIONS = ("row", "symmetric")


@dataclass(frozen=True)
class Relation:
    name: str
    source: str
    target: str
    is_self: bool = False


def self_relation_name(object_type: str) -> str:
    return SELF_PREFIX + object_type


class HinSchema:
    """Object types plus user relations; self-relations are generated here."""

    def __init__(self, object_types: Sequence[str], relations: Iterable[Sequence[str]]):
        types = tuple(object_types)
        if len(set(types)) != len(types):
            raise GraphError(f"duplicate object type in {types}")
        for t in types:
            if not t or t.startswith(SELF_PREFIX):
                raise GraphError(f"invalid object type name {t!r}")

        user = []
        seen = set()
        for rel in relations:
            name, source, target = rel
            if name.startswith(SELF_PREFIX):
                raise GraphError(f"self-relations are implicit and cannot be declared: {name!r}")
            if name in seen:
                raise GraphError(f"duplicate relation name {name!r}")
            for end in (source, target):
                if end not in types:
                    raise GraphError(f"relation {name!r} references unknown type {end!r}")
            seen.add(name)
            user.append(Relation(name, source, target))

        self_rels = [Relation(self_relation_name(t), t, t, is_self=True) for t in types]
        # heterogeneity: |A| + |R| > 2, self-relations included in R
        if len(types) + len(user) + len(self_rels) <= 2:
            raise GraphError("not a heterogeneous network: need |types| + |relations| > 2")

        self.object_types = types
        self.user_relations = tuple(user)
        self.relations = tuple(user) + tuple(self_rels)
        self._by_name = {r.name: r for r in self.relations}

    def relation(self, name: str) -> Relation:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"unknown relation {name!r}") from None

    def incoming(self, object_type: str) -> tuple[Relation, ...]:
        """Relations aggregated at ``object_type``: self-relation first, then
        user relations in declaration order."""
        if object_type not in self.object_types:
            raise GraphError(f"unknown object type {object_type!r}")
        rels = [self._by_name[self_relation_name(object_type)]]
        rels += [r for r in self.user_relations if r.source == object_type]
        return tuple(rels)

    def to_dict(self) -> dict:
        return {
            "object_types": list(self.object_types),
            "relations": [[r.name, r.source, r.target] for r in self.user_relations],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HinSchema":
        return cls(data["object_types"], [tuple(r) for r in data["relations"]])

    def schema_hash(self) -> str:
        text = "|".join(self.object_types) + "#" + "|".join(
            f"{r.name}:{r.source}>{r.target}" for r in self.user_relations
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, HinSchema) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"HinSchema(types={list(self.object_types)}, relations={[r.name for r in self.user_relations]})"


class HinGraph:
    """Immutable heterogeneous graph.  Build it with :func:`build_graph`."""

    def __init__(self, schema: HinSchema, counts: Mapping[str, int],
                 adjacency: Mapping[str, sp.csr_matrix], raw: Mapping[str, sp.csr_matrix],
                 normalization: str = "row"):
        self.schema = schema
        self.counts = {t: int(counts[t]) for t in schema.object_types}
        self.normalization = normalization
        self._adj = dict(adjacency)
        self._raw = dict(raw)
        offsets = np.zeros(len(schema.object_types) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([self.counts[t] for t in schema.object_types])
        self._offsets = offsets
        self._type_index = {t: k for k, t in enumerate(schema.object_types)}
        self._has_nbrs = {
            name: np.diff(a.indptr) > 0 for name, a in self._adj.items()
        }

    @property
    def num_objects(self) -> int:
        return int(self._offsets[-1])

    @property
    def num_edges(self) -> int:
        """Stored user-relation edges (each declared direction counted once)."""
        return sum(self._adj[r.name].nnz for r in self.schema.user_relations)

    def offset(self, object_type: str) -> int:
        return int(self._offsets[self._type_index[object_type]])

    def type_slice(self, object_type: str) -> slice:
        k = self._type_index[object_type]
        return slice(int(self._offsets[k]), int(self._offsets[k + 1]))

    def globalize(self, object_type: str, local: int) -> int:
        if object_type not in self._type_index:
            raise GraphError(f"unknown object type {object_type!r}")
        if not 0 <= local < self.counts[object_type]:
            raise GraphError(f"local id {local} out of range for type {object_type!r}")
        return self.offset(object_type) + int(local)

    def localize(self, gid: int) -> tuple[str, int]:
        if not 0 <= gid < self.num_objects:
            raise GraphError(f"global id {gid} out of range [0, {self.num_objects})")
        k = int(np.searchsorted(self._offsets, gid, side="right")) - 1
        t = self.schema.object_types[k]
        return t, int(gid - self._offsets[k])

    def type_of(self, gid: int) -> str:
        return self.localize(gid)[0]

    def type_ids(self) -> np.ndarray:
        """Type index of every global object."""
        return np.repeat(np.arange(len(self.schema.object_types)),
                         [self.counts[t] for t in self.schema.object_types])

    def adjacency(self, relation: str) -> sp.csr_matrix:
        self.schema.relation(relation)
        return self._adj[relation]

    def raw_weights(self, relation: str) -> sp.csr_matrix:
        self.schema.relation(relation)
        return self._raw[relation]

    def has_neighbors(self, relation: str) -> np.ndarray:
        """Boolean mask over the aggregating type: rows with at least one entry."""
        self.schema.relation(relation)
        return self._has_nbrs[relation]

    def neighbors(self, gid: int, relation: str) -> list[tuple[int, float]]:
        rel = self.schema.relation(relation)
        t, local = self.localize(gid)
        if t != rel.source:
            raise GraphError(
                f"object {gid} has type {t!r} but relation {relation!r} aggregates into {rel.source!r}"
            )
        a = self._adj[relation]
        lo, hi = a.indptr[local], a.indptr[local + 1]
        base = self.offset(rel.target)
        return [(base + int(j), float(w)) for j, w in zip(a.indices[lo:hi], a.data[lo:hi])]

    def union_adjacency(self) -> sp.csr_matrix:
        """All user-relation links as one untyped global |V| x |V| matrix of
        edge multiplicities (self-loops excluded)."""
        n = self.num_objects
        rows, cols = [], []
        for r in self.schema.user_relations:
            coo = self._raw[r.name].tocoo()
            rows.append(coo.row.astype(np.int64) + self.offset(r.source))
            cols.append(coo.col.astype(np.int64) + self.offset(r.target))
        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        keep = rows != cols
        data = np.ones(int(keep.sum()))
        m = sp.csr_matrix((data, (rows[keep], cols[keep])), shape=(n, n))
        m.sum_duplicates()
        m.sort_indices()
        return m

    def edge_lists(self) -> dict[str, list[tuple[int, int, float]]]:
        """Raw (unnormalized) edges per user relation, sorted by (i, j)."""
        out = {}
        for r in self.schema.user_relations:
            coo = self._raw[r.name].tocoo()
            out[r.name] = [(int(i), int(j), float(w)) for i, j, w in zip(coo.row, coo.col, coo.data)]
        return out

    def __eq__(self, other):
        if not isinstance(other, HinGraph):
            return NotImplemented
        if self.schema != other.schema or self.counts != other.counts:
            return False
        if self.normalization != other.normalization:
            return False
        for r in self.schema.relations:
            a, b = self._adj[r.name], other._adj[r.name]
            if a.shape != b.shape or not (
                np.array_equal(a.indptr, b.indptr)
                and np.array_equal(a.indices, b.indices)
                and np.array_equal(a.data, b.data)
            ):
                return False
        return True

    def __repr__(self):
        counts = ", ".join(f"{t} ({n})" for t, n in self.counts.items())
        return f"HinGraph({counts}; {self.num_edges} edges)"


def _normalize(raw: sp.csr_matrix, mode: str) -> sp.csr_matrix:
    if mode == "row":
        deg = np.asarray(raw.sum(axis=1)).ravel()
        scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        out = sp.diags(scale) @ raw
    elif mode == "symmetric":
        rdeg = np.asarray(raw.sum(axis=1)).ravel()
        cdeg = np.asarray(raw.sum(axis=0)).ravel()
        rs = np.divide(1.0, np.sqrt(rdeg), out=np.zeros_like(rdeg), where=rdeg > 0)
        cs = np.divide(1.0, np.sqrt(cdeg), out=np.zeros_like(cdeg), where=cdeg > 0)
        out = sp.diags(rs) @ raw @ sp.diags(cs)
    else:
        raise GraphError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
    out = sp.csr_matrix(out)
    out.sort_indices()
    return out


def build_graph(schema: HinSchema, edge_lists: Mapping[str, Iterable[Sequence]],
                counts: Mapping[str, int], normalization: str = "row") -> HinGraph:
    """Validate edges and build a :class:`HinGraph`.

    ``edge_lists`` maps a user relation name to ``(source_local, target_local)``
    or ``(source_local, target_local, weight)`` tuples.  Relations missing from
    the mapping have no edges.
    """
    for t in schema.object_types:
        if t not in counts:
            raise GraphError(f"missing object count for type {t!r}")
        if int(counts[t]) < 0:
            raise GraphError(f"negative count for type {t!r}")
    for name in edge_lists:
        rel = schema.relation(name)
        if rel.is_self:
            raise GraphError(f"self-relation {name!r} cannot be given edges")

    adjacency, raw = {}, {}
    for rel in schema.user_relations:
        n_src, n_tgt = int(counts[rel.source]), int(counts[rel.target])
        edges = list(edge_lists.get(rel.name, ()))
        src = np.empty(len(edges), dtype=np.int64)
        tgt = np.empty(len(edges), dtype=np.int64)
        w = np.ones(len(edges), dtype=np.float64)
        for k, e in enumerate(edges):
            if len(e) not in (2, 3):
                raise GraphError(f"relation {rel.name!r}: malformed edge {e!r}")
            src[k], tgt[k] = int(e[0]), int(e[1])
            if len(e) == 3 and e[2] is not None:
                w[k] = float(e[2])
        if len(edges):
            bad = (src < 0) | (src >= n_src)
            if bad.any():
                k = int(np.argmax(bad))
                raise GraphError(
                    f"relation {rel.name!r}: source id {src[k]} out of range for type {rel.source!r} ({n_src})"
                )
            bad = (tgt < 0) | (tgt >= n_tgt)
            if bad.any():
                k = int(np.argmax(bad))
                raise GraphError(
                    f"relation {rel.name!r}: target id {tgt[k]} out of range for type {rel.target!r} ({n_tgt})"
                )
            bad = ~(w > 0) | ~np.isfinite(w)
            if bad.any():
                k = int(np.argmax(bad))
                raise GraphError(f"relation {rel.name!r}: nonpositive weight {w[k]} on edge ({src[k]}, {tgt[k]})")
            order = np.lexsort((tgt, src))
            src, tgt, w = src[order], tgt[order], w[order]
            dup = (np.diff(src) == 0) & (np.diff(tgt) == 0)
            if dup.any():
                k = int(np.argmax(dup))
                raise GraphError(f"relation {rel.name!r}: duplicate edge ({src[k]}, {tgt[k]})")
        m = sp.csr_matrix((w, (src, tgt)), shape=(n_src, n_tgt))
        m.sort_indices()
        raw[rel.name] = m
        adjacency[rel.name] = _normalize(m, normalization)

    for t in schema.object_types:
        eye = sp.identity(int(counts[t]), dtype=np.float64, format="csr")
        adjacency[self_relation_name(t)] = eye
        raw[self_relation_name(t)] = eye
    return HinGraph(schema, counts, adjacency, raw, normalization)


class FeatureSet:
    """Dense per-type feature matrices (float64)."""

    def __init__(self, matrices: Mapping[str, np.ndarray]):
        self._m = {}
        for t, x in matrices.items():
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2:
                raise ShapeMismatchError(f"features for type {t!r} must be 2-D, got shape {x.shape}")
            if not np.isfinite(x).all():
                raise ShapeMismatchError(f"features for type {t!r} contain NaN/Inf")
            x.setflags(write=False)
            self._m[t] = x

    def __getitem__(self, object_type: str) -> np.ndarray:
        return self._m[object_type]

    def __contains__(self, object_type):
        return object_type in self._m

    def items(self):
        return self._m.items()

    def dims(self) -> dict[str, int]:
        return {t: x.shape[1] for t, x in self._m.items()}

    def check(self, graph: HinGraph) -> None:
        for t in graph.schema.object_types:
            if t not in self._m:
                raise ShapeMismatchError(f"no features for type {t!r}")
            if self._m[t].shape[0] != graph.counts[t]:
                raise ShapeMismatchError(
                    f"features for type {t!r} have {self._m[t].shape[0]} rows, graph has {graph.counts[t]} objects"
                )


def neighbors(graph: HinGraph, gid: int, relation: str) -> list[tuple[int, float]]:
    return graph.neighbors(gid, relation)
