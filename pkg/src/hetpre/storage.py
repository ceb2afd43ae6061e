"""On-disk formats.

Text dataset directory::

    schema.toml          [types] name = count; [[relations]] name/source/target
    <relation>.edges     src_local <TAB> dst_local [<TAB> weight]
    <type>.features      one whitespace-separated float row per object
    <type>.labels        local_id <TAB> class_id   (optional)

Ids are 0-based, files are UTF-8, and lines starting with ``#`` are comments.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ModelParams
from .errors import DatasetFormatError, ShapeMismatchError
from .graph import FeatureSet, HinGraph, HinSchema, build_graph
from .lpa import PseudoLabels

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
CHECKPOINT_VERSION = 1
EMBEDDING_MAGIC = b"HPEMB\x00\x00\x00"
EMBEDDING_VERSION = 1
_EMB_HEADER = struct.Struct("<8sIQII")
_DTYPE_F32 = 1


@dataclass
class Dataset:
    graph: HinGraph
    features: FeatureSet
    labels: dict = field(default_factory=dict)
    name: str = ""

    def global_labels(self):
        """``(global_ids, classes)`` over every labeled object, sorted by id."""
        gids, classes = [], []
        for t in self.graph.schema.object_types:
            if t in self.labels:
                ids, cls = self.labels[t]
                gids.append(np.asarray(ids, dtype=np.int64) + self.graph.offset(t))
                classes.append(np.asarray(cls, dtype=np.int64))
        if not gids:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        gids, classes = np.concatenate(gids), np.concatenate(classes)
        order = np.argsort(gids, kind="stable")
        return gids[order], classes[order]

    def stats(self) -> str:
        objects = ", ".join(f"{t} ({n})" for t, n in self.graph.counts.items())
        rels = ", ".join(f"{r.source}->{r.target}" for r in self.graph.schema.user_relations)
        return f"{objects}\t{rels}"


def _atomic_write(path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, stripped


def _parse_int(text, path, lineno, what):
    try:
        return int(text)
    except ValueError:
        raise DatasetFormatError(f"{what} {text!r} is not an integer", path, lineno) from None


def read_schema(path) -> tuple[HinSchema, dict, str]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise DatasetFormatError("schema file not found", path) from None
    except tomllib.TOMLDecodeError as exc:
        raise DatasetFormatError(f"invalid TOML: {exc}", path) from None
    types = doc.get("types")
    if not isinstance(types, dict) or not types:
        raise DatasetFormatError("missing [types] table", path)
    counts = {}
    for t, n in types.items():
        if not isinstance(n, int) or n < 0:
            raise DatasetFormatError(f"count for type {t!r} must be a nonnegative integer", path)
        counts[t] = n
    rels = []
    for k, rel in enumerate(doc.get("relations", [])):
        try:
            rels.append((rel["name"], rel["source"], rel["target"]))
        except (KeyError, TypeError):
            raise DatasetFormatError(f"relation #{k} needs name, source and target", path) from None
    try:
        schema = HinSchema(list(counts), rels)
    except Exception as exc:
        raise DatasetFormatError(str(exc), path) from None
    return schema, counts, str(doc.get("name", path.parent.name))


def write_schema(path, schema: HinSchema, counts, name: str = ""):
    lines = []
    if name:
        lines.append(f'name = "{name}"\n')
    lines.append("[types]\n")
    for t in schema.object_types:
        lines.append(f'"{t}" = {int(counts[t])}\n')
    for r in schema.user_relations:
        lines.append(f'\n[[relations]]\nname = "{r.name}"\nsource = "{r.source}"\ntarget = "{r.target}"\n')
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_edges(path, n_src, n_tgt):
    edges = []
    seen = set()
    for lineno, line in _data_lines(path):
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) not in (2, 3):
            raise DatasetFormatError(f"expected 2 or 3 fields, got {len(parts)}", path, lineno)
        i = _parse_int(parts[0], path, lineno, "source id")
        j = _parse_int(parts[1], path, lineno, "target id")
        if not 0 <= i < n_src:
            raise DatasetFormatError(f"source id {i} out of range [0, {n_src})", path, lineno)
        if not 0 <= j < n_tgt:
            raise DatasetFormatError(f"target id {j} out of range [0, {n_tgt})", path, lineno)
        w = 1.0
        if len(parts) == 3:
            try:
                w = float(parts[2])
            except ValueError:
                raise DatasetFormatError(f"weight {parts[2]!r} is not a number", path, lineno) from None
            if not (w > 0 and np.isfinite(w)):
                raise DatasetFormatError(f"weight must be positive, got {parts[2]}", path, lineno)
        if (i, j) in seen:
            raise DatasetFormatError(f"duplicate edge ({i}, {j})", path, lineno)
        seen.add((i, j))
        edges.append((i, j, w))
    return edges


def read_features(path, n_rows):
    rows = []
    dim = None
    for lineno, line in _data_lines(path):
        try:
            row = [float(v) for v in line.split()]
        except ValueError:
            raise DatasetFormatError("non-numeric feature value", path, lineno) from None
        if dim is None:
            dim = len(row)
        elif len(row) != dim:
            raise DatasetFormatError(f"row has {len(row)} values, expected {dim}", path, lineno)
        if not all(np.isfinite(row)):
            raise DatasetFormatError("non-finite feature value", path, lineno)
        rows.append(row)
        last = lineno
    if len(rows) != n_rows:
        where = last + 1 if rows else 1
        raise DatasetFormatError(f"expected {n_rows} feature rows, found {len(rows)}", path, where)
    return np.array(rows, dtype=np.float64).reshape(n_rows, dim or 0)


def read_labels(path, n):
    ids, classes = [], []
    seen = set()
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise DatasetFormatError(f"expected 2 fields, got {len(parts)}", path, lineno)
        i = _parse_int(parts[0], path, lineno, "object id")
        c = _parse_int(parts[1], path, lineno, "class id")
        if not 0 <= i < n:
            raise DatasetFormatError(f"object id {i} out of range [0, {n})", path, lineno)
        if c < 0:
            raise DatasetFormatError(f"class id must be >= 0, got {c}", path, lineno)
        if i in seen:
            raise DatasetFormatError(f"object {i} labeled twice", path, lineno)
        seen.add(i)
        ids.append(i)
        classes.append(c)
    return np.array(ids, dtype=np.int64), np.array(classes, dtype=np.int64)


def load_text_dataset(directory, normalization: str = "row") -> Dataset:
    directory = Path(directory)
    schema, counts, name = read_schema(directory / "schema.toml")
    edges = {}
    for r in schema.user_relations:
        path = directory / f"{r.name}.edges"
        if not path.exists():
            raise DatasetFormatError("edge file not found", path)
        edges[r.name] = read_edges(path, counts[r.source], counts[r.target])
        if not edges[r.name]:
            log.warning("relation %s has no edges (%s)", r.name, path)
    graph = build_graph(schema, edges, counts, normalization=normalization)
    feats = {}
    for t in schema.object_types:
        path = directory / f"{t}.features"
        if not path.exists():
            raise DatasetFormatError("feature file not found", path)
        feats[t] = read_features(path, counts[t])
    labels = {}
    for t in schema.object_types:
        path = directory / f"{t}.labels"
        if path.exists():
            labels[t] = read_labels(path, counts[t])
    return Dataset(graph, FeatureSet(feats), labels, name)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_text_dataset(directory, graph: HinGraph, features: FeatureSet, labels=None, name: str = ""):
    """Write a dataset in the text ingestion format (deterministic bytes)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_schema(directory / "schema.toml", graph.schema, graph.counts, name)
    for rel, edges in graph.edge_lists().items():
        with open(directory / f"{rel}.edges", "w", encoding="utf-8") as fh:
            for i, j, w in edges:
                fh.write(f"{i}\t{j}\n" if w == 1.0 else f"{i}\t{j}\t{_fmt(w)}\n")
    for t, x in features.items():
        with open(directory / f"{t}.features", "w", encoding="utf-8") as fh:
            for row in x:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")
    for t, lab in (labels or {}).items():
        if isinstance(lab, tuple):
            ids, cls = lab
        else:
            ids, cls = np.arange(len(lab)), np.asarray(lab)
        with open(directory / f"{t}.labels", "w", encoding="utf-8") as fh:
            for i, c in zip(ids, cls):
                fh.write(f"{int(i)}\t{int(c)}\n")


def save_bundle(path, dataset: Dataset):
    g = dataset.graph
    meta = {
        "version": BUNDLE_VERSION,
        "name": dataset.name,
        "schema": g.schema.to_dict(),
        "counts": g.counts,
        "normalization": g.normalization,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for r in g.schema.user_relations:
        coo = g.raw_weights(r.name).tocoo()
        arrays[f"edges/{r.name}"] = np.stack([coo.row, coo.col]).astype(np.int64)
        arrays[f"weights/{r.name}"] = coo.data
    for t, x in dataset.features.items():
        arrays[f"features/{t}"] = x
    for t, (ids, cls) in dataset.labels.items():
        arrays[f"labels/{t}"] = np.stack([ids, cls]).astype(np.int64)

    def write(fh):
        np.savez(fh, **arrays)

    _atomic_write(path, write)


def load_bundle(path) -> Dataset:
    path = Path(path)
    try:
        npz = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"not a dataset bundle: {exc}", path) from None
    with npz:
        if "meta" not in npz.files:
            raise DatasetFormatError("not a dataset bundle (no metadata)", path)
        meta = json.loads(npz["meta"].tobytes().decode())
        if meta.get("version") != BUNDLE_VERSION:
            raise DatasetFormatError(f"unsupported bundle version {meta.get('version')}", path)
        schema = HinSchema.from_dict(meta["schema"])
        edges = {}
        for r in schema.user_relations:
            e = npz[f"edges/{r.name}"]
            w = npz[f"weights/{r.name}"]
            edges[r.name] = list(zip(e[0].tolist(), e[1].tolist(), w.tolist()))
        graph = build_graph(schema, edges, meta["counts"], normalization=meta["normalization"])
        feats = {t: npz[f"features/{t}"] for t in schema.object_types}
        labels = {}
        for t in schema.object_types:
            key = f"labels/{t}"
            if key in npz.files:
                arr = npz[key]
                labels[t] = (arr[0].copy(), arr[1].copy())
    return Dataset(graph, FeatureSet(feats), labels, meta.get("name", ""))


def write_pseudo_labels(path, labels: PseudoLabels):
    def write(fh):
        out = io.StringIO()
        out.write(f"K={labels.k}\n")
        for gid, lab in enumerate(labels.assignment):
            out.write(f"{gid}\t{int(lab)}\n")
        fh.write(out.getvalue().encode())

    _atomic_write(path, write)


def read_pseudo_labels(path) -> PseudoLabels:
    k = None
    pairs = []
    for lineno, line in _data_lines(path):
        if k is None:
            if not line.startswith("K="):
                raise DatasetFormatError("first line must be K=<int>", path, lineno)
            k = _parse_int(line[2:], path, lineno, "K")
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetFormatError(f"expected 2 fields, got {len(parts)}", path, lineno)
        pairs.append((_parse_int(parts[0], path, lineno, "global id"), _parse_int(parts[1], path, lineno, "label")))
    if k is None:
        raise DatasetFormatError("empty pseudo-label file", path)
    gids = [g for g, _ in pairs]
    if gids != list(range(len(gids))):
        raise DatasetFormatError("global ids must be 0..n-1 in order", path)
    try:
        return PseudoLabels(np.array([lab for _, lab in pairs], dtype=np.int64), k)
    except ShapeMismatchError as exc:
        raise DatasetFormatError(str(exc), path) from None


def write_embeddings(path, matrix):
    """Binary embedding export: fixed header then row-major float32."""
    m = np.ascontiguousarray(getattr(matrix, "matrix", matrix), dtype="<f4")
    if m.ndim != 2:
        raise ShapeMismatchError("embedding matrix must be 2-D")
    header = _EMB_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, m.shape[0], m.shape[1], _DTYPE_F32)
    _atomic_write(path, lambda fh: (fh.write(header), fh.write(m.tobytes())))


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".tsv":
        return read_embeddings_tsv(path)
    data = path.read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise DatasetFormatError("truncated embedding header", path)
    magic, version, n, d, dtype = _EMB_HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise DatasetFormatError("bad embedding magic", path)
    if version != EMBEDDING_VERSION or dtype != _DTYPE_F32:
        raise DatasetFormatError(f"unsupported embedding version {version} / dtype {dtype}", path)
    body = data[_EMB_HEADER.size:]
    if len(body) != 4 * n * d:
        raise DatasetFormatError(f"expected {4 * n * d} payload bytes, found {len(body)}", path)
    return np.frombuffer(body, dtype="<f4").reshape(n, d).copy()


def write_embeddings_tsv(path, matrix):
    m = np.asarray(getattr(matrix, "matrix", matrix), dtype=np.float32)

    def write(fh):
        out = io.StringIO()
        for gid, row in enumerate(m):
            out.write(str(gid) + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
        fh.write(out.getvalue().encode())

    _atomic_write(path, write)


def read_embeddings_tsv(path) -> np.ndarray:
    rows = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        gid = _parse_int(parts[0], path, lineno, "global id")
        if gid != len(rows):
            raise DatasetFormatError(f"expected global id {len(rows)}, got {gid}", path, lineno)
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise DatasetFormatError("non-numeric embedding value", path, lineno) from None
    return np.array(rows, dtype=np.float32)


def save_checkpoint(path, params: ModelParams):
    meta = {
        "version": CHECKPOINT_VERSION,
        "schema_hash": params.schema_hash,
        "layer_dims": list(params.layer_dims),
        "k": params.k,
        "final_activation": params.final_activation,
        "shapes": {n: list(t.shape) for n, t in params.tensors.items()},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for n, t in params.tensors.items():
        arrays["t:" + n] = t
    _atomic_write(path, lambda fh: np.savez(fh, **arrays))


def load_checkpoint(path, schema_hash: str | None = None) -> ModelParams:
    path = Path(path)
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(npz["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DatasetFormatError(f"unsupported checkpoint version {meta.get('version')}", path)
        if schema_hash is not None and meta["schema_hash"] != schema_hash:
            raise ShapeMismatchError(f"checkpoint schema {meta['schema_hash']} does not match {schema_hash}")
        tensors = {}
        for n, shape in meta["shapes"].items():
            t = npz["t:" + n]
            if list(t.shape) != shape:
                raise DatasetFormatError(f"tensor {n} has shape {t.shape}, header says {shape}", path)
            tensors[n] = t.astype(np.float64)
    return ModelParams(tensors, tuple(meta["layer_dims"]), meta["k"], meta["final_activation"], meta["schema_hash"])


def write_report(path, report):
    def write(fh):
        for rec in report.records():
            fh.write((json.dumps(rec, sort_keys=True) + "\n").encode())

    _atomic_write(path, write)
