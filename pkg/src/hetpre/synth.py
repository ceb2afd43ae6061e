"""Planted-partition heterogeneous networks for testing and benchmarking."""

from __future__ import annotations

from itertools import combinations
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .graph import FeatureSet, HinGraph, HinSchema, build_graph

# pinned acceptance fixture
DEFAULT_COUNTS = {"A": 200, "P": 300, "S": 100}
DEFAULT_HUB = "P"
DEFAULT_PARAMS = dict(
    num_blocks=4,
    per_type_counts=DEFAULT_COUNTS,
    p_in=0.2,
    p_out=0.01,
    feature_dim=16,
    feature_noise=1.0,
    hub=DEFAULT_HUB,
)


def planted_hin(num_blocks: int, per_type_counts: Mapping[str, int], p_in: float, p_out: float,
                feature_dim: int, feature_noise: float, seed: int = 0, star: bool = True,
                hub: str | None = None):
    """Generate ``(graph, features, blocks)`` with a planted block structure.

    All types share one block space.  Objects of each type are split as evenly
    as possible over blocks.  With ``star`` (the default) only the hub type,
    the first in ``per_type_counts`` unless given, links to the other types;
    otherwise every pair of types is linked.  Each linked pair gets both
    relation directions.  Features are the one-hot block indicator padded to
    ``feature_dim`` plus Gaussian noise of scale ``feature_noise``.

    ``blocks`` maps each type to an int array of per-object block ids.
    """
    types = list(per_type_counts)
    if num_blocks < 2:
        raise ConfigError("need at least 2 blocks")
    if len(types) < 2:
        raise ConfigError("need at least 2 object types")
    # p_out == p_in is allowed as a structureless null model
    if not (0 <= p_out <= p_in <= 1 and p_in > 0):
        raise ConfigError(f"need 0 <= p_out <= p_in <= 1 and p_in > 0, got p_in={p_in}, p_out={p_out}")
    if feature_dim < num_blocks:
        raise ConfigError("feature_dim must be >= num_blocks")
    if feature_noise < 0:
        raise ConfigError("feature_noise must be >= 0")
    for t, n in per_type_counts.items():
        if n < num_blocks:
            raise ConfigError(f"type {t!r} has {n} objects, fewer than {num_blocks} blocks")
    hub = types[0] if hub is None else hub
    if hub not in per_type_counts:
        raise ConfigError(f"hub type {hub!r} not among {types}")

    rng = np.random.default_rng(seed)
    blocks = {}
    for t in types:
        n = int(per_type_counts[t])
        blocks[t] = rng.permutation(np.arange(n) % num_blocks)

    if star:
        pairs = [(hub, t) for t in types if t != hub]
    else:
        pairs = list(combinations(types, 2))

    relations, edges = [], {}
    for a, b in pairs:
        ba, bb = blocks[a], blocks[b]
        same = ba[:, None] == bb[None, :]
        prob = np.where(same, p_in, p_out)
        hit = rng.random(prob.shape) < prob
        src, tgt = np.nonzero(hit)
        fwd, back = f"{a}-{b}", f"{b}-{a}"
        relations += [(fwd, a, b), (back, b, a)]
        edges[fwd] = list(zip(src.tolist(), tgt.tolist()))
        edges[back] = sorted(zip(tgt.tolist(), src.tolist()))

    schema = HinSchema(types, relations)
    graph = build_graph(schema, edges, {t: int(n) for t, n in per_type_counts.items()})

    feats = {}
    for t in types:
        n = int(per_type_counts[t])
        x = np.zeros((n, feature_dim))
        x[np.arange(n), blocks[t]] = 1.0
        x += feature_noise * rng.standard_normal((n, feature_dim))
        feats[t] = x
    return graph, FeatureSet(feats), blocks


def default_fixture(seed: int = 0):
    return planted_hin(seed=seed, **DEFAULT_PARAMS)


def global_blocks(graph: HinGraph, blocks: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(blocks[t]) for t in graph.schema.object_types])
