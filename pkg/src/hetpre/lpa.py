"""Label propagation clustering over the whole network.

Produces the initial pseudo-labels: every object starts with its own label,
then objects adopt the most frequent label among their neighbors until
nothing changes.  All relations are pooled into one untyped neighborhood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import GraphError, ShapeMismatchError
from .graph import HinGraph

log = logging.getLogger(__name__)

# weighted votes within this relative distance of the maximum count as a tie
TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class PseudoLabels:
    """Hard cluster assignment over all objects in a label space of size ``k``.

    ``k`` is fixed at creation and may exceed the number of labels in use.
    """

    assignment: np.ndarray
    k: int
    converged: bool = True
    iterations: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1:
            raise ShapeMismatchError("assignment must be 1-D")
        if self.k < 1:
            raise ShapeMismatchError(f"label space size must be >= 1, got {self.k}")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ShapeMismatchError(f"labels must lie in [0, {self.k})")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def __len__(self):
        return self.assignment.size

    @property
    def one_hot(self) -> sp.csr_matrix:
        n = self.assignment.size
        return sp.csr_matrix(
            (np.ones(n), (np.arange(n), self.assignment)), shape=(n, self.k)
        )

    def dense(self) -> np.ndarray:
        y = np.zeros((self.assignment.size, self.k))
        y[np.arange(self.assignment.size), self.assignment] = 1.0
        return y

    def with_assignment(self, assignment) -> "PseudoLabels":
        return PseudoLabels(np.asarray(assignment), self.k, self.converged, self.iterations, dict(self.meta))

    def __eq__(self, other):
        return (
            isinstance(other, PseudoLabels)
            and self.k == other.k
            and np.array_equal(self.assignment, other.assignment)
        )


def frequency_vote(neighbor_labels, rng: np.random.Generator | None = None) -> int:
    """Label with the largest total weight.

    Ties go to the smallest label, or to a uniformly drawn tied label when
    ``rng`` is given.
    """
    totals: dict[int, float] = {}
    for label, weight in neighbor_labels:
        totals[int(label)] = totals.get(int(label), 0.0) + float(weight)
    if not totals:
        raise ValueError("frequency_vote needs at least one neighbor label")
    best = max(totals.values())
    cutoff = best - TIE_RTOL * abs(best)
    tied = sorted(label for label, w in totals.items() if w >= cutoff)
    if rng is None or len(tied) == 1:
        return tied[0]
    return tied[int(rng.integers(len(tied)))]


def _vote(labels_of_nbrs: np.ndarray, current: int, rng: np.random.Generator) -> int:
    uniq, counts = np.unique(labels_of_nbrs, return_counts=True)
    tied = uniq[counts == counts.max()]
    if tied.size == 1:
        return int(tied[0])
    # a tied current label is kept, so "no change" means every object holds
    # one of its neighborhood's most frequent labels
    if current in tied:
        return current
    return int(tied[rng.integers(tied.size)])


def lpa_init(graph: HinGraph, rng_seed: int = 0, max_iters: int = 100) -> PseudoLabels:
    """Asynchronous label propagation until no label changes.

    Each sweep visits objects in a fresh seeded-random order.  Votes are unit
    per edge and an object's own label does not vote.  Ties keep the current
    label when it is among them, otherwise one tied label is drawn from the
    seeded stream (smallest-id ties let the smallest initial label flood
    across blocks).  Surviving labels are compacted to ``[0, K)`` in
    ascending order of their raw value.
    """
    if max_iters < 1:
        raise GraphError(f"max_iters must be >= 1, got {max_iters}")
    n = graph.num_objects
    rng = np.random.default_rng(rng_seed)
    labels = rng.permutation(n).astype(np.int64)
    adj = graph.union_adjacency()
    indptr, indices = adj.indptr, adj.indices
    # multiplicities: repeat neighbor entries so votes stay unit per edge
    mult = adj.data.astype(np.int64)
    expand = not np.all(mult == 1)

    converged = False
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        changed = 0
        for i in rng.permutation(n):
            lo, hi = indptr[i], indptr[i + 1]
            if lo == hi:
                continue
            nbr = labels[indices[lo:hi]]
            if expand:
                nbr = np.repeat(nbr, mult[lo:hi])
            new = _vote(nbr, int(labels[i]), rng)
            if new != labels[i]:
                labels[i] = new
                changed += 1
        if changed == 0:
            converged = True
            break

    if not converged:
        log.warning("LPA did not converge within %d sweeps", max_iters)
    surviving, compact = np.unique(labels, return_inverse=True)
    log.info("LPA: %d sweeps, K=%d", sweeps, surviving.size)
    return PseudoLabels(
        compact.astype(np.int64), int(surviving.size), converged=converged, iterations=sweeps,
        meta={"raw_labels": surviving},
    )
