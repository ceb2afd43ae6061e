"""Downstream evaluation of frozen embeddings."""

from __future__ import annotations

import numpy as np

from .errors import HetpreError, ShapeMismatchError

PROBE_L2 = 1e-4
PROBE_ITERS = 500
SPLIT_REDRAWS = 20


def _as_matrix(embeddings) -> np.ndarray:
    m = getattr(embeddings, "matrix", embeddings)
    return np.asarray(m, dtype=np.float64)


def contingency(a, b) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_true, labels_pred) -> float:
    """Normalized mutual information, arithmetic-mean normalization."""
    labels_true, labels_pred = np.asarray(labels_true), np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape:
        raise ShapeMismatchError("label arrays differ in length")
    c = contingency(labels_true, labels_pred)
    n = c.sum()
    h_true, h_pred = _entropy(c.sum(axis=1)), _entropy(c.sum(axis=0))
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    nz = c > 0
    pij = c[nz] / n
    outer = np.outer(c.sum(axis=1), c.sum(axis=0))[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    denom = 0.5 * (h_true + h_pred)
    return max(0.0, min(1.0, mi / denom)) if denom > 0 else 0.0


def ari(labels_true, labels_pred) -> float:
    """Adjusted Rand index from pair counts."""
    labels_true, labels_pred = np.asarray(labels_true), np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape:
        raise ShapeMismatchError("label arrays differ in length")
    c = contingency(labels_true, labels_pred).astype(np.float64)
    n = c.sum()

    def pairs(x):
        return (x * (x - 1) / 2).sum()

    index = pairs(c)
    rows, cols = pairs(c.sum(axis=1)), pairs(c.sum(axis=0))
    total = n * (n - 1) / 2
    expected = rows * cols / total if total else 0.0
    max_index = 0.5 * (rows + cols)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def f1_scores(y_true, y_pred) -> tuple[float, float]:
    """Micro and macro F1 over the classes present in either array."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = np.union1d(y_true, y_pred)
    tp = np.array([np.sum((y_pred == c) & (y_true == c)) for c in classes], dtype=np.float64)
    fp = np.array([np.sum((y_pred == c) & (y_true != c)) for c in classes], dtype=np.float64)
    fn = np.array([np.sum((y_pred != c) & (y_true == c)) for c in classes], dtype=np.float64)
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    micro_denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = 2 * tp.sum() / micro_denom if micro_denom else 0.0
    return float(micro), float(per_class.mean())


class LogisticRegression:
    """Multinomial logistic regression fit by full-batch gradient descent.

    Inputs are standardized with training statistics.  The step size is the
    inverse of a Lipschitz bound on the mean loss, so a fixed iteration
    budget behaves the same across datasets.
    """

    def __init__(self, l2: float = PROBE_L2, iters: int = PROBE_ITERS):
        self.l2 = l2
        self.iters = iters

    def fit(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        self.classes_, yi = np.unique(y, return_inverse=True)
        self.mean_ = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        xs = np.hstack([(x - self.mean_) / self.scale_, np.ones((x.shape[0], 1))])
        n, d = xs.shape
        k = self.classes_.size
        target = np.zeros((n, k))
        target[np.arange(n), yi] = 1.0
        lipschitz = 0.5 * np.linalg.norm(xs, 2) ** 2 / n + self.l2
        lr = 1.0 / lipschitz
        w = np.zeros((d, k))
        for _ in range(self.iters):
            logits = xs @ w
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            grad = xs.T @ (p - target) / n + self.l2 * w
            w -= lr * grad
        self.coef_ = w
        return self

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        xs = np.hstack([(x - self.mean_) / self.scale_, np.ones((x.shape[0], 1))])
        return self.classes_[np.argmax(xs @ self.coef_, axis=1)]


def split_labeled(y, train_fraction: float, seed: int):
    """Train/validation/test index split.

    Redraws until every class appears in the training part.
    """
    y = np.asarray(y)
    n = y.size
    classes = np.unique(y)
    n_train = int(round(train_fraction * n))
    if classes.size < 2:
        raise HetpreError("need at least 2 classes")
    if n_train < classes.size:
        raise HetpreError(f"train fraction {train_fraction} gives {n_train} objects for {classes.size} classes")
    rng = np.random.default_rng(seed)
    for _ in range(SPLIT_REDRAWS):
        order = rng.permutation(n)
        train = order[:n_train]
        if np.unique(y[train]).size == classes.size:
            rest = order[n_train:]
            half = rest.size // 2
            return train, rest[:half], rest[half:]
    raise HetpreError(f"some class missing from the training split after {SPLIT_REDRAWS} draws")


def linear_probe(embeddings, labels, train_fraction: float, seed: int = 0, index=None) -> tuple[float, float]:
    """Micro/macro F1 of a logistic-regression probe on the test half.

    ``labels`` is either one class per embedding row or, with ``index``, one
    class per entry of ``index`` (the embedding rows that carry labels).
    """
    x = _as_matrix(embeddings)
    y = np.asarray(labels)
    if index is not None:
        index = np.asarray(index)
        if index.shape != y.shape:
            raise ShapeMismatchError("index and labels differ in length")
        x = x[index]
    elif x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(f"{x.shape[0]} embeddings for {y.shape[0]} labels")
    train, _, test = split_labeled(y, train_fraction, seed)
    clf = LogisticRegression().fit(x[train], y[train])
    return f1_scores(y[test], clf.predict(x[test]))


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def _sq_dist(x, centers):
    return (
        (x ** 2).sum(axis=1)[:, None] - 2 * x @ centers.T + (centers ** 2).sum(axis=1)[None, :]
    ).clip(min=0.0)


def lloyd(x, k, rng, max_iter: int = 300):
    """One k-means run; returns ``(assignment, centers, inertia_history)``.

    An empty cluster is re-seeded at the point farthest from its center.
    """
    centers = _kmeans_pp(x, k, rng)
    history = []
    assign = None
    for _ in range(max_iter):
        d = _sq_dist(x, centers)
        new_assign = d.argmin(axis=1)
        history.append(float(d[np.arange(x.shape[0]), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        dist = d[np.arange(x.shape[0]), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(dist.argmax())
                centers[c] = x[far]
                dist[far] = 0.0
    return assign, centers, history


def kmeans(x, k, seed: int = 0, restarts: int = 10):
    """Best-inertia assignment over ``restarts`` k-means++ seeded runs."""
    x = _as_matrix(x)
    if k < 2:
        raise HetpreError("k must be >= 2")
    if x.shape[0] < k:
        raise HetpreError(f"{x.shape[0]} points for k={k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        assign, _, hist = lloyd(x, k, rng)
        if best is None or hist[-1] < best[1]:
            best = (assign, hist[-1])
    return best[0]


def kmeans_eval(embeddings, labels, k: int | None = None, seed: int = 0, restarts: int = 10,
                index=None) -> tuple[float, float]:
    """NMI and ARI between k-means clusters of the embeddings and ``labels``."""
    x = _as_matrix(embeddings)
    y = np.asarray(labels)
    if index is not None:
        x = x[np.asarray(index)]
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(f"{x.shape[0]} embeddings for {y.shape[0]} labels")
    k = int(np.unique(y).size) if k is None else int(k)
    pred = kmeans(x, k, seed=seed, restarts=restarts)
    return nmi(y, pred), ari(y, pred)
