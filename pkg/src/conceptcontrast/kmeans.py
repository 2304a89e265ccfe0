"""Seeded K-Means: k-means++ seeding, Lloyd iterations, then single-point
(Hartigan) moves, best of several restarts.

The Hartigan pass matters for the small binary problems that show up in
neuron summarization, where plain Lloyd often stalls in a poor partition.
"""

import numpy as np


def squared_distances(X, centers):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def sse(X, labels):
    """Within-cluster sum of squared distances to the cluster means."""
    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for j in np.unique(labels):
        pts = X[labels == j]
        total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


def kmeans_plusplus(X, k, rng):
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = squared_distances(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, squared_distances(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def _centers(X, labels, k):
    out = np.zeros((k, X.shape[1]))
    for j in range(k):
        members = labels == j
        if members.any():
            out[j] = X[members].mean(0)
    return out


def _lloyd(X, centers, max_iter):
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        new = np.argmin(squared_distances(X, centers), axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # repair: steal the point farthest from its own center
            own = squared_distances(X, centers)[np.arange(len(X)), new]
            own[counts[new] <= 1] = -1.0
            far = int(np.argmax(own))
            if own[far] < 0:
                break
            counts[new[far]] -= 1
            new[far] = j
            counts[j] += 1
        centers = _centers(X, new, k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return new


def _hartigan(X, labels, k):
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centers = _centers(X, labels, k)
    moved = True
    while moved:
        moved = False
        for i in range(X.shape[0]):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((centers - X[i]) ** 2).sum(1)
            cost_out = counts[a] / (counts[a] - 1.0) * d[a]
            gain = counts / (counts + 1.0) * d - cost_out
            gain[a] = 0.0
            b = int(np.argmin(gain))
            if gain[b] < -1e-12:
                centers[a] = (centers[a] * counts[a] - X[i]) / (counts[a] - 1.0)
                centers[b] = (centers[b] * counts[b] + X[i]) / (counts[b] + 1.0)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
    return labels


def _canonical(labels):
    """Relabel clusters in order of first appearance."""
    mapping = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def kmeans(X, k, seed=0, n_init=10, max_iter=300):
    """Cluster the rows of ``X`` into at most ``k`` groups.

    Returns ``(labels, sse)``. Labels are canonical: cluster ids appear in
    order of the first row assigned to them. ``k`` is capped at the number
    of distinct rows, so every returned cluster is non-empty.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n == 0:
        raise ValueError("no points to cluster")
    k = min(k, len(np.unique(X, axis=0)))
    if k == 1:
        labels = np.zeros(n, dtype=np.int64)
        return labels, sse(X, labels)

    rng = np.random.default_rng(seed)
    best, best_sse = None, np.inf
    for _ in range(n_init):
        centers = kmeans_plusplus(X, k, rng)
        labels = _lloyd(X, centers, max_iter)
        labels = _hartigan(X, labels, centers.shape[0])
        cost = sse(X, labels)
        if cost < best_sse - 1e-12:
            best, best_sse = labels, cost
    return _canonical(best), best_sse
