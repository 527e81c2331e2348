"""Deterministic K-means (k-means++ seeding, Lloyd iterations).

Shared by prototype construction and superpixel color clustering. Everything
is plain float64 numpy with fixed reduction order, so identical inputs and
seed give bitwise-identical centroids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray  # [K, d]
    inertia: float
    iterations_run: int


def _sq_dists(points, centroids):
    # exact (p - c)^2 expansion; the same formula is used in fit and assign
    # so repeated assignment is bitwise stable
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        centroids[j] = points[idx]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points, centroids, max_iter, tol):
    n, k = points.shape[0], centroids.shape[0]
    prev_inertia = np.inf
    iterations = 0
    labels = np.zeros(n, dtype=np.int64)
    for it in range(max_iter):
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), labels]

        # empty-cluster repair: hand the point farthest from its centroid
        # to each empty cluster, in cluster-index order
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            far = int(np.argmax(point_d2))
            labels[far] = empty
            point_d2[far] = 0.0
            counts = np.bincount(labels, minlength=k)

        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)

        inertia = float(((points - new_centroids[labels]) ** 2).sum())
        assert inertia <= prev_inertia + 1e-10, "k-means inertia increased"
        prev_inertia = inertia
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        iterations = it + 1
        if shift < tol:
            break
    inertia = float(_sq_dists(points, centroids).min(axis=1).sum())
    return centroids, inertia, iterations


def _farthest_first_init(points, k):
    # deterministic greedy spread; cheap extra start that reliably lands in
    # the optimal basin on small well-separated instances
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    start = int(np.argmax(((points - points.mean(axis=0)) ** 2).sum(axis=1)))
    centroids[0] = points[start]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centroids[j] = points[int(np.argmax(closest))]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(points, k, seed=0, max_iter=300, tol=1e-6, n_init=30):
    """Fit K-means with k-means++ seeding and n_init deterministic restarts
    (plus one farthest-first start).

    Restarts draw from one seeded stream; the best run is picked by lowest
    inertia (first one wins ties), so results are bitwise reproducible.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be 2-D [n, d], got shape {points.shape}")
    if not np.isfinite(points).all():
        raise ValueError("points contain NaN or infinity")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need n >= K >= 1, got n={n}, K={k}")

    rng = np.random.default_rng(seed)
    inits = [_farthest_first_init(points, k)]
    inits += [_plusplus_init(points, k, rng) for _ in range(max(1, n_init))]
    best = None
    for init in inits:
        centroids, inertia, iterations = _lloyd(points, init, max_iter, tol)
        if best is None or inertia < best[1]:
            best = (centroids, inertia, iterations)
    centroids, inertia, iterations = best
    return KMeansModel(centroids=centroids, inertia=inertia, iterations_run=iterations)


def kmeans_assign(model, points):
    """labels[i] = argmin_k ||points[i] - centroid_k||^2, ties to lowest k."""
    points = np.asarray(points, dtype=np.float64)
    centroids = model.centroids if isinstance(model, KMeansModel) else np.asarray(model)
    if points.ndim != 2 or points.shape[1] != centroids.shape[1]:
        raise ValueError(
            f"dimension mismatch: points {points.shape} vs centroids {centroids.shape}"
        )
    return np.argmin(_sq_dists(points, centroids), axis=1)
