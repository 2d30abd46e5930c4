"""Lloyd k-means with k-means++ seeding, for hard-negative cluster labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class KMeansResult:
    centroids: np.ndarray
    cluster_of: np.ndarray
    inertia: float
    inertia_history: list[float]
    iterations: int


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances via the expanded product form
    x2 = (points**2).sum(axis=1)[:, None]
    c2 = (centroids**2).sum(axis=1)[None, :]
    return np.maximum(x2 + c2 - 2.0 * points @ centroids.T, 0.0)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total == 0.0:
            centroids[i] = points[rng.integers(n)]
            continue
        probs = closest / total
        centroids[i] = points[rng.choice(n, p=probs)]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(points: np.ndarray, k: int, max_iter: int = 50, rng: np.random.Generator | None = None) -> KMeansResult:
    """Cluster rows of `points` into k groups.

    Stops at an assignment fixpoint or after `max_iter` Lloyd iterations.
    Inertia is non-increasing across iterations; an empty cluster is reseeded
    to the point currently farthest from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds number of points {n}")
    if rng is None:
        rng = np.random.default_rng(0)

    centroids = _plusplus_init(points, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = _sq_dists(points, centroids)
        new_assignments = d2.argmin(axis=1)
        per_point = d2[np.arange(n), new_assignments]
        for empty in np.setdiff1d(np.arange(k), new_assignments):
            worst = int(per_point.argmax())
            centroids[empty] = points[worst]
            new_assignments[worst] = empty
            per_point[worst] = 0.0
        history.append(float(per_point.sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for c in range(k):
            members = points[assignments == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    d2 = _sq_dists(points, centroids)
    inertia = float(d2[np.arange(n), assignments].sum())
    return KMeansResult(
        centroids=centroids,
        cluster_of=assignments,
        inertia=inertia,
        inertia_history=history,
        iterations=iterations,
    )
