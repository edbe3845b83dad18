"""K-Means category induction for catalogs without inherent categories."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datalog import ItemCatalog


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: tuple[float, ...] = ()


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points**2).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centroid already
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    rounds.  A cluster left empty takes over the point lying farthest from
    its current centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"points must be an n x d matrix, got shape {X.shape}")
    n = X.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if not np.all(np.isfinite(X)):
        raise ValueError("points contain non-finite values")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, k, rng)
    history = []
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, centroids)
        new_assign = d.argmin(1)
        point_cost = d[np.arange(n), new_assign]
        history.append(float(point_cost.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # never strip a cluster of its last point
            movable = np.where(counts[assign] > 1, point_cost, -1.0)
            far = int(movable.argmax())
            counts[assign[far]] -= 1
            counts[c] += 1
            assign[far] = c
            point_cost[far] = 0.0
        new = np.zeros_like(centroids)
        np.add.at(new, assign, X)
        new /= counts[:, None]
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    # centroids are exact means of ``assign``; inertia measured against them
    inertia = float(((X - centroids[assign]) ** 2).sum())
    history.append(inertia)
    return KMeansResult(centroids, assign, inertia, it, tuple(history))


def induce_catalog(result: KMeansResult) -> ItemCatalog:
    k = result.centroids.shape[0]
    return ItemCatalog(len(result.assignment), k,
                       {i: (int(c),) for i, c in enumerate(result.assignment)})
