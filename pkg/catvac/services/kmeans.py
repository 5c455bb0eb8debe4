"""
K-means baseline: k-means++ seeding, Lloyd iterations, best of several restarts.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import UserError
from ..storage.container import CheckpointError, read_container, write_container

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 300
DEFAULT_RESTARTS = 10


class KMeansError(UserError):
    pass


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: List[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    def save(self, path: Union[str, Path]) -> None:
        write_container(
            path,
            {"centroids": np.asarray(self.centroids, dtype=np.float64)},
            {
                "kind": "kmeans",
                "inertia": self.inertia,
                "iterations_run": self.iterations_run,
                "inertia_history": self.inertia_history,
            },
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "KMeansModel":
        tensors, meta = read_container(path)
        if meta.get("kind") != "kmeans" or "centroids" not in tensors:
            raise CheckpointError(f"{path} does not hold K-means centroids")
        return cls(
            centroids=tensors["centroids"],
            inertia=float(meta["inertia"]),
            iterations_run=int(meta["iterations_run"]),
            inertia_history=[float(v) for v in meta.get("inertia_history", [])],
        )


def _as_points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise KMeansError(f"points must be N x D, got shape {points.shape}")
    if not np.isfinite(points).all():
        raise KMeansError("points must be finite")
    return points


def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # argmin keeps the lowest index on ties
    distances = cdist(points, centroids, "sqeuclidean")
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(points.shape[0]), labels]


def kmeans_plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform picks once every point is covered."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = cdist(points, points[chosen], "sqeuclidean").ravel()
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            index = int(rng.integers(n))
        chosen.append(index)
        closest = np.minimum(closest, cdist(points, points[[index]], "sqeuclidean").ravel())
    return points[chosen].copy()


def _update(points: np.ndarray, labels: np.ndarray, distances: np.ndarray, K: int) -> np.ndarray:
    centroids = np.empty((K, points.shape[1]))
    counts = np.bincount(labels, minlength=K)
    taken = set()
    # Candidates for reseeding, farthest from their centroid first
    order = np.argsort(-distances, kind="stable")
    # Occupied clusters move to the mean of their members
    for k in range(K):
        if counts[k]:
            centroids[k] = points[labels == k].mean(axis=0)
            continue
        # Empty cluster: reseed from the farthest point not already used
        for candidate in order:
            if candidate not in taken:
                taken.add(int(candidate))
                centroids[k] = points[candidate]
                break
        logger.debug(f"Reseeded empty cluster {k}")
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iterations: int) -> KMeansModel:
    K = centroids.shape[0]
    labels, distances = _nearest(points, centroids)
    history = [float(distances.sum())]
    iterations = 0
    for _ in range(max_iterations):
        centroids = _update(points, labels, distances, K)
        new_labels, distances = _nearest(points, centroids)
        history.append(float(distances.sum()))
        iterations += 1
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansModel(centroids=centroids, inertia=history[-1], iterations_run=iterations, inertia_history=history)


def fit(
    points,
    K: int,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    max_iterations: int = MAX_ITERATIONS,
) -> KMeansModel:
    """
    Best-inertia K-means over `restarts` independent k-means++ initializations.

    Args:
        points: N x D feature vectors
        K: Number of clusters, 1 <= K <= N
        restarts: Independent initializations
        seed: Seeds every restart through a SeedSequence
        max_iterations: Lloyd iteration cap per restart

    Raises:
        KMeansError: If N < K or the inputs are malformed
    """
    points = _as_points(points)
    if K < 1:
        raise KMeansError(f"K must be >= 1, got {K}")
    if points.shape[0] < K:
        raise KMeansError(f"cannot fit {K} clusters to {points.shape[0]} points")
    if restarts < 1:
        raise KMeansError("restarts must be >= 1")

    best = None
    for restart, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(child)
        model = _lloyd(points, kmeans_plus_plus(points, K, rng), max_iterations)
        logger.debug(f"Restart {restart}: inertia {model.inertia:.6g} after {model.iterations_run} iterations")
        if best is None or model.inertia < best.inertia:
            best = model

    logger.info(f"K-means (K={K}, {restarts} restarts): best inertia {best.inertia:.6g}")
    return best


def predict(model: KMeansModel, points) -> np.ndarray:
    """
    Nearest-centroid ids, ties resolved to the lowest index.

    Raises:
        KMeansError: On a dimension mismatch
    """
    points = _as_points(points)
    if points.shape[1] != model.centroids.shape[1]:
        raise KMeansError(f"points have {points.shape[1]} dimensions, centroids have {model.centroids.shape[1]}")
    labels, _ = _nearest(points, model.centroids)
    return labels
