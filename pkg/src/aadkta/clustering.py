"""K-means grouping of students by ability, with frozen centroids and per-segment assignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ability import AbilityTimeline, AbilityVector


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (K_clusters, |K|)
    K_clusters: int
    fit_inertia: float
    seed: int
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.array(self.centroids, dtype=float)
        self.centroids.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "K_clusters": self.K_clusters,
            "seed": self.seed,
            "inertia": self.fit_inertia,
            "n_iter": self.n_iter,
            "centroids": self.centroids.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterModel":
        return cls(np.array(obj["centroids"], dtype=float), int(obj["K_clusters"]),
                   float(obj["inertia"]), int(obj["seed"]), int(obj.get("n_iter", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ClusterModel":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class AssignmentTrace:
    student_id: str
    per_segment_cluster: list[int]


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_distances(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # remaining points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_distances(X, X[idx][None])[:, 0])
    return np.array(centers, dtype=float)


def _inertia(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> float:
    d = X - C[labels]
    return float(np.einsum("ij,ij->", d, d))


def kmeans_fit(vectors: Sequence[AbilityVector] | np.ndarray, K_clusters: int = 10, seed: int = 0,
               max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    """Lloyd's algorithm from a k-means++ start.

    Centroids whose cluster empties are moved to the point farthest from its
    assigned centroid. ``inertia_history`` holds the objective after every
    assignment step and is non-increasing.
    """
    X = np.asarray([v.values if isinstance(v, AbilityVector) else v for v in vectors], dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ClusteringError("kmeans_fit needs a nonempty list of equal-length vectors")
    if K_clusters < 1:
        raise ClusteringError("K_clusters must be positive")
    if len(np.unique(X, axis=0)) < K_clusters:
        raise ClusteringError(f"insufficient distinct points for {K_clusters} clusters")

    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, K_clusters, rng)
    labels = assign_many(X, C)
    history = [_inertia(X, C, labels)]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_C = C.copy()
        for k in range(K_clusters):
            members = labels == k
            if members.any():
                new_C[k] = X[members].mean(axis=0)
        empty = [k for k in range(K_clusters) if not (labels == k).any()]
        if empty:
            taken: set[int] = set()
            for k in empty:
                far = np.sum((X - new_C[labels]) ** 2, axis=1)
                far[list(taken)] = -1.0
                idx = int(np.argmax(far))
                taken.add(idx)
                new_C[k] = X[idx]
                labels = labels.copy()
                labels[idx] = k
        shift = float(np.sqrt(np.sum((new_C - C) ** 2, axis=1)).max())
        C = new_C
        labels = assign_many(X, C)
        history.append(_inertia(X, C, labels))
        if shift < tol:
            break
    return ClusterModel(C, K_clusters, history[-1], seed, n_iter, history)


def assign_many(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum: ties go to the lowest centroid index
    return np.argmin(_sq_distances(np.atleast_2d(X), centroids), axis=1)


def assign_cluster(cumulative_ability: AbilityVector | np.ndarray, model: ClusterModel) -> int:
    x = cumulative_ability.values if isinstance(cumulative_ability, AbilityVector) else np.asarray(cumulative_ability)
    if x.shape != (model.dim,):
        raise ClusteringError(f"ability dimension {x.shape} does not match centroid dimension {model.dim}")
    return int(assign_many(x[None], model.centroids)[0])


def build_assignment_trace(timeline: AbilityTimeline, model: ClusterModel,
                           cumulative: bool = True) -> AssignmentTrace:
    """Cluster for each segment from the ability of the segments before it.

    With ``cumulative=False`` only the immediately preceding segment's
    ability vector is used. The first segment is assigned from the zero vector.
    """
    previous = np.zeros(model.dim)
    clusters = []
    for vec in (timeline.cumulative if cumulative else timeline.per_segment):
        clusters.append(assign_cluster(previous, model))
        previous = vec.values
    return AssignmentTrace(timeline.student_id, clusters)
