"""
clustering.py
Per-slide k-means over patch embeddings and cluster-wise mean aggregation into
a fixed-length slide feature; S1 and S2 features concatenate into S3.
"""
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from histoage.utils.errors import DataError
from histoage.utils.rng import derive_seed

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.9g"


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    history: list = field(default_factory=list)  # inertia after every assignment step


@dataclass
class SlideFeature:
    slide_id: str
    scale_tag: str
    vector: np.ndarray
    cluster_sizes: tuple
    padded: bool = False

    @property
    def blocks(self) -> int:
        return len(self.cluster_sizes)


# ---------------------- k-means ----------------------

def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest = _sq_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(0, n)
        centroids[i] = points[idx]
        closest = np.minimum(closest, _sq_distances(points, centroids[i:i + 1])[:, 0])
    return centroids


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations until assignments are stable; an empty cluster is re-seeded at the farthest point."""
    k = len(centroids)
    centroids = centroids.copy()
    labels = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = _sq_distances(points, centroids)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        point_cost = dist[np.arange(len(points)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(point_cost.argmax())
                centroids[j] = points[far]
                point_cost[far] = 0.0
    dist = _sq_distances(points, centroids)
    labels = dist.argmin(axis=1)
    inertia = float(dist[np.arange(len(points)), labels].sum())
    return KMeansResult(labels=labels, centroids=centroids, inertia=inertia, n_iter=n_iter, history=history)


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> KMeansResult:
    """Best-of-restarts Lloyd with k-means++ seeding."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if n < k:
        raise DataError(f"cannot form {k} clusters from {n} points")

    best = None
    for restart in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, "kmeans", restart))
        result = lloyd(points, kmeans_plusplus(points, k, rng), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def exhaustive_kmeans(points, k: int) -> tuple[float, np.ndarray]:
    """Optimal inertia by enumerating every labelling (tiny inputs only)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if n < k:
        raise DataError(f"cannot form {k} clusters from {n} points")
    if k ** n > 200_000:
        raise DataError(f"exhaustive search over {k}^{n} labellings is too large")
    best_inertia, best_labels = np.inf, None
    for labels in itertools.product(range(k), repeat=n):
        labels = np.asarray(labels)
        if len(np.unique(labels)) != k:
            continue
        inertia = 0.0
        for j in range(k):
            members = points[labels == j]
            inertia += float(((members - members.mean(axis=0)) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels
    return best_inertia, best_labels


def inertia_curve(points, ks=range(1, 7), seed: int = 0, restarts: int = 10) -> dict:
    """Elbow diagnostic: best inertia for each k that the point count allows."""
    points = np.asarray(points, dtype=np.float64)
    return {k: kmeans(points, k, seed=seed, restarts=restarts).inertia for k in ks if k <= len(points)}


def mean_inertia_curve(slides: dict, max_k: int = 6, seed: int = 0, restarts: int = 10) -> pd.DataFrame:
    """
    Mean best inertia per k over the slides that have at least K patches,
    K = min(max_k, largest patch count). slides maps slide_id -> embeddings.
    """
    counts = {sid: len(points) for sid, points in slides.items()}
    if not counts or max(counts.values()) == 0:
        return pd.DataFrame(columns=["k", "mean_inertia", "slides"])
    top_k = min(max_k, max(counts.values()))
    chosen = sorted(sid for sid, n in counts.items() if n >= top_k)
    ks = list(range(1, top_k + 1))
    curves = []
    for sid in chosen:
        points = np.asarray(slides[sid], dtype=np.float64)
        curves.append(inertia_curve(points[canonical_order(points)], ks, seed=derive_seed(seed, "elbow", sid), restarts=restarts))
    return pd.DataFrame({
        "k": ks,
        "mean_inertia": [float(np.mean([c[k] for c in curves])) for k in ks],
        "slides": len(chosen),
    })


# ---------------------- Slide features ----------------------

def canonical_order(points: np.ndarray) -> np.ndarray:
    """Row permutation that sorts points lexicographically (first column most significant)."""
    return np.lexsort(points.T[::-1])


def aggregate_slide(embeddings, labels, slide_id: str, scale_tag: str, k: int = 3) -> SlideFeature:
    """
    Mean of each cluster's embeddings; blocks ordered by descending size, then
    descending centroid norm. Missing clusters are padded with the slide mean.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(embeddings) == 0:
        raise DataError(f"slide {slide_id} has no patches to aggregate")
    blocks = []
    for j in np.unique(labels):
        members = embeddings[labels == j]
        mean = members.mean(axis=0)
        blocks.append((len(members), float(np.linalg.norm(mean)), mean))
    blocks.sort(key=lambda b: (-b[0], -b[1]))

    padded = len(blocks) < k
    if padded:
        slide_mean = embeddings.mean(axis=0)
        logger.warning(f"Slide {slide_id} ({scale_tag}) has {len(blocks)} non-empty clusters; padding with the slide mean")
        blocks.extend((0, float(np.linalg.norm(slide_mean)), slide_mean) for _ in range(k - len(blocks)))
    blocks = blocks[:k]
    return SlideFeature(
        slide_id=slide_id,
        scale_tag=scale_tag,
        vector=np.concatenate([b[2] for b in blocks]),
        cluster_sizes=tuple(int(b[0]) for b in blocks),
        padded=padded,
    )


def cluster_slide(embeddings, slide_id: str, scale_tag: str, seed: int = 0, k: int = 3,
                  restarts: int = 10, max_iter: int = 300) -> SlideFeature:
    """k-means then aggregation; independent of patch order."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    ordered = embeddings[canonical_order(embeddings)]
    if len(ordered) < k:
        labels = np.arange(len(ordered))
    else:
        labels = kmeans(ordered, k, seed=derive_seed(seed, slide_id, scale_tag), restarts=restarts, max_iter=max_iter).labels
    return aggregate_slide(ordered, labels, slide_id, scale_tag, k)


def combine_scales(f1: SlideFeature, f2: SlideFeature) -> SlideFeature:
    if f1.slide_id != f2.slide_id:
        raise DataError(f"cannot combine scales of different slides: {f1.slide_id} vs {f2.slide_id}")
    return SlideFeature(
        slide_id=f1.slide_id,
        scale_tag="S3",
        vector=np.concatenate([f1.vector, f2.vector]),
        cluster_sizes=tuple(f1.cluster_sizes) + tuple(f2.cluster_sizes),
        padded=f1.padded or f2.padded,
    )


def combine_all(features_s1: list, features_s2: list) -> list:
    by_slide = {f.slide_id: f for f in features_s2}
    combined = []
    for f1 in features_s1:
        f2 = by_slide.pop(f1.slide_id, None)
        if f2 is None:
            logger.warning(f"Slide {f1.slide_id} excluded from S3: no S2 feature")
            continue
        combined.append(combine_scales(f1, f2))
    for slide_id in sorted(by_slide):
        logger.warning(f"Slide {slide_id} excluded from S3: no S1 feature")
    return combined


# ---------------------- I/O ----------------------

def features_frame(features: list) -> pd.DataFrame:
    if not features:
        return pd.DataFrame(columns=["slide_id", "scale_tag", "cluster_sizes", "padded"])
    width = len(features[0].vector)
    matrix = np.stack([f.vector for f in features])
    frame = pd.DataFrame(matrix, columns=[f"g{i}" for i in range(width)])
    frame.insert(0, "padded", [int(f.padded) for f in features])
    frame.insert(0, "cluster_sizes", ["|".join(str(s) for s in f.cluster_sizes) for f in features])
    frame.insert(0, "scale_tag", [f.scale_tag for f in features])
    frame.insert(0, "slide_id", [f.slide_id for f in features])
    return frame


def write_features(path, features: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features_frame(features).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_features(path) -> list:
    frame = pd.read_csv(path, dtype={"slide_id": str, "cluster_sizes": str})
    vector_cols = [c for c in frame.columns if c.startswith("g") and c[1:].isdigit()]
    features = []
    for row, vector in zip(frame.itertuples(index=False), frame[vector_cols].to_numpy(np.float64)):
        features.append(SlideFeature(
            slide_id=row.slide_id,
            scale_tag=row.scale_tag,
            vector=vector,
            cluster_sizes=tuple(int(s) for s in str(row.cluster_sizes).split("|")),
            padded=bool(row.padded),
        ))
    return features
