"""Spectral-clustering classifier for repeatedly heated oil.

Pixels projected into discriminant space are linked by a Gaussian-kernel
affinity graph. The kernel width is picked by sweeping sigma for the widest
eigengap of the normalized Laplacian; near-zero eigenvalues give the number
of qualitative classes, and K-means on the Laplacian eigenvectors gives the
clusters. Qualitative classes are distance bands around the pure-oil cluster.
"""
from __future__ import annotations

import bisect
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist

from .cube import _atomic_write
from .fda import FdaModel, fda_from_lines, fda_to_lines, project

COMPONENT_THRESHOLD = 0.025
DEFAULT_GRID_SIZE = 60
DEFAULT_GRID_DECADES = 2.0
KMEANS_RESTARTS = 20
KMEANS_MAX_ITER = 300


class GraphError(ValueError):
    pass


def _sq_distances(points: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", points, points)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return 0.5 * (d2 + d2.T)


def affinity(points: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-kernel affinity ``exp(-|xi - xj|^2 / 2 sigma^2)`` with a zero diagonal."""
    if not sigma > 0:
        raise GraphError("sigma must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 2:
        raise GraphError("need at least two points")
    W = np.exp(-_sq_distances(points) / (2.0 * sigma * sigma))
    np.fill_diagonal(W, 0.0)
    return W


def laplacian(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized Laplacian ``I - D^-1/2 W D^-1/2`` and the degree vector."""
    degree = W.sum(axis=1)
    if np.any(degree <= 0):
        raise GraphError("isolated vertex (zero degree)")
    s = 1.0 / np.sqrt(degree)
    L = -(s[:, None] * W * s[None, :])
    L[np.diag_indices_from(L)] += 1.0
    return 0.5 * (L + L.T), degree


def laplacian_spectrum(points: np.ndarray, sigma: float, count: Optional[int] = None) -> np.ndarray:
    """Ascending Laplacian eigenvalues (only the ``count`` smallest if given)."""
    L, _ = laplacian(affinity(points, sigma))
    if count is None or count >= L.shape[0]:
        return linalg.eigh(L, eigvals_only=True)
    return linalg.eigh(L, eigvals_only=True, subset_by_index=[0, count - 1])


def default_sigma_grid(
    points: np.ndarray, size: int = DEFAULT_GRID_SIZE, decades: float = DEFAULT_GRID_DECADES
) -> np.ndarray:
    """Log-spaced sigmas spanning ``median pairwise distance * 10**(+-decades)``."""
    d = float(np.median(pdist(np.asarray(points, dtype=float))))
    if not d > 0:
        raise GraphError("degenerate grid: all points coincide")
    return d * np.logspace(-decades, decades, size)


@dataclass(frozen=True, eq=False)
class SweepResult:
    sigma_opt: float
    sigmas: np.ndarray
    gaps: np.ndarray  # NaN where the graph had an isolated vertex


def eigengap(eigenvalues: np.ndarray, n_target: int) -> float:
    """Gap between the ``n_target``-th and the next smallest eigenvalue."""
    return float(eigenvalues[n_target] - eigenvalues[n_target - 1])


def sigma_sweep(
    points: np.ndarray, n_target: int = 6, grid: Optional[Sequence[float]] = None
) -> SweepResult:
    """Pick the kernel width with the widest eigengap after ``n_target`` eigenvalues."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if n_target < 1 or points.shape[0] <= n_target:
        raise GraphError(f"need more than n_target={n_target} points")
    sigmas = default_sigma_grid(points) if grid is None else np.asarray(grid, dtype=float)
    if sigmas.size == 0 or np.any(~(sigmas > 0)):
        raise GraphError("degenerate grid")
    gaps = np.full(sigmas.shape, np.nan)
    for i, s in enumerate(sigmas):
        try:
            ev = laplacian_spectrum(points, s, n_target + 1)
        except GraphError:
            continue
        except linalg.LinAlgError as exc:
            raise GraphError(f"eigensolve failed at sigma={s}") from exc
        gaps[i] = eigengap(ev, n_target)
    if np.all(np.isnan(gaps)):
        raise GraphError("no sigma in the grid yields a connected affinity graph")
    best = int(np.nanargmax(gaps))
    return SweepResult(float(sigmas[best]), sigmas, gaps)


def count_components(eigenvalues: Sequence[float], threshold: float = COMPONENT_THRESHOLD) -> int:
    ev = np.asarray(eigenvalues, dtype=float)
    n = int(np.count_nonzero(ev < threshold))
    if ev.size and n == 0:
        warnings.warn("smallest Laplacian eigenvalue above threshold; spectrum looks anomalous")
    return n


# --- clustering --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    converged: bool


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int):
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        counts = np.bincount(new, minlength=centers.shape[0])
        if np.any(counts == 0):
            return None
        if labels is not None and np.array_equal(new, labels):
            return labels, centers, float(d2[np.arange(len(X)), labels].sum()), True
        labels = new
        centers = np.stack([X[labels == c].mean(axis=0) for c in range(centers.shape[0])])
    d2 = ((X - centers[labels]) ** 2).sum()
    return labels, centers, float(d2), False


def _plusplus_start(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    m = X.shape[0]
    idx = [int(rng.integers(m))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=d2 / total))
        else:
            nxt = int(rng.integers(m))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx].copy()


def kmeans(
    X: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    n_init: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
) -> KMeansResult:
    """Lloyd's algorithm from ``n_init`` seeded random starts; lowest inertia wins.

    Starts are drawn by D^2 weighting (k-means++). A start that empties a
    cluster is redrawn.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = X.shape[0]
    if not 1 <= n_clusters <= m:
        raise ValueError(f"n_clusters must be in 1..{m}")
    rng = np.random.default_rng(seed)
    best: Optional[KMeansResult] = None
    for _ in range(n_init):
        for _attempt in range(50):
            out = _lloyd(X, _plusplus_start(X, n_clusters, rng), max_iter)
            if out is not None:
                break
        else:
            continue
        res = KMeansResult(*out)
        if best is None or res.inertia < best.inertia:
            best = res
    if best is None:
        raise ValueError("k-means kept producing empty clusters")
    if not best.converged:
        warnings.warn(f"k-means did not converge in {max_iter} iterations")
    return best


@dataclass(frozen=True, eq=False)
class SpectralClustering:
    labels: np.ndarray
    centers: np.ndarray  # per-cluster means of the input points
    embedding: np.ndarray
    eigenvalues: np.ndarray


def spectral_embed_cluster(
    points: np.ndarray,
    sigma: float,
    n_clusters: int,
    seed: int = 0,
    normalize_rows: bool = False,
) -> SpectralClustering:
    """K-means on the eigenvectors of the ``n_clusters`` smallest Laplacian eigenvalues."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = points.shape[0]
    if not 1 <= n_clusters <= m:
        raise ValueError(f"n_clusters must be in 1..{m}")
    if m == 1 or n_clusters == 1:
        labels = np.zeros(m, dtype=np.intp)
        return SpectralClustering(labels, points.mean(axis=0, keepdims=True), np.ones((m, 1)), np.zeros(1))
    L, _ = laplacian(affinity(points, sigma))
    evals, U = linalg.eigh(L, subset_by_index=[0, n_clusters - 1])
    if normalize_rows:
        norms = np.linalg.norm(U, axis=1, keepdims=True)
        U = U / np.where(norms > 0, norms, 1.0)
    km = kmeans(U, n_clusters, seed)
    centers = np.stack([points[km.labels == c].mean(axis=0) for c in range(n_clusters)])
    return SpectralClustering(km.labels, centers, U, evals)


# --- classifier --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReheatClassifier:
    fda: FdaModel
    sigma_opt: float
    n_qualitative: int
    cluster_centers: np.ndarray  # row i is the center of qualitative class i
    reference_center: np.ndarray
    class_ranges: tuple[tuple[float, float], ...]
    seed: int
    heat_to_qualitative: dict[int, int] = field(default_factory=dict)
    sweep: Optional[SweepResult] = None
    eigenvalues: Optional[np.ndarray] = None

    @property
    def thresholds(self) -> list[float]:
        return [hi for _, hi in self.class_ranges[:-1]]

    def qualitative_class(self, distance: float) -> int:
        # a distance on a boundary belongs to the lower class
        return bisect.bisect_left(self.thresholds, distance)


def distance_ranges(distances: Sequence[float]) -> tuple[tuple[float, float], ...]:
    """Split ``[0, inf)`` at midpoints between consecutive sorted distances."""
    d = np.sort(np.asarray(distances, dtype=float))
    cuts = [0.0, *((d[:-1] + d[1:]) / 2.0).tolist(), float("inf")]
    return tuple((cuts[i], cuts[i + 1]) for i in range(len(d)))


def _heat_value(label) -> int:
    return int(getattr(label, "value", label))


def train_classifier(
    training: Sequence[tuple[int, np.ndarray]],
    fda: FdaModel,
    seed: int = 0,
    grid: Optional[Sequence[float]] = None,
    threshold: float = COMPONENT_THRESHOLD,
    normalize_rows: bool = False,
) -> ReheatClassifier:
    """Build the qualitative classifier from projected heat-class blocks."""
    heat = np.concatenate([np.full(len(b), _heat_value(h)) for h, b in training])
    points = np.vstack([np.atleast_2d(b) for _, b in training])
    classes = sorted(set(heat.tolist()))
    if 0 not in classes:
        raise GraphError("training data lacks the pure-oil (0 heat cycles) class")
    if len(classes) < 2:
        raise GraphError("need the pure class and at least one heated class")

    sweep = sigma_sweep(points, n_target=len(classes), grid=grid)
    evals = laplacian_spectrum(points, sweep.sigma_opt)
    n_q = count_components(evals, threshold)
    if n_q < 2:
        raise GraphError(f"only {n_q} connected component(s) below threshold {threshold}")

    clus = spectral_embed_cluster(points, sweep.sigma_opt, n_q, seed, normalize_rows)
    ref = int(np.bincount(clus.labels[heat == 0], minlength=n_q).argmax())
    dist = np.linalg.norm(clus.centers - clus.centers[ref], axis=1)
    order = np.argsort(dist, kind="stable")
    rank = np.empty(n_q, dtype=int)
    rank[order] = np.arange(n_q)

    heat_to_q = {}
    for h in classes:
        heat_to_q[int(h)] = int(np.bincount(rank[clus.labels[heat == h]], minlength=n_q).argmax())
    return ReheatClassifier(
        fda=fda,
        sigma_opt=sweep.sigma_opt,
        n_qualitative=n_q,
        cluster_centers=clus.centers[order],
        reference_center=clus.centers[ref],
        class_ranges=distance_ranges(dist),
        seed=seed,
        heat_to_qualitative=heat_to_q,
        sweep=sweep,
        eigenvalues=evals,
    )


def classify(sample_pixels: np.ndarray, classifier: ReheatClassifier) -> tuple[int, float]:
    """Qualitative class of a sample from the distance of its pixel mean to the reference."""
    center = project(np.atleast_2d(sample_pixels), classifier.fda).mean(axis=0)
    d = float(np.linalg.norm(center - classifier.reference_center))
    return classifier.qualitative_class(d), d


# --- evaluation --------------------------------------------------------------


def matched_accuracy(true: Sequence[int], predicted: Sequence[int]) -> float:
    """Accuracy after the best one-to-one matching of cluster ids to classes."""
    true = np.asarray(true)
    predicted = np.asarray(predicted)
    t_ids, t = np.unique(true, return_inverse=True)
    p_ids, p = np.unique(predicted, return_inverse=True)
    confusion = np.zeros((len(p_ids), len(t_ids)), dtype=int)
    np.add.at(confusion, (p, t), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum()) / len(true)


def heat_class_accuracy(
    points: np.ndarray, heat: Sequence[int], sigma: float, seed: int = 0
) -> float:
    """Cluster projected pixels into as many groups as heat classes and score them."""
    heat = np.asarray(heat)
    clus = spectral_embed_cluster(points, sigma, len(np.unique(heat)), seed)
    return matched_accuracy(heat, clus.labels)


def qualitative_accuracy(
    points: np.ndarray, heat: Sequence[int], classifier: ReheatClassifier, seed: int = 0
) -> float:
    """Cluster projected pixels, place each cluster by distance band, compare with
    the umbrella class each heat class fell into during training."""
    heat = np.asarray(heat)
    clus = spectral_embed_cluster(points, classifier.sigma_opt, len(np.unique(heat)), seed)
    dist = np.linalg.norm(clus.centers - classifier.reference_center, axis=1)
    q_of_cluster = np.array([classifier.qualitative_class(d) for d in dist])
    expected = np.array([classifier.heat_to_qualitative.get(int(h), -1) for h in heat])
    return float(np.mean(q_of_cluster[clus.labels] == expected))


def accuracy_mode(accuracies: Sequence[float], decimals: int = 3) -> float:
    """Most frequent accuracy after rounding; ties resolve to the lower value."""
    counts = Counter(round(float(a), decimals) for a in accuracies)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


@dataclass(frozen=True)
class RepeatabilityReport:
    counts: dict[int, int]
    resc: float
    mode_accuracy: Optional[float] = None
    min_accuracy: Optional[float] = None
    max_accuracy: Optional[float] = None


def repeatability(
    assignments: Sequence[int], accuracies: Optional[Sequence[float]] = None
) -> RepeatabilityReport:
    """Repeatability score ``1 - LS/MS`` over repeated classifications.

    LS and MS are the smallest and largest assignment counts among classes
    that were assigned at least once; a single observed class scores 1.
    """
    if len(assignments) == 0:
        raise ValueError("no trials")
    counts = dict(sorted(Counter(int(a) for a in assignments).items()))
    ms = max(counts.values())
    ls = min(counts.values()) if len(counts) > 1 else 0
    stats = {}
    if accuracies is not None and len(accuracies):
        stats = dict(
            mode_accuracy=accuracy_mode(accuracies),
            min_accuracy=float(min(accuracies)),
            max_accuracy=float(max(accuracies)),
        )
    return RepeatabilityReport(counts, 1.0 - ls / ms, **stats)


# --- persistence -------------------------------------------------------------


def classifier_to_dict(c: ReheatClassifier) -> dict:
    d = {
        "format": "oilmsi-reheat-classifier",
        "sigma_opt": c.sigma_opt,
        "n_qualitative": c.n_qualitative,
        "cluster_centers": c.cluster_centers.tolist(),
        "reference_center": c.reference_center.tolist(),
        "class_ranges": [[lo, hi if np.isfinite(hi) else "inf"] for lo, hi in c.class_ranges],
        "seed": c.seed,
        "heat_to_qualitative": {str(k): v for k, v in c.heat_to_qualitative.items()},
        "fda": fda_to_lines(c.fda),
    }
    return d


def classifier_from_dict(d: dict) -> ReheatClassifier:
    try:
        return ReheatClassifier(
            fda=fda_from_lines(d["fda"]),
            sigma_opt=float(d["sigma_opt"]),
            n_qualitative=int(d["n_qualitative"]),
            cluster_centers=np.array(d["cluster_centers"], dtype=float),
            reference_center=np.array(d["reference_center"], dtype=float),
            class_ranges=tuple((float(lo), float(hi)) for lo, hi in d["class_ranges"]),
            seed=int(d["seed"]),
            heat_to_qualitative={int(k): int(v) for k, v in d.get("heat_to_qualitative", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed classifier ({exc})") from exc


def save_classifier(c: ReheatClassifier, path) -> None:
    _atomic_write(Path(path), json.dumps(classifier_to_dict(c), indent=1) + "\n")


def load_classifier(path) -> ReheatClassifier:
    try:
        return classifier_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: malformed classifier file") from exc
