"""
Clustering Module for the clustered NOMA federated learning simulator

Groups users by their estimated concentration vectors with unnormalized
spectral clustering: Gaussian similarity graph, Laplacian, smallest
eigenvectors, eigengap selection of the cluster count and k-means on the
row-normalized embedding.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import linalg
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import comb

from config import Config
from dirichlet_data import ConcentrationVector
from utils import is_positive_number


class ClusteringError(ValueError):
    """Exception raised for invalid clustering inputs."""
    pass


class InvariantViolationError(ClusteringError):
    """Exception raised when a graph or embedding breaks its structural invariants."""
    pass


PointInput = Union[Sequence[ConcentrationVector], Sequence[Sequence[float]], np.ndarray]


@dataclass
class SimilarityGraph:
    """Weighted undirected graph over users."""

    weights: np.ndarray
    degrees: np.ndarray
    laplacian: np.ndarray

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> 'SimilarityGraph':
        weights = np.asarray(weights, dtype=float)
        graph = cls(weights=weights, degrees=weights.sum(axis=1), laplacian=np.diag(weights.sum(axis=1)) - weights)
        graph.validate()
        return graph

    @property
    def num_nodes(self) -> int:
        return int(self.weights.shape[0])

    def validate(self) -> None:
        """
        Raises:
            InvariantViolationError: If W is not square, symmetric, non-negative
                with zero diagonal
        """
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvariantViolationError(f"Weight matrix must be square, got {w.shape}")
        if not np.allclose(w, w.T, rtol=0.0, atol=1e-12):
            raise InvariantViolationError("Weight matrix is not symmetric")
        if np.any(w < 0):
            raise InvariantViolationError("Weight matrix has negative entries")
        if np.any(np.diag(w) != 0):
            raise InvariantViolationError("Weight matrix has a non-zero diagonal")


@dataclass
class SpectralEmbedding:
    """Eigenvectors of the Z smallest Laplacian eigenvalues, as columns."""

    vectors: np.ndarray
    eigenvalues: np.ndarray

    @property
    def num_vectors(self) -> int:
        return int(self.vectors.shape[1])

    def check_orthonormal(self, tol: float = 1e-8) -> None:
        gram = self.vectors.T @ self.vectors
        if not np.allclose(gram, np.eye(gram.shape[0]), rtol=0.0, atol=tol):
            raise InvariantViolationError("Embedding columns are not orthonormal")


@dataclass
class ClusterAssignment:
    """
    Cluster label (1..Z) of every user.

    method records how Z was chosen: 'eigengap', 'silhouette', 'override'
    or 'degenerate' (all points identical).
    """

    labels: np.ndarray
    num_clusters: int
    degenerate: bool = False
    method: str = 'eigengap'
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def members(self, cluster_id: int) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.labels == cluster_id)]


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss: float


def _as_matrix(points: PointInput) -> np.ndarray:
    if isinstance(points, np.ndarray):
        matrix = points.astype(float)
    else:
        rows = [p.alpha if isinstance(p, ConcentrationVector) else np.asarray(p, dtype=float) for p in points]
        if len({row.shape for row in rows}) > 1:
            raise ClusteringError("All points must have the same dimension")
        matrix = np.vstack(rows) if rows else np.zeros((0, 0))
    if matrix.ndim != 2:
        raise ClusteringError("Points must form a 2-D array")
    if matrix.shape[0] < 2:
        raise ClusteringError("At least two points are required")
    return matrix


def median_bandwidth(points: PointInput) -> float:
    """Median pairwise distance; 1.0 when every point coincides."""
    distances = pdist(_as_matrix(points))
    median = float(np.median(distances))
    return median if median > 0 else 1.0


def knn_bandwidth(points: PointInput, k: Optional[int] = None) -> float:
    """
    Median distance from each point to its k-th nearest neighbour.

    k defaults to ceil(ln n). Falls back to the median pairwise distance
    when the neighbourhoods collapse to zero.
    """
    matrix = _as_matrix(points)
    n = matrix.shape[0]
    if k is None:
        k = int(math.ceil(math.log(n)))
    k = max(1, min(int(k), n - 1))
    distances = np.sort(squareform(pdist(matrix)), axis=1)
    value = float(np.median(distances[:, k]))
    return value if value > 0 else median_bandwidth(matrix)


def build_similarity(points: PointInput, bandwidth: float) -> SimilarityGraph:
    """
    Gaussian-kernel similarity graph.

    w_ij = exp(-||x_i - x_j||^2 / (2 * bandwidth^2)) for i != j, w_ii = 0.

    Raises:
        ClusteringError: If fewer than two points, mismatched dimensions or a
            non-positive bandwidth are given
    """
    if not is_positive_number(bandwidth):
        raise ClusteringError(f"Bandwidth must be positive, got {bandwidth}")
    matrix = _as_matrix(points)
    squared = squareform(pdist(matrix, metric='sqeuclidean'))
    with np.errstate(over='ignore', under='ignore'):
        weights = np.exp(-squared / (2.0 * bandwidth ** 2))
    np.fill_diagonal(weights, 0.0)
    return SimilarityGraph.from_weights(weights)


def graph_laplacian(graph: SimilarityGraph) -> np.ndarray:
    """Unnormalized Laplacian L = D - W."""
    graph.validate()
    return np.diag(graph.weights.sum(axis=1)) - graph.weights


def laplacian_spectrum(laplacian: np.ndarray) -> np.ndarray:
    """All eigenvalues of a symmetric Laplacian, ascending."""
    symmetric = 0.5 * (laplacian + laplacian.T)
    return linalg.eigh(symmetric, eigvals_only=True)


def smallest_eigenpairs(laplacian: np.ndarray, num_vectors: int) -> SpectralEmbedding:
    """
    Eigenvectors of the num_vectors smallest eigenvalues of a symmetric PSD matrix.

    Raises:
        ClusteringError: If num_vectors is outside [1, n]
    """
    n = laplacian.shape[0]
    if not 1 <= num_vectors <= n:
        raise ClusteringError(f"Cannot take {num_vectors} eigenvectors of a {n}x{n} matrix")
    symmetric = 0.5 * (laplacian + laplacian.T)
    values, vectors = linalg.eigh(symmetric, subset_by_index=[0, num_vectors - 1])
    return SpectralEmbedding(vectors=vectors, eigenvalues=values)


def _check_window(num_eigenvalues: int, z_min: int, z_max: int) -> None:
    if not 1 <= z_min <= z_max < num_eigenvalues:
        raise ClusteringError(f"Cluster window [{z_min}, {z_max}] invalid for {num_eigenvalues} eigenvalues")


def _gaps(eigenvalues: np.ndarray, z_min: int, z_max: int) -> np.ndarray:
    # gap_z = lambda_{z+1} - lambda_z with 1-based z
    return np.array([eigenvalues[z] - eigenvalues[z - 1] for z in range(z_min, z_max + 1)])


def select_num_clusters(eigenvalues: Sequence[float], z_min: int, z_max: int) -> int:
    """
    Eigengap rule: Z maximizing lambda_{Z+1} - lambda_Z over [z_min, z_max].

    Ties go to the smaller Z.
    """
    values = np.asarray(eigenvalues, dtype=float)
    _check_window(values.size, z_min, z_max)
    if np.any(np.diff(values) < -1e-12):
        raise ClusteringError("Eigenvalues must be sorted ascending")
    return int(z_min + np.argmax(_gaps(values, z_min, z_max)))


def eigengap_is_ambiguous(eigenvalues: Sequence[float], z_min: int, z_max: int,
                          ratio: float = Config.EIGENGAP_AMBIGUITY_RATIO) -> bool:
    """True when the runner-up gap reaches ratio times the largest gap."""
    values = np.asarray(eigenvalues, dtype=float)
    _check_window(values.size, z_min, z_max)
    gaps = np.sort(_gaps(values, z_min, z_max))[::-1]
    if gaps.size < 2:
        return False
    return bool(gaps[0] <= 0 or gaps[1] >= ratio * gaps[0])


def ratiocut_objective(graph: SimilarityGraph, embedding: SpectralEmbedding) -> float:
    """
    Relaxed RatioCut value C_s * sum_z sum_{i != j} w_ij (a_zi - a_zj)^2, C_s = 1 / (2n(n-1)).

    Raises:
        InvariantViolationError: If the embedding is not orthonormal
    """
    embedding.check_orthonormal()
    n = graph.num_nodes
    scale = 1.0 / (2.0 * n * (n - 1))
    total = 0.0
    for column in embedding.vectors.T:
        differences = column[:, np.newaxis] - column[np.newaxis, :]
        total += float(np.sum(graph.weights * differences ** 2))
    return scale * total


def ratiocut_quadratic_form(graph: SimilarityGraph, embedding: SpectralEmbedding) -> float:
    """Same value through 2 * C_s * sum_z a_z^T L a_z."""
    embedding.check_orthonormal()
    n = graph.num_nodes
    laplacian = graph_laplacian(graph)
    quad = sum(float(a @ laplacian @ a) for a in embedding.vectors.T)
    return 2.0 * quad / (2.0 * n * (n - 1))


def kmeans(points: np.ndarray, num_clusters: int, rng_seed,
           restarts: int = Config.DEFAULT_KMEANS_RESTARTS,
           max_iters: int = Config.DEFAULT_KMEANS_MAX_ITERS) -> KMeansResult:
    """
    Best-of-restarts k-means with k-means++ seeding.

    Restart r draws from the r-th child of the seed sequence, so raising the
    restart count only adds candidates. Runs leaving a cluster empty lose to
    runs that fill every cluster; among the rest the lowest WCSS wins and
    ties keep the earlier restart.
    """
    data = np.asarray(points, dtype=float)
    if data.ndim == 1:
        data = data[:, np.newaxis]
    if not 1 <= num_clusters <= data.shape[0]:
        raise ClusteringError(f"Cannot form {num_clusters} clusters from {data.shape[0]} points")
    if restarts < 1:
        raise ClusteringError("At least one k-means restart is required")

    children = np.random.SeedSequence(rng_seed).spawn(restarts)
    best_key, best = None, None
    for child in children:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            centroids, labels = kmeans2(data, num_clusters, iter=max_iters, minit='++',
                                        seed=np.random.default_rng(child), missing='warn')
        wcss = float(np.sum((data - centroids[labels]) ** 2))
        empty = num_clusters - np.unique(labels).size
        key = (empty, wcss)
        if best_key is None or key < best_key:
            best_key, best = key, KMeansResult(labels=labels, centroids=centroids, wcss=wcss)
    return best


def silhouette_score(points: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette coefficient; 0 for a single cluster, 0 for singleton members."""
    data = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        return 0.0
    distances = cdist(data, data)
    scores = np.zeros(len(labels))
    for i, label in enumerate(labels):
        own = labels == label
        if own.sum() <= 1:
            continue
        a = distances[i, own].sum() / (own.sum() - 1)
        b = min(distances[i, labels == other].mean() for other in clusters if other != label)
        denominator = max(a, b)
        scores[i] = 0.0 if denominator == 0 else (b - a) / denominator
    return float(scores.mean())


def _normalized_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    zero = norms[:, 0] < 1e-300
    if np.any(zero):
        logging.warning(f"{int(zero.sum())} embedding rows are zero and stay unnormalized")
    norms[zero] = 1.0
    return vectors / norms


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Map labels to 1..Z in order of first appearance."""
    mapping = {}
    for label in labels:
        if label not in mapping:
            mapping[label] = len(mapping) + 1
    return np.array([mapping[label] for label in labels], dtype=np.int64)


def _cluster_embedding(vectors: np.ndarray, num_clusters: int, rng_seed, restarts: int) -> np.ndarray:
    if num_clusters == 1:
        return np.ones(vectors.shape[0], dtype=np.int64)
    rows = _normalized_rows(vectors[:, :num_clusters])
    result = kmeans(rows, num_clusters, rng_seed, restarts=restarts)
    return _relabel(result.labels)


def spectral_cluster(points: PointInput, bandwidth: Optional[float] = None,
                     z_override: Optional[int] = None, rng_seed: int = Config.DEFAULT_SEED,
                     z_min: int = Config.DEFAULT_Z_MIN, z_max: int = Config.DEFAULT_Z_MAX,
                     restarts: int = Config.DEFAULT_KMEANS_RESTARTS,
                     bandwidth_rule: str = 'knn') -> ClusterAssignment:
    """
    Cluster users from their concentration vectors.

    Builds the similarity graph and its Laplacian, picks Z by the eigengap
    (falling back to the best silhouette over the window when the top two
    gaps are within 10%), row-normalizes the first Z eigenvectors and runs
    k-means on the rows.

    Args:
        points: One vector per user
        bandwidth: Kernel width; derived from bandwidth_rule when None
        z_override: Fixed cluster count, bypassing the eigengap
        rng_seed: Seed of the k-means restarts
        z_min, z_max: Eigengap search window (clipped to n - 1)
        restarts: k-means restarts
        bandwidth_rule: 'knn' (median k-th neighbour distance) or 'median'
            (median pairwise distance)

    Returns:
        ClusterAssignment with labels in 1..Z

    Raises:
        ClusteringError: On invalid points, bandwidth or override
    """
    matrix = _as_matrix(points)
    n = matrix.shape[0]

    if np.max(pdist(matrix)) == 0.0:
        logging.warning("All concentration vectors coincide; returning a single cluster")
        return ClusterAssignment(labels=np.ones(n, dtype=np.int64), num_clusters=1,
                                 degenerate=True, method='degenerate')

    if bandwidth is None:
        if bandwidth_rule == 'median':
            bandwidth = median_bandwidth(matrix)
        elif bandwidth_rule == 'knn':
            bandwidth = knn_bandwidth(matrix)
        else:
            raise ClusteringError(f"Unknown bandwidth rule: {bandwidth_rule}")

    graph = build_similarity(matrix, bandwidth)
    laplacian = graph_laplacian(graph)
    eigenvalues, eigenvectors = linalg.eigh(0.5 * (laplacian + laplacian.T))

    if z_override is not None:
        if not 1 <= int(z_override) <= n:
            raise ClusteringError(f"z_override must lie in [1, {n}]")
        num_clusters, method = int(z_override), 'override'
    else:
        hi = min(z_max, n - 1)
        lo = min(z_min, hi)
        num_clusters, method = select_num_clusters(eigenvalues, lo, hi), 'eigengap'
        if eigengap_is_ambiguous(eigenvalues, lo, hi):
            scores = {}
            for z in range(max(lo, 2), hi + 1):
                labels = _cluster_embedding(eigenvectors, z, rng_seed, restarts)
                scores[z] = silhouette_score(_normalized_rows(eigenvectors[:, :z]), labels)
            if scores:
                num_clusters = max(scores, key=lambda z: (scores[z], -z))
                method = 'silhouette'
                logging.info(f"Eigengap ambiguous; silhouette picked Z={num_clusters}")

    labels = _cluster_embedding(eigenvectors, num_clusters, rng_seed, restarts)
    found = int(labels.max())
    if found < num_clusters:
        logging.warning(f"k-means filled only {found} of {num_clusters} clusters")
    logging.info(f"Spectral clustering: {n} users into {found} clusters ({method}, bandwidth={bandwidth:.4g})")
    return ClusterAssignment(labels=labels, num_clusters=found, method=method, eigenvalues=eigenvalues)


def random_cluster_assignment(num_users: int, num_clusters: int, rng_seed) -> ClusterAssignment:
    """Balanced random assignment used by the random-clusters baseline."""
    if not 1 <= num_clusters <= num_users:
        raise ClusteringError(f"Cannot spread {num_users} users over {num_clusters} clusters")
    rng = np.random.default_rng(rng_seed)
    labels = rng.permutation(np.arange(num_users) % num_clusters) + 1
    return ClusterAssignment(labels=labels.astype(np.int64), num_clusters=num_clusters, method='random')


def excess_risk_bound(num_clusters: int, num_users: int, kappa_s: float = Config.DEFAULT_KAPPA_S,
                      delta: float = Config.DEFAULT_DELTA) -> float:
    """
    Excess-risk bound of spectral clustering, 2 Z sqrt(2) kappa_s sqrt(log(2/delta)) / sqrt(n).

    Raises:
        ClusteringError: On Z < 1, n < 1, kappa_s <= 0 or delta outside (0, 1)
    """
    if num_clusters < 1 or num_users < 1 or not is_positive_number(kappa_s) or not 0.0 < delta < 1.0:
        raise ClusteringError("excess_risk_bound needs Z >= 1, n >= 1, kappa_s > 0, 0 < delta < 1")
    return 2.0 * num_clusters * math.sqrt(2.0) * kappa_s * math.sqrt(math.log(2.0 / delta)) / math.sqrt(num_users)


def adjusted_rand_index(labels_true: Sequence[int], labels_pred: Sequence[int]) -> float:
    """Adjusted Rand index between two labelings of the same users."""
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape:
        raise ClusteringError("Labelings differ in length")
    _, true_idx = np.unique(labels_true, return_inverse=True)
    _, pred_idx = np.unique(labels_pred, return_inverse=True)
    table = np.zeros((true_idx.max() + 1, pred_idx.max() + 1), dtype=np.int64)
    np.add.at(table, (true_idx, pred_idx), 1)

    index = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    total = comb(labels_true.size, 2)
    expected = rows * cols / total if total else 0.0
    maximum = 0.5 * (rows + cols)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))
