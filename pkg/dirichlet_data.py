"""
Dirichlet Data Module for the clustered NOMA federated learning simulator

This module synthesizes non-IID per-user datasets from a Dirichlet prior over
class proportions and estimates each user's concentration parameters by BFGS
maximization of the Multinomial-Dirichlet log-likelihood.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from config import Config
from utils import is_positive_number


class DirichletDataError(Exception):
    """Exception raised when data synthesis or estimation fails."""
    pass


class DomainError(DirichletDataError, ValueError):
    """Exception raised when an argument lies outside a function's domain."""
    pass


class ShapeError(DirichletDataError, ValueError):
    """Exception raised when array dimensions do not agree."""
    pass


@dataclass(frozen=True)
class LabelHistogram:
    """Per-user class counts n_j and their total V."""

    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size < 1:
            raise ShapeError("Histogram counts must be a non-empty vector")
        if not np.all(np.equal(np.mod(counts, 1), 0)) or np.any(counts < 0):
            raise DomainError("Histogram counts must be non-negative integers")
        counts = counts.astype(np.int64)
        if int(counts.sum()) != int(self.total):
            raise DomainError(f"Histogram total {self.total} != sum of counts {int(counts.sum())}")
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, 'total', int(self.total))

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> 'LabelHistogram':
        counts = np.asarray(counts)
        return cls(counts=counts, total=int(np.sum(counts)))

    @classmethod
    def from_labels(cls, labels: Sequence[int], num_classes: int) -> 'LabelHistogram':
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DomainError(f"Labels must lie in [0, {num_classes})")
        return cls.from_counts(np.bincount(labels, minlength=num_classes))

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)


@dataclass(frozen=True)
class ConcentrationVector:
    """Dirichlet concentration parameters alpha_j and their sum alpha0."""

    alpha: np.ndarray
    alpha0: float = field(init=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ShapeError("Concentration vector must be a non-empty vector")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise DomainError("Every concentration parameter must be positive and finite")
        object.__setattr__(self, 'alpha', alpha)
        object.__setattr__(self, 'alpha0', float(np.sum(alpha)))

    @classmethod
    def uniform(cls, num_classes: int, value: float = 1.0) -> 'ConcentrationVector':
        return cls(np.full(num_classes, float(value)))

    @property
    def num_classes(self) -> int:
        return int(self.alpha.size)

    def normalized(self) -> np.ndarray:
        """Mean of the Dirichlet, alpha / alpha0."""
        return self.alpha / self.alpha0


@dataclass(frozen=True)
class PartitionSpec:
    """Population description for a Dirichlet label partition."""

    num_users: int
    num_classes: int
    concentration: float
    samples_per_user: Tuple[int, ...]

    def __post_init__(self):
        samples = tuple(int(s) for s in self.samples_per_user)
        object.__setattr__(self, 'samples_per_user', samples)
        if self.num_users < 1:
            raise DomainError("Partition needs at least one user")
        if self.num_classes < 2:
            raise DomainError("Partition needs at least two classes")
        if not is_positive_number(self.concentration):
            raise DomainError("Concentration must be positive")
        if len(samples) != self.num_users:
            raise ShapeError(f"Expected {self.num_users} sample counts, got {len(samples)}")
        if any(s < 1 for s in samples):
            raise DomainError("Every user needs at least one sample")


@dataclass
class UserDataset:
    """Local dataset of one user: features, labels and the label histogram."""

    user_id: int
    features: np.ndarray
    labels: np.ndarray
    histogram: LabelHistogram
    sampled_with_replacement: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise ShapeError(f"User {self.user_id}: feature rows {self.features.shape} "
                             f"do not match {self.labels.size} labels")
        expected = np.bincount(self.labels, minlength=self.histogram.num_classes)
        if expected.size != self.histogram.num_classes or not np.array_equal(expected, self.histogram.counts):
            raise DirichletDataError(f"User {self.user_id}: histogram inconsistent with labels")

    @property
    def num_samples(self) -> int:
        return int(self.labels.size)


@dataclass
class EstimationResult:
    """Outcome of a concentration estimate."""

    alpha: ConcentrationVector
    converged: bool
    iterations: int
    log_likelihood: float
    history: List[float] = field(default_factory=list)


HistogramInput = Union[LabelHistogram, Sequence[LabelHistogram]]


def digamma(x):
    """
    Digamma function psi(x), the derivative of ln Gamma.

    Args:
        x: Positive real (scalar or array)

    Returns:
        psi(x), same shape as the input

    Raises:
        DomainError: If any argument is not strictly positive
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("digamma is only defined here for positive finite arguments")
    result = special.digamma(arr)
    return float(result) if np.ndim(result) == 0 else result


def log_gamma(x):
    """ln Gamma(x) for positive arguments."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("log_gamma is only defined here for positive finite arguments")
    result = special.gammaln(arr)
    return float(result) if np.ndim(result) == 0 else result


def _count_matrix(hist: HistogramInput) -> np.ndarray:
    """Stack one histogram or a sequence of histograms into a (rows x C) matrix."""
    if isinstance(hist, LabelHistogram):
        return hist.counts[np.newaxis, :].astype(float)
    rows = list(hist)
    if not rows:
        raise ShapeError("At least one histogram is required")
    num_classes = rows[0].num_classes
    if any(row.num_classes != num_classes for row in rows):
        raise ShapeError("All histograms must have the same number of classes")
    return np.vstack([row.counts for row in rows]).astype(float)


def _check_dimensions(counts: np.ndarray, alpha: ConcentrationVector) -> None:
    if counts.shape[1] != alpha.num_classes:
        raise ShapeError(f"Histogram has {counts.shape[1]} classes, alpha has {alpha.num_classes}")


def _log_likelihood(counts: np.ndarray, alpha: np.ndarray) -> float:
    alpha0 = alpha.sum()
    totals = counts.sum(axis=1)
    per_row = (special.gammaln(alpha0) - special.gammaln(alpha0 + totals)) + \
        (special.gammaln(alpha + counts) - special.gammaln(alpha)).sum(axis=1)
    return float(per_row.sum())


def _log_likelihood_grad(counts: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    alpha0 = alpha.sum()
    totals = counts.sum(axis=1)
    shared = special.digamma(alpha0) - special.digamma(alpha0 + totals)
    per_class = special.digamma(alpha + counts) - special.digamma(alpha)
    return shared.sum() + per_class.sum(axis=0)


def md_log_likelihood(hist: HistogramInput, alpha: ConcentrationVector) -> float:
    """
    Multinomial-Dirichlet log-likelihood without the multinomial coefficient.

    L(alpha) = lnG(a0) - lnG(a0 + V) + sum_j [lnG(a_j + n_j) - lnG(a_j)],
    summed over rows when a sequence of histograms is given.

    Raises:
        ShapeError: If the class counts of hist and alpha differ
    """
    counts = _count_matrix(hist)
    _check_dimensions(counts, alpha)
    return _log_likelihood(counts, alpha.alpha)


def md_log_likelihood_grad(hist: HistogramInput, alpha: ConcentrationVector) -> np.ndarray:
    """
    Gradient of md_log_likelihood with respect to alpha.

    Component j is psi(a0) - psi(a0 + V) + psi(a_j + n_j) - psi(a_j).
    """
    counts = _count_matrix(hist)
    _check_dimensions(counts, alpha)
    return _log_likelihood_grad(counts, alpha.alpha)


def estimate_concentration(hist: HistogramInput,
                           init: Optional[ConcentrationVector] = None,
                           tol: float = Config.DEFAULT_ESTIMATION_TOL,
                           max_iters: int = Config.DEFAULT_ESTIMATION_MAX_ITERS) -> EstimationResult:
    """
    Estimate concentration parameters by BFGS maximization of the MD likelihood.

    The search runs over theta = ln(alpha) so every iterate stays positive.
    A backtracking Armijo line search keeps -L non-increasing.

    Args:
        hist: One histogram or a sequence of i.i.d. histograms
        init: Starting point (defaults to alpha = 1 for every class)
        tol: Tolerance on the gradient norm and on the alpha step norm
        max_iters: Iteration cap; reaching it returns the best iterate with
            converged=False

    Returns:
        EstimationResult with the estimate and convergence information

    Raises:
        DomainError: If init is invalid or tol is not positive
        ShapeError: If dimensions disagree
    """
    counts = _count_matrix(hist)
    if init is None:
        init = ConcentrationVector.uniform(counts.shape[1])
    if not isinstance(init, ConcentrationVector):
        raise DomainError("init must be a ConcentrationVector")
    _check_dimensions(counts, init)
    if not is_positive_number(tol):
        raise DomainError("Tolerance must be positive")
    if int(max_iters) < 1:
        raise DomainError("max_iters must be at least 1")

    if not np.any(counts):
        # The likelihood is constant, every point is stationary.
        return EstimationResult(alpha=init, converged=True, iterations=0, log_likelihood=0.0, history=[0.0])

    def objective(theta: np.ndarray) -> float:
        with np.errstate(over='ignore', invalid='ignore'):
            value = -_log_likelihood(counts, np.exp(theta))
        return value if np.isfinite(value) else np.inf

    def gradient(theta: np.ndarray) -> np.ndarray:
        alpha = np.exp(theta)
        return -alpha * _log_likelihood_grad(counts, alpha)

    def alpha_grad_norm(theta: np.ndarray, grad: np.ndarray) -> float:
        # Stopping is judged on the alpha-space gradient, not the theta one.
        return float(np.linalg.norm(grad / np.exp(theta)))

    theta = np.log(init.alpha)
    f_val = objective(theta)
    grad = gradient(theta)
    n = theta.size
    identity = np.eye(n)
    inv_hessian = identity.copy()
    history = [-f_val]
    converged = alpha_grad_norm(theta, grad) < tol
    iterations = 0
    stalled = False

    while not converged and iterations < max_iters:
        iterations += 1
        direction = -inv_hessian @ grad
        slope = float(grad @ direction)
        if slope >= 0.0:
            # Lost descent through round-off in the update; restart from steepest descent.
            inv_hessian = identity.copy()
            direction = -grad
            slope = float(grad @ direction)

        step = 1.0
        accepted = False
        for _ in range(Config.MAX_BACKTRACKS):
            candidate = theta + step * direction
            f_new = objective(candidate)
            if f_new <= f_val + Config.ARMIJO_C * step * slope:
                accepted = True
                break
            step *= Config.BACKTRACK_FACTOR

        if not accepted:
            stalled = True
            converged = alpha_grad_norm(theta, grad) < tol
            if not converged:
                logging.warning(f"Line search made no progress after {iterations} iterations "
                                f"(gradient norm {alpha_grad_norm(theta, grad):.3e})")
            break

        grad_new = gradient(candidate)
        s = candidate - theta
        y = grad_new - grad
        alpha_step = np.linalg.norm(np.exp(candidate) - np.exp(theta))

        theta, f_val, grad = candidate, f_new, grad_new
        history.append(-f_val)

        if alpha_grad_norm(theta, grad) < tol or alpha_step < tol:
            converged = True
            break

        ys = float(y @ s)
        if ys > 1e-12 * np.linalg.norm(y) * np.linalg.norm(s):
            rho = 1.0 / ys
            left = identity - rho * np.outer(s, y)
            right = identity - rho * np.outer(y, s)
            inv_hessian = left @ inv_hessian @ right + rho * np.outer(s, s)

    if not converged and not stalled:
        logging.warning(f"Concentration estimate did not converge in {max_iters} iterations "
                        f"(gradient norm {alpha_grad_norm(theta, grad):.3e})")

    return EstimationResult(
        alpha=ConcentrationVector(np.exp(theta)),
        converged=converged,
        iterations=iterations,
        log_likelihood=-f_val,
        history=history,
    )


def _draw_proportions(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    """
    Draw class proportions from Dirichlet(alpha).

    Gamma variates are formed in log-space, G(a) = G(a + 1) * U^(1/a), so that
    very small concentrations (a << 1) do not underflow to an all-zero draw.
    """
    log_gamma_draws = np.log(rng.gamma(alpha + 1.0)) + np.log(rng.uniform(size=alpha.size)) / alpha
    return special.softmax(log_gamma_draws)


def sample_multinomial_dirichlet(alpha: ConcentrationVector, total: int, num_draws: int,
                                 rng_seed: int) -> List[LabelHistogram]:
    """Draw histograms of size total from MD(alpha), one proportion draw each."""
    if total < 0 or num_draws < 1:
        raise DomainError("total must be non-negative and num_draws positive")
    rng = np.random.default_rng(rng_seed)
    draws = []
    for _ in range(num_draws):
        proportions = _draw_proportions(rng, alpha.alpha)
        draws.append(LabelHistogram.from_counts(rng.multinomial(total, proportions)))
    return draws


def _partition_with_proportions(proportion_alphas: Sequence[np.ndarray], samples_per_user: Sequence[int],
                                num_classes: int, source_labels: np.ndarray,
                                source_features: Optional[np.ndarray],
                                rng: np.random.Generator) -> List[UserDataset]:
    """Shared sampler: user i draws proportions from Dirichlet(proportion_alphas[i])."""
    source_labels = np.asarray(source_labels, dtype=np.int64)
    present = np.unique(source_labels)
    if present.size != num_classes or present.min() != 0 or present.max() != num_classes - 1:
        raise DirichletDataError(f"Source pool must contain every class 0..{num_classes - 1}")
    if source_features is None:
        source_features = np.zeros((source_labels.size, 0))
    source_features = np.asarray(source_features, dtype=float)
    if source_features.shape[0] != source_labels.size:
        raise ShapeError("Source features and labels differ in length")

    class_indices = [rng.permutation(np.flatnonzero(source_labels == j)) for j in range(num_classes)]
    cursors = np.zeros(num_classes, dtype=np.int64)

    datasets = []
    for user_id, (alpha, num_samples) in enumerate(zip(proportion_alphas, samples_per_user)):
        proportions = _draw_proportions(rng, np.asarray(alpha, dtype=float))
        counts = rng.multinomial(int(num_samples), proportions)

        chosen = []
        exhausted = False
        for j, count in enumerate(counts):
            if count == 0:
                continue
            pool = class_indices[j]
            start = cursors[j]
            if start + count <= pool.size:
                chosen.append(pool[start:start + count])
                cursors[j] += count
            else:
                exhausted = True
                chosen.append(rng.choice(pool, size=int(count), replace=True))

        if exhausted:
            logging.warning(f"User {user_id}: class pool exhausted, sampled with replacement")

        indices = rng.permutation(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
        labels = source_labels[indices]
        datasets.append(UserDataset(
            user_id=user_id,
            features=source_features[indices],
            labels=labels,
            histogram=LabelHistogram.from_labels(labels, num_classes),
            sampled_with_replacement=exhausted,
        ))
    return datasets


def sample_dirichlet_partition(spec: PartitionSpec, source_labels: Sequence[int], rng_seed: int,
                               source_features: Optional[np.ndarray] = None) -> List[UserDataset]:
    """
    Partition a labelled pool into non-IID user datasets.

    Every user draws class proportions from Dirichlet(concentration * 1_C) and
    then takes samples without replacement from the pool in those proportions.
    A class that runs dry falls back to sampling with replacement and the
    user's dataset is flagged.

    Args:
        spec: Population description
        source_labels: Class id of every pool sample
        rng_seed: Seed; identical seeds give identical partitions
        source_features: Optional (pool x d) feature matrix

    Returns:
        List of UserDataset, one per user in id order
    """
    rng = np.random.default_rng(rng_seed)
    alphas = [np.full(spec.num_classes, spec.concentration)] * spec.num_users
    datasets = _partition_with_proportions(alphas, spec.samples_per_user, spec.num_classes,
                                           source_labels, source_features, rng)
    logging.info(f"Partitioned pool into {spec.num_users} users (alpha={spec.concentration})")
    return datasets


def sample_grouped_partition(spec: PartitionSpec, group_alphas: Sequence[Sequence[float]],
                             source_labels: Sequence[int], rng_seed: int,
                             source_features: Optional[np.ndarray] = None) -> Tuple[List[UserDataset], np.ndarray]:
    """
    Partition a pool into user groups with distinct Dirichlet priors.

    User i belongs to group i mod G and draws its class proportions from that
    group's concentration vector.

    Returns:
        (datasets, group_ids)
    """
    group_alphas = [np.asarray(g, dtype=float) for g in group_alphas]
    if not group_alphas:
        raise DomainError("At least one group is required")
    for g in group_alphas:
        if g.shape != (spec.num_classes,) or np.any(g <= 0):
            raise ShapeError(f"Group concentration vectors must be positive with {spec.num_classes} entries")

    group_ids = np.arange(spec.num_users) % len(group_alphas)
    rng = np.random.default_rng(rng_seed)
    alphas = [group_alphas[g] for g in group_ids]
    datasets = _partition_with_proportions(alphas, spec.samples_per_user, spec.num_classes,
                                           source_labels, source_features, rng)
    logging.info(f"Partitioned pool into {spec.num_users} users across {len(group_alphas)} groups")
    return datasets, group_ids


def block_group_alphas(num_classes: int, num_groups: int, high: float = 5.0, low: float = 0.1) -> List[np.ndarray]:
    """Group concentration vectors that favour disjoint blocks of classes."""
    if num_groups < 1 or num_groups > num_classes:
        raise DomainError("Need 1 <= num_groups <= num_classes")
    blocks = np.array_split(np.arange(num_classes), num_groups)
    alphas = []
    for block in blocks:
        alpha = np.full(num_classes, float(low))
        alpha[block] = float(high)
        alphas.append(alpha)
    return alphas


def split_train_test(dataset: UserDataset, test_fraction: float,
                     rng_seed: int) -> Tuple[UserDataset, UserDataset]:
    """Split a user dataset into train and held-out parts (train keeps at least one sample)."""
    if not 0.0 <= test_fraction < 1.0:
        raise DomainError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(dataset.num_samples)
    num_test = min(int(round(test_fraction * dataset.num_samples)), dataset.num_samples - 1)
    test_idx, train_idx = np.sort(order[:num_test]), np.sort(order[num_test:])
    num_classes = dataset.histogram.num_classes

    def subset(indices: np.ndarray) -> UserDataset:
        labels = dataset.labels[indices]
        return UserDataset(
            user_id=dataset.user_id,
            features=dataset.features[indices],
            labels=labels,
            histogram=LabelHistogram.from_labels(labels, num_classes),
            sampled_with_replacement=dataset.sampled_with_replacement,
        )

    return subset(train_idx), subset(test_idx)
