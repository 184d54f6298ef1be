"""
Federated Learning Core for the clustered NOMA federated learning simulator

Local mini-batch SGD on softmax regression, weighted FedAvg aggregation and
the closed-form generalization and convergence-bound evaluators.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from config import Config
from dirichlet_data import UserDataset
from utils import all_finite, is_positive_number


class FLError(Exception):
    """Exception raised when training or aggregation fails."""
    pass


class FLDomainError(FLError, ValueError):
    """Exception raised for arguments outside an operation's domain."""
    pass


class TrainingDivergenceError(FLError):
    """Exception raised when a local update produces non-finite parameters."""
    pass


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector of a model."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).ravel()
        if not all_finite(weights):
            raise TrainingDivergenceError("Model parameters contain NaN or Inf")
        object.__setattr__(self, 'weights', weights)

    @property
    def dimension(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True)
class TrainingConfig:
    """Local-training hyperparameters. A zero learning rate freezes the model."""

    learning_rate: float = Config.DEFAULT_LEARNING_RATE
    local_epochs: int = Config.DEFAULT_LOCAL_EPOCHS
    batch_size: int = Config.DEFAULT_BATCH_SIZE
    rounds: int = Config.DEFAULT_ROUNDS

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise FLDomainError(f"learning_rate must be a non-negative finite number, got {self.learning_rate}")
        for name in ('local_epochs', 'batch_size', 'rounds'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise FLDomainError(f"{name} must be an integer >= 1, got {value}")


@dataclass(frozen=True)
class ConvergenceParams:
    """Smoothness L, PL constant mu, gradient bound G, confidence delta and concentration sum A."""

    lipschitz: float = 1.0
    pl_constant: float = 1.0
    grad_variance_bound: float = 1.0
    confidence: float = Config.DEFAULT_DELTA
    concentration_sum: float = 1.0

    def __post_init__(self):
        for name in ('lipschitz', 'pl_constant', 'grad_variance_bound', 'concentration_sum'):
            if not is_positive_number(getattr(self, name)):
                raise FLDomainError(f"{name} must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise FLDomainError("confidence must lie in (0, 1)")


class SoftmaxRegression:
    """
    Multinomial logistic regression with a bias per class.

    Parameters are flattened as [W (C x d) row-major, b (C)].
    """

    def __init__(self, num_classes: int, num_features: int):
        if num_classes < 2 or num_features < 1:
            raise FLDomainError("Softmax regression needs >= 2 classes and >= 1 feature")
        self.num_classes = int(num_classes)
        self.num_features = int(num_features)

    @classmethod
    def for_dataset(cls, data: UserDataset) -> 'SoftmaxRegression':
        return cls(data.histogram.num_classes, data.features.shape[1])

    @property
    def dimension(self) -> int:
        return self.num_classes * (self.num_features + 1)

    def init_params(self) -> ModelParams:
        return ModelParams(np.zeros(self.dimension))

    def _unpack(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        split = self.num_classes * self.num_features
        return weights[:split].reshape(self.num_classes, self.num_features), weights[split:]

    def logits(self, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
        matrix, bias = self._unpack(weights)
        return features @ matrix.T + bias

    def per_sample_losses(self, weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        logits = self.logits(weights, features)
        return logsumexp(logits, axis=1) - logits[np.arange(labels.size), labels]

    def loss(self, weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.per_sample_losses(weights, features, labels)))

    def gradient(self, weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        logits = self.logits(weights, features)
        probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        probs[np.arange(labels.size), labels] -= 1.0
        probs /= labels.size
        return np.concatenate([(probs.T @ features).ravel(), probs.sum(axis=0)])

    def predict(self, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(weights, features), axis=1)


class QuadraticLoss:
    """Per-sample loss 0.5 * ||w - x||^2 (L = mu = 1); labels are ignored."""

    def __init__(self, num_features: int):
        self.num_features = int(num_features)

    @property
    def dimension(self) -> int:
        return self.num_features

    def init_params(self) -> ModelParams:
        return ModelParams(np.zeros(self.dimension))

    def per_sample_losses(self, weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum((features - weights) ** 2, axis=1)

    def loss(self, weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.per_sample_losses(weights, features, labels)))

    def gradient(self, weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return weights - features.mean(axis=0)


def _check_model(model: ModelParams, objective) -> None:
    if model.dimension != objective.dimension:
        raise FLDomainError(f"Model has {model.dimension} parameters, objective expects {objective.dimension}")


def local_loss(model: ModelParams, data: UserDataset, objective=None) -> float:
    """
    Mean per-sample loss of a user's dataset.

    Raises:
        FLDomainError: On an empty dataset or mismatched dimensions
    """
    if data.num_samples == 0:
        raise FLDomainError(f"User {data.user_id} has no samples")
    objective = objective or SoftmaxRegression.for_dataset(data)
    _check_model(model, objective)
    return objective.loss(model.weights, data.features, data.labels)


def global_loss(datasets: Sequence[UserDataset], model: ModelParams, selected: Iterable[int],
                objective=None) -> float:
    """Sample-weighted average of the local losses of the selected users."""
    by_id = {d.user_id: d for d in datasets}
    selected = list(selected)
    if not selected:
        raise FLDomainError("At least one user must be selected")
    betas = np.array([by_id[i].num_samples for i in selected], dtype=float)
    losses = np.array([local_loss(model, by_id[i], objective) for i in selected])
    return float(np.dot(betas / betas.sum(), losses))


def local_sgd_update(model: ModelParams, data: UserDataset, config: TrainingConfig, rng_seed,
                     objective=None) -> ModelParams:
    """
    Mini-batch SGD over the user's data for config.local_epochs epochs.

    Samples are reshuffled every epoch from the given seed.

    Raises:
        TrainingDivergenceError: If the parameters become non-finite
    """
    if data.num_samples == 0:
        raise FLDomainError(f"User {data.user_id} has no samples")
    objective = objective or SoftmaxRegression.for_dataset(data)
    _check_model(model, objective)

    rng = np.random.default_rng(rng_seed)
    weights = model.weights.copy()
    for _ in range(config.local_epochs):
        order = rng.permutation(data.num_samples)
        for start in range(0, data.num_samples, config.batch_size):
            batch = order[start:start + config.batch_size]
            weights = weights - config.learning_rate * objective.gradient(weights, data.features[batch],
                                                                          data.labels[batch])
        if not all_finite(weights):
            raise TrainingDivergenceError(f"User {data.user_id}: local update diverged "
                                          f"(learning rate {config.learning_rate})")
    return ModelParams(weights)


def fedavg_aggregate(updates: Sequence[Tuple[ModelParams, float]]) -> ModelParams:
    """
    Weighted average sum_i (beta_i / sum beta) * w_i.

    Raises:
        FLDomainError: On an empty list, mismatched dimensions or non-positive total weight
    """
    if not updates:
        raise FLDomainError("Nothing to aggregate")
    dims = {params.dimension for params, _ in updates}
    if len(dims) != 1:
        raise FLDomainError(f"Updates have different dimensions: {sorted(dims)}")
    betas = np.array([beta for _, beta in updates], dtype=float)
    if np.any(betas < 0) or betas.sum() <= 0:
        raise FLDomainError("Aggregation weights must be non-negative with a positive sum")
    stacked = np.vstack([params.weights for params, _ in updates])
    return ModelParams((betas / betas.sum()) @ stacked)


def _weight_concentration(betas: Sequence[float]) -> float:
    betas = np.asarray(betas, dtype=float)
    if betas.size == 0 or np.any(betas <= 0):
        raise FLDomainError("Sample counts must be positive")
    return float(np.sum(betas ** 2) / np.sum(betas) ** 2)


def convergence_contraction(params: ConvergenceParams, eta: float, betas: Sequence[float]) -> Tuple[float, bool]:
    """
    Contraction factor 1 - 2 eta mu sum(beta^2) / (sum beta)^2.

    Returns:
        (factor, premise_ok) where premise_ok requires the factor in (0, 1]
        and eta = 1 / L
    """
    factor = 1.0 - eta * 2.0 * params.pl_constant * _weight_concentration(betas)
    premise_ok = 0.0 < factor <= 1.0 and math.isclose(eta, 1.0 / params.lipschitz, rel_tol=1e-9)
    return factor, premise_ok


def convergence_bound_rhs(prev_gap: float, params: ConvergenceParams, eta: float, betas: Sequence[float],
                          variance_sign: float = -1.0, warn: bool = True) -> float:
    """
    Per-round bound on the expected global-loss gap.

    factor * prev_gap + variance_sign * eta * sum(beta^2) * G^2 / (sum beta)^2,
    with variance_sign = -1 as printed and +1 for the descent-lemma form.
    prev_gap is F(w) - F(w*) of the previous round. A violated premise is
    logged unless warn is False.
    """
    if prev_gap < 0:
        raise FLDomainError("prev_gap must be non-negative")
    factor, premise_ok = convergence_contraction(params, eta, betas)
    if not premise_ok and warn:
        logging.warning(f"Convergence bound premise violated (factor={factor:.4f}, eta={eta}, L={params.lipschitz})")
    variance = eta * _weight_concentration(betas) * params.grad_variance_bound ** 2
    return float(factor * prev_gap + variance_sign * variance)


def reference_optimum(datasets: Sequence[UserDataset], selected: Iterable[int], objective,
                      max_iters: int = Config.REFERENCE_OPTIMUM_MAX_ITERS) -> float:
    """
    Minimum of the sample-weighted global loss over the selected users.

    The weighted average of local means is the mean over the pooled samples,
    so L-BFGS runs on the pooled data starting from objective.init_params().
    The value never exceeds the loss at the starting point.
    """
    by_id = {d.user_id: d for d in datasets}
    pooled = [by_id[i] for i in selected if by_id[i].num_samples > 0]
    if not pooled:
        raise FLDomainError("At least one user with samples must be selected")
    features = np.vstack([d.features for d in pooled])
    labels = np.concatenate([d.labels for d in pooled])
    start = objective.init_params().weights
    start_loss = objective.loss(start, features, labels)

    result = minimize(lambda w: objective.loss(w, features, labels), start,
                      jac=lambda w: objective.gradient(w, features, labels),
                      method='L-BFGS-B', options={'maxiter': int(max_iters)})
    if not result.success:
        logging.debug(f"Reference optimum stopped early: {result.message}")
    return float(min(result.fun, start_loss))


def generalization_term(params: ConvergenceParams, betas: Sequence[float], alphas: Sequence[float]) -> float:
    """sqrt(sum_i A^2 log(2/delta) / (8 beta_i^2 alpha_i^2))."""
    betas = np.asarray(betas, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if betas.shape != alphas.shape or betas.size == 0:
        raise FLDomainError("betas and alphas must be non-empty and of equal length")
    if np.any(betas <= 0) or np.any(alphas <= 0):
        raise FLDomainError("betas and alphas must be positive")
    log_term = math.log(2.0 / params.confidence)
    return float(math.sqrt(np.sum(params.concentration_sum ** 2 * log_term / (8.0 * betas ** 2 * alphas ** 2))))


def moving_average(values: Sequence[float], window: int = Config.MOVING_AVERAGE_WINDOW) -> np.ndarray:
    """Centered moving average; the window shrinks at both ends."""
    values = np.asarray(values, dtype=float)
    if window < 1:
        raise FLDomainError("window must be >= 1")
    half = window // 2
    return np.array([values[max(0, i - half):i + half + 1].mean() for i in range(values.size)])


def evaluate_accuracy(model: ModelParams, datasets: Sequence[UserDataset], objective) -> float:
    """Fraction of correctly classified samples pooled over the datasets."""
    _check_model(model, objective)
    correct = 0
    total = 0
    for data in datasets:
        if data.num_samples == 0:
            continue
        correct += int(np.sum(objective.predict(model.weights, data.features) == data.labels))
        total += data.num_samples
    if total == 0:
        raise FLDomainError("No samples to evaluate")
    return correct / total

