"""
Diversity and quality metrics: Vendi score (cosine kernel), an Inception-style score
from a toy classifier, mode coverage and the incremental Vendi curve.
"""
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.special import entr, rel_entr

from . import nn_core
from .errors import ConfigError, NumericalError, UsageError
from .nn_core import OptimizerState, ParamSet
from .repository import write_csv

logger = logging.getLogger(__name__)

FeatureFn = Callable[[np.ndarray], np.ndarray]

TRACE_TOLERANCE = 1e-9
NORM_EPS = 1e-12


def unit_rows(features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms < NORM_EPS):
        raise ConfigError(f"{int(np.sum(norms < NORM_EPS))} feature vectors have zero norm; cosine kernel undefined")
    return features / norms[:, None]


def cosine_kernel(features: np.ndarray) -> np.ndarray:
    """Symmetric similarity matrix with unit diagonal."""
    x = unit_rows(features)
    return x @ x.T


def entropy_exp(eigenvalues: np.ndarray) -> float:
    lam = np.clip(eigenvalues, 0.0, None)
    return float(np.exp(np.sum(entr(lam))))


def _eigvalsh(matrix: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.eigvalsh(matrix)
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"Symmetric eigen-solver failed: {e}") from e


def vendi_score_from_kernel(kernel: np.ndarray) -> float:
    n = kernel.shape[0]
    eigenvalues = _eigvalsh(np.asarray(kernel, dtype=np.float64) / n)
    if abs(eigenvalues.sum() - 1.0) > TRACE_TOLERANCE:
        raise NumericalError(f"Kernel eigenvalues sum to {eigenvalues.sum():.12f}, expected 1")
    return entropy_exp(eigenvalues)


def vendi_score(samples: np.ndarray, feature_fn: Optional[FeatureFn] = None) -> float:
    """
    exp(entropy) of the eigenvalues of K/n, K the cosine kernel of the features.
    When the feature dimension is below n the k x k Gram matrix X^T X / n is
    decomposed instead; it has the same non-zero spectrum.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = samples.shape[0]
    if n < 2:
        raise ConfigError(f"Vendi score needs at least 2 samples, got {n}")
    x = unit_rows(feature_fn(samples) if feature_fn is not None else samples)
    if x.shape[1] < n:
        eigenvalues = _eigvalsh(x.T @ x / n)
        if abs(eigenvalues.sum() - 1.0) > TRACE_TOLERANCE:
            raise NumericalError(f"Kernel eigenvalues sum to {eigenvalues.sum():.12f}, expected 1")
        return entropy_exp(eigenvalues)
    return vendi_score_from_kernel(x @ x.T)


class Embedder:
    """
    Classifier MLP trained on generator labels. The penultimate activations are the
    embedding; the softmax output gives p(y|x). Frozen once trained.
    """

    def __init__(self, params: ParamSet, trained: bool = False):
        if params.activations[-1] != "softmax":
            raise ConfigError("Embedder output layer must be softmax")
        if len(params.layers) < 2:
            raise ConfigError("Embedder needs at least one hidden layer")
        self.params = params
        self.trained = trained
        self._trunk = ParamSet(params.layers[:-1])

    @classmethod
    def create(cls, input_dim: int, num_classes: int, rng: np.random.Generator,
               hidden: Sequence[int] = (64, 32)) -> "Embedder":
        sizes = [input_dim, *hidden, num_classes]
        return cls(ParamSet.initialise(sizes, ["tanh"] * len(hidden) + ["softmax"], rng))

    @property
    def num_classes(self) -> int:
        return self.params.output_dim

    @property
    def embed_dim(self) -> int:
        return self._trunk.output_dim

    def fit(self, x: np.ndarray, labels: np.ndarray, rng: np.random.Generator, steps: int = 1500,
            batch_size: int = 128, learning_rate: float = 5e-3) -> float:
        """Cross-entropy training on (x, labels); returns the final training accuracy."""
        if self.trained:
            raise UsageError("Embedder is frozen")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ConfigError(f"Labels outside [0, {self.num_classes})")
        state = OptimizerState.for_params(self.params, learning_rate=learning_rate, weight_decay=0.0, clip_norm=None)
        onehot = np.eye(self.num_classes)[labels]
        for step in range(1, steps + 1):
            idx = rng.integers(0, len(x), size=min(batch_size, len(x)))
            probs, tape = nn_core.forward(self.params, x[idx])
            grad = -onehot[idx] / np.maximum(probs, NORM_EPS) / len(idx)
            nn_core.optimizer_step(state, self.params, nn_core.backward(self.params, tape, grad))
            if step % 500 == 0:
                loss = -np.mean(np.log(np.maximum(probs[np.arange(len(idx)), labels[idx]], NORM_EPS)))
                logger.debug(f"EMBEDDER TRAINING: step={step}, loss={loss:.4f}")
        self._trunk = ParamSet(self.params.layers[:-1])
        self.trained = True
        accuracy = float(np.mean(np.argmax(self.predict_proba(x), axis=1) == labels))
        logger.info(f"EMBEDDER READY: classes={self.num_classes}, embed_dim={self.embed_dim}, train_accuracy={accuracy:.3f}")
        return accuracy

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        probs, _ = nn_core.forward(self.params, np.atleast_2d(x))
        return probs

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def embed(self, x: np.ndarray) -> np.ndarray:
        features, _ = nn_core.forward(self._trunk, np.atleast_2d(x))
        return features

    def save(self, path: Union[str, Path]) -> Path:
        return nn_core.save_params(self.params, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Embedder":
        return cls(nn_core.load_params(path), trained=True)


def inception_score_from_probs(probs: np.ndarray) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) with p(y) the marginal over the set."""
    probs = np.asarray(probs, dtype=np.float64)
    marginal = probs.mean(axis=0, keepdims=True)
    kl = rel_entr(probs, marginal).sum(axis=1)
    return float(np.exp(np.mean(kl)))


def inception_style_score(samples: np.ndarray, embedder: Embedder) -> float:
    if not embedder.trained:
        raise UsageError("Inception-style score needs a trained embedder")
    samples = np.atleast_2d(samples)
    if samples.shape[0] < 10:
        raise ConfigError(f"Inception-style score needs at least 10 samples, got {samples.shape[0]}")
    return inception_score_from_probs(embedder.predict_proba(samples))


def coverage_from_assignments(assignments: np.ndarray, num_modes: int, n: int) -> Tuple[int, np.ndarray]:
    """Modes with at least max(1, n / (4K)) assigned samples; -1 marks unassigned."""
    assignments = np.asarray(assignments)
    histogram = np.bincount(assignments[assignments >= 0], minlength=num_modes)
    threshold = max(1.0, n / (4.0 * num_modes))
    return int(np.sum(histogram >= threshold)), histogram


def mode_coverage(samples: np.ndarray, centers: np.ndarray, radius: float) -> Tuple[int, np.ndarray]:
    samples = np.atleast_2d(samples)
    centers = np.atleast_2d(centers)
    dists = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = np.argmin(dists, axis=1)
    assigned = np.where(dists[np.arange(len(samples)), nearest] <= radius, nearest, -1)
    return coverage_from_assignments(assigned, len(centers), len(samples))


def class_coverage(samples: np.ndarray, embedder: Embedder) -> Tuple[int, np.ndarray]:
    """Coverage with classifier assignments, for datasets without a centre geometry."""
    samples = np.atleast_2d(samples)
    return coverage_from_assignments(embedder.predict(samples), embedder.num_classes, len(samples))


def curve_schedule(maximum: int, start: int = 50, switch: int = 200, step: int = 5, coarse_step: int = 50) -> List[int]:
    """start, start+step, ... up to switch, then coarse steps up to maximum."""
    fine = list(range(start, min(switch, maximum) + 1, step))
    coarse = list(range(switch + coarse_step, maximum + 1, coarse_step)) if maximum > switch else []
    return fine + coarse


def incremental_vendi_curve(samples: np.ndarray, feature_fn: Optional[FeatureFn] = None,
                            schedule: Optional[Sequence[int]] = None) -> List[Tuple[int, float]]:
    samples = np.atleast_2d(samples)
    if schedule is None:
        schedule = curve_schedule(len(samples))
    if not schedule:
        raise ConfigError("Vendi curve schedule is empty")
    if max(schedule) > len(samples):
        raise ConfigError(f"Schedule reaches n={max(schedule)} but only {len(samples)} samples are available")
    features = feature_fn(samples) if feature_fn is not None else samples
    return [(int(n), vendi_score(features[:n])) for n in schedule]


def write_vendi_curve(curve: Sequence[Tuple[int, float]], path: Union[str, Path]) -> Path:
    return write_csv(path, ["n", "vendi"], curve)
