"""
Injection sampling: start a chain under the fine-tuned model and hand it to the base model
at a chosen step, with every random draw shared. How far the final sample lands from the
pure fine-tuned sample shows where along the chain fine-tuning changed behaviour.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import spearmanr

from .diffusion import DenoiserModel, mean_from_noise
from .errors import ConfigError, NumericalError
from .repository import write_csv

logger = logging.getLogger(__name__)

FeatureFn = Callable[[np.ndarray], np.ndarray]

CURVE_HEADER = ["injection_step", "t", "mean_distance", "se", "raw_mean_distance", "raw_se",
                "base_mean_distance", "base_se"]
TREND_HEADER = ["order", "injection_step", "final_mean_distance", "final_se", "spearman"]


@dataclass
class SharedNoise:
    """x_T and the per-step noise for each seed; noise[:, t - 1] is used at step t."""
    x_T: np.ndarray
    noise: np.ndarray

    @classmethod
    def draw(cls, seeds: Sequence[int], T: int, data_dim: int) -> "SharedNoise":
        x_T, noise = [], []
        for seed in seeds:
            rng = np.random.default_rng(int(seed))
            x_T.append(rng.standard_normal(data_dim))
            noise.append(rng.standard_normal((T, data_dim)))
        return cls(np.stack(x_T), np.stack(noise))


@dataclass
class InjectionResult:
    steps: List[int]
    seeds: List[int]
    T: int
    # (num_seeds, T + 1) arrays indexed by T - t, one per injection step
    distances: Dict[int, np.ndarray] = field(default_factory=dict)
    raw_distances: Dict[int, np.ndarray] = field(default_factory=dict)
    base_distances: Dict[int, np.ndarray] = field(default_factory=dict)
    spearman: float = float("nan")

    @property
    def noisy_first(self) -> List[int]:
        return sorted(self.steps, reverse=True)

    def final_distances(self, step: int) -> np.ndarray:
        return self.distances[step][:, -1]


def row_cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    denom = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
    return 1.0 - np.sum(a * b, axis=1) / denom


def _mean_se(values: np.ndarray) -> tuple:
    n = len(values)
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se


def switched_chain(finetuned: DenoiserModel, base: DenoiserModel, switch_step: int,
                   shared: SharedNoise) -> np.ndarray:
    """
    Run the reverse chain with the fine-tuned model for t > switch_step and the base model
    for t <= switch_step. Returns the denoised estimates x~_(t->0), shape (n, T + 1, d),
    indexed by T - t; the last slot is x_0 itself.
    """
    T = finetuned.schedule.T
    x = shared.x_T.copy()
    n, d = x.shape
    estimates = np.empty((n, T + 1, d))
    for t in range(T, 0, -1):
        model = finetuned if t > switch_step else base
        eps = model.predict_noise(x, t)
        ab = float(model.schedule.alpha_bar(t))
        estimates[:, T - t] = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        x = mean_from_noise(model.schedule, x, t, eps) + float(model.schedule.sigma(t)) * shared.noise[:, t - 1]
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"Injection chain (switch at {switch_step}) went non-finite at t={t}")
    estimates[:, T] = x
    return estimates


def _check_compatible(finetuned: DenoiserModel, base: DenoiserModel) -> None:
    if not finetuned.params.same_shape(base.params) or finetuned.data_dim != base.data_dim:
        raise ConfigError(f"Checkpoint shape mismatch: fine-tuned {finetuned.params.sizes} vs base {base.params.sizes}")
    if finetuned.schedule.T != base.schedule.T:
        raise ConfigError(f"Schedule length mismatch: fine-tuned T={finetuned.schedule.T} vs base T={base.schedule.T}")


def _embedded_distance(a: np.ndarray, b: np.ndarray, embed_fn: Optional[FeatureFn]) -> np.ndarray:
    n, steps, d = a.shape
    flat_a = a.reshape(-1, d)
    flat_b = b.reshape(-1, d)
    if embed_fn is not None:
        flat_a, flat_b = embed_fn(flat_a), embed_fn(flat_b)
    return row_cosine_distance(flat_a, flat_b).reshape(n, steps)


def injection_experiment(finetuned: DenoiserModel, base: DenoiserModel, steps: Sequence[int],
                         seeds: Sequence[int], embed_fn: Optional[FeatureFn] = None) -> InjectionResult:
    _check_compatible(finetuned, base)
    T = finetuned.schedule.T
    bad = [s for s in steps if not 1 <= int(s) <= T]
    if bad:
        raise ConfigError(f"Injection steps {bad} outside [1, {T}]")
    if not seeds:
        raise ConfigError("Injection needs at least one seed")

    shared = SharedNoise.draw(seeds, T, finetuned.data_dim)
    # switching at 0 never hands over; switching at T runs the base model throughout
    pure_ft = switched_chain(finetuned, base, 0, shared)
    pure_base = switched_chain(finetuned, base, T, shared)

    result = InjectionResult(steps=[int(s) for s in steps], seeds=[int(s) for s in seeds], T=T)
    for s in result.steps:
        injected = switched_chain(finetuned, base, s, shared)
        result.distances[s] = _embedded_distance(injected, pure_ft, embed_fn)
        result.raw_distances[s] = _embedded_distance(injected, pure_ft, None)
        result.base_distances[s] = _embedded_distance(injected, pure_base, embed_fn)

    order = result.noisy_first
    finals = [float(result.final_distances(s).mean()) for s in order]
    if len(order) > 1 and np.ptp(finals) > 0:
        result.spearman = float(spearmanr(np.arange(len(order)), finals)[0])
    logger.info(f"INJECTION: steps={order}, seeds={len(seeds)}, final_distances={np.round(finals, 4).tolist()}, "
                f"spearman={result.spearman:.3f}")
    return result


def curve_rows(result: InjectionResult) -> List[list]:
    rows = []
    for s in result.noisy_first:
        for k, t in enumerate(range(result.T, -1, -1)):
            rows.append([s, t,
                         *_mean_se(result.distances[s][:, k]),
                         *_mean_se(result.raw_distances[s][:, k]),
                         *_mean_se(result.base_distances[s][:, k])])
    return rows


def write_curves(result: InjectionResult, path: Union[str, Path]) -> Path:
    return write_csv(path, CURVE_HEADER, curve_rows(result))


def write_trend(result: InjectionResult, path: Union[str, Path]) -> Path:
    rows = [[i, s, *_mean_se(result.final_distances(s)), result.spearman]
            for i, s in enumerate(result.noisy_first)]
    return write_csv(path, TREND_HEADER, rows)
