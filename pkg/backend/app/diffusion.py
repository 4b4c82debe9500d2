"""
DDPM core: noise schedule, closed-form forward noising, the epsilon-prediction
pretraining loss, the stochastic reverse sampler with per-step log-probabilities,
and the one-shot noise-free prediction x~_{t->0}.

Step convention: diffusion time t in 1..T, T = noisiest. Schedule arrays are stored
0-based, so index t-1 holds the coefficients of step t.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn_core
from .errors import ConfigError, NumericalError
from .nn_core import GradientSet, ParamSet, Tape

logger = logging.getLogger(__name__)

TERMINAL_ALPHA_BAR_LIMIT = 0.05
ALPHA_BAR_GUARD = 1e-12
CONTEXT_TAG = "unconditional"

StepIndex = Union[int, np.ndarray]


class NoiseSchedule:
    """beta_t, alpha_t = 1 - beta_t, alpha_bar_t = prod alpha_s, sigma_t = sqrt(beta_t)."""

    def __init__(self, betas: Sequence[float]):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("Schedule needs a 1-D array of betas")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("Every beta_t must lie in (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ConfigError("betas must be non-decreasing in t")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigmas = np.sqrt(betas)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def terminal_noise_ok(self) -> bool:
        """True when x_T is near-isotropic noise (alpha_bar_T below the limit)."""
        return bool(self.alpha_bars[-1] < TERMINAL_ALPHA_BAR_LIMIT)

    def check_step(self, t: StepIndex) -> np.ndarray:
        steps = np.asarray(t)
        if steps.size and (np.any(steps < 1) or np.any(steps > self.T)):
            raise ConfigError(f"Step {t} outside [1, {self.T}]")
        return steps.astype(np.int64)

    def beta(self, t: StepIndex) -> np.ndarray:
        return self.betas[self.check_step(t) - 1]

    def alpha(self, t: StepIndex) -> np.ndarray:
        return self.alphas[self.check_step(t) - 1]

    def alpha_bar(self, t: StepIndex) -> np.ndarray:
        return self.alpha_bars[self.check_step(t) - 1]

    def sigma(self, t: StepIndex) -> np.ndarray:
        return self.sigmas[self.check_step(t) - 1]

    def __repr__(self) -> str:
        return (f"NoiseSchedule(T={self.T}, beta=[{self.betas[0]:.4g}, {self.betas[-1]:.4g}], "
                f"alpha_bar_T={self.alpha_bars[-1]:.3g})")


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule from beta_min (t=1) to beta_max (t=T)."""
    if T < 2:
        raise ConfigError(f"T must be at least 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"Need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}")
    schedule = NoiseSchedule(np.linspace(beta_min, beta_max, T))
    if not schedule.terminal_noise_ok:
        logger.warning("SCHEDULE: alpha_bar_T=%.4f >= %.2f, x_T is not near-isotropic noise",
                       schedule.alpha_bars[-1], TERMINAL_ALPHA_BAR_LIMIT)
    return schedule


def scaled_beta_range(T: int) -> Tuple[float, float]:
    """The (1e-4, 0.02) linear range of a 1000-step DDPM rescaled to T steps."""
    scale = 1000.0 / T
    return 1e-4 * scale, min(0.02 * scale, 0.999)


def sinusoidal_embedding(t: StepIndex, dim: int) -> np.ndarray:
    steps = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if dim == 0:
        return np.zeros((steps.size, 0))
    if dim % 2:
        raise ConfigError(f"Time embedding dimension must be even, got {dim}")
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(dim // 2) / dim))
    angles = steps[:, None] * freqs[None, :]
    emb = np.empty((steps.size, dim))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb


class DenoiserModel:
    """epsilon-prediction network eps_theta(x_t, t) over data of dimension d."""

    def __init__(self, params: ParamSet, schedule: NoiseSchedule, data_dim: int,
                 time_embed_dim: int = 16, snapshot_of: Optional[str] = None):
        if params.input_dim != data_dim + time_embed_dim:
            raise ConfigError(
                f"Network input {params.input_dim} != data dim {data_dim} + time embedding {time_embed_dim}"
            )
        if params.output_dim != data_dim:
            raise ConfigError(f"Network output {params.output_dim} != data dim {data_dim}")
        self.params = params
        self.schedule = schedule
        self.data_dim = data_dim
        self.time_embed_dim = time_embed_dim
        self._snapshot_of = snapshot_of

    @classmethod
    def create(cls, schedule: NoiseSchedule, data_dim: int, rng: np.random.Generator,
               hidden: Sequence[int] = (64, 64), time_embed_dim: int = 16,
               activation: str = "tanh") -> "DenoiserModel":
        sizes = [data_dim + time_embed_dim, *hidden, data_dim]
        activations = [activation] * len(hidden) + ["identity"]
        return cls(ParamSet.initialise(sizes, activations, rng), schedule, data_dim, time_embed_dim)

    @property
    def state_id(self) -> str:
        """Identifier of the parameter state; snapshots report the state they were copied from."""
        if self._snapshot_of is not None:
            return self._snapshot_of
        return f"{self.params.uid}:{self.params.version}"

    @property
    def is_snapshot(self) -> bool:
        return self._snapshot_of is not None

    def snapshot(self) -> "DenoiserModel":
        return DenoiserModel(self.params.copy(), self.schedule, self.data_dim, self.time_embed_dim,
                             snapshot_of=self.state_id)

    def network_input(self, x: np.ndarray, t: StepIndex) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        steps = self.schedule.check_step(t)
        if steps.ndim == 0:
            steps = np.full(x.shape[0], int(steps))
        return np.hstack([x, sinusoidal_embedding(steps, self.time_embed_dim)])

    def forward(self, x: np.ndarray, t: StepIndex) -> Tuple[np.ndarray, Tape]:
        return nn_core.forward(self.params, self.network_input(x, t))

    def backward(self, tape: Tape, output_grad: np.ndarray) -> GradientSet:
        return nn_core.backward(self.params, tape, output_grad)

    def predict_noise(self, x: np.ndarray, t: StepIndex) -> np.ndarray:
        eps, _ = self.forward(x, t)
        return eps if np.ndim(x) == 2 else eps[0]

    def save(self, path: Union[str, Path]) -> Path:
        return nn_core.save_params(self.params, path)

    @classmethod
    def load(cls, path: Union[str, Path], schedule: NoiseSchedule, data_dim: int,
             time_embed_dim: int = 16) -> "DenoiserModel":
        return cls(nn_core.load_params(path), schedule, data_dim, time_embed_dim)


@dataclass
class StepRecord:
    t: int
    x_t: np.ndarray
    mean: np.ndarray
    logprob: float


@dataclass
class Trajectory:
    """
    Reverse chain from t_start down to x_0. states[k] holds x_{t_start-k}, so
    states[-1] is the final sample; means[k] / logprobs[k] belong to step t_start-k.
    """
    t_start: int
    states: np.ndarray
    means: np.ndarray
    logprobs: np.ndarray
    sigmas: np.ndarray
    snapshot_id: str
    seed: Optional[int] = None
    context: str = CONTEXT_TAG
    reward: Optional[float] = None

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.t_start, 0, -1)

    def state_at(self, t: int) -> np.ndarray:
        return self.states[self.t_start - t]

    def records(self) -> List[StepRecord]:
        return [StepRecord(int(t), self.states[k], self.means[k], float(self.logprobs[k]))
                for k, t in enumerate(self.steps)]


def gaussian_logprob(x: np.ndarray, mean: np.ndarray, sigma: float) -> Union[float, np.ndarray]:
    """Log density of N(mean, sigma^2 I); rows are independent points for 2-D input."""
    if not sigma > 0.0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    diff = x - np.asarray(mean, dtype=np.float64)
    d = x.shape[-1]
    value = -0.5 * np.sum(diff * diff, axis=-1) / (sigma * sigma) - 0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
    return float(value) if np.ndim(value) == 0 else value


def forward_noise(schedule: NoiseSchedule, x0: np.ndarray, t: StepIndex, noise: np.ndarray) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps; t may be per-row."""
    ab = schedule.alpha_bar(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)


def ddpm_loss_step(model, x0: np.ndarray, rng: np.random.Generator,
                   t: Optional[np.ndarray] = None, noise: Optional[np.ndarray] = None) -> Tuple[float, GradientSet]:
    """
    Squared-error epsilon objective, mean over the batch of ||eps - eps_theta(x_t, t)||^2,
    with t uniform on {1..T} and fresh eps unless given. Returns (loss, d loss / d params).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ConfigError("ddpm_loss_step needs a non-empty batch")
    schedule = model.schedule
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=n)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    x_t = forward_noise(schedule, x0, t, noise)
    eps_pred, tape = model.forward(x_t, t)
    diff = eps_pred - noise
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    return loss, model.backward(tape, 2.0 * diff / n)


def mean_from_noise(schedule: NoiseSchedule, x_t: np.ndarray, t: StepIndex, eps: np.ndarray) -> np.ndarray:
    """mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)."""
    beta, alpha, ab = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
    if np.ndim(beta) == 1 and np.ndim(x_t) == 2:
        beta, alpha, ab = beta[:, None], alpha[:, None], ab[:, None]
    return (x_t - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(alpha)


def mean_noise_coefficient(schedule: NoiseSchedule, t: int) -> float:
    """d mean / d eps_theta, a scalar per step: -beta_t / (sqrt(alpha_t) sqrt(1 - alpha_bar_t))."""
    return float(-schedule.beta(t) / (np.sqrt(schedule.alpha(t)) * np.sqrt(1.0 - schedule.alpha_bar(t))))


def reverse_mean(model, x_t: np.ndarray, t: int) -> np.ndarray:
    return mean_from_noise(model.schedule, x_t, t, model.predict_noise(x_t, t))


def predict_x0(model, x_t: np.ndarray, t: StepIndex) -> np.ndarray:
    """One-shot inversion of forward_noise with the predicted noise."""
    ab = model.schedule.alpha_bar(t)
    if np.any(ab < ALPHA_BAR_GUARD):
        raise NumericalError(f"alpha_bar at step {t} is below {ALPHA_BAR_GUARD}; x~_(t->0) is ill-conditioned")
    eps = model.predict_noise(x_t, t)
    if np.ndim(ab) == 1 and np.ndim(x_t) == 2:
        ab = ab[:, None]
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def _run_chain(model, t_start: int, x_start: np.ndarray, rng: np.random.Generator,
               noise_scale: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    schedule = model.schedule
    schedule.check_step(t_start)
    n, d = x_start.shape
    states = np.empty((n, t_start + 1, d))
    means = np.empty((n, t_start, d))
    logprobs = np.empty((n, t_start))
    states[:, 0] = x_start
    x = x_start
    for k, t in enumerate(range(t_start, 0, -1)):
        mean = reverse_mean(model, x, t)
        sigma = float(schedule.sigma(t))
        x = mean + noise_scale * sigma * rng.standard_normal((n, d))
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"Reverse chain produced a non-finite state at step t={t}")
        means[:, k] = mean
        logprobs[:, k] = gaussian_logprob(x, mean, sigma)
        states[:, k + 1] = x
    return states, means, logprobs


def sample_trajectories(model, t_start: int, x_start: np.ndarray, rng: np.random.Generator,
                        noise_scale: float = 1.0, seed: Optional[int] = None) -> List[Trajectory]:
    """
    Batched reverse sampling: one trajectory per row of x_start, all starting at t_start.
    noise_scale multiplies the injected noise only (0 gives the noiseless recursion);
    log-probabilities always use sigma_t.
    """
    x_start = np.atleast_2d(np.asarray(x_start, dtype=np.float64))
    if x_start.shape[1] != model.data_dim:
        raise ConfigError(f"Start states have dimension {x_start.shape[1]}, model expects {model.data_dim}")
    states, means, logprobs = _run_chain(model, t_start, x_start, rng, noise_scale)
    sigmas = model.schedule.sigmas[t_start - 1::-1].copy()
    return [
        Trajectory(t_start, states[i], means[i], logprobs[i], sigmas, model.state_id, seed=seed)
        for i in range(x_start.shape[0])
    ]


def sample_trajectory(model, t_start: int, x_start: np.ndarray, rng: np.random.Generator,
                      noise_scale: float = 1.0, seed: Optional[int] = None) -> Trajectory:
    return sample_trajectories(model, t_start, np.asarray(x_start).reshape(1, -1), rng, noise_scale, seed)[0]


def sample(model, n: int, rng: np.random.Generator, x_T: Optional[np.ndarray] = None) -> np.ndarray:
    """Final samples of n full chains from pure noise (or from the given x_T)."""
    if x_T is None:
        x_T = rng.standard_normal((n, model.data_dim))
    states, _, _ = _run_chain(model, model.schedule.T, np.atleast_2d(x_T), rng, 1.0)
    return states[:, -1]


def dump_trajectory_csv(trajectory: Trajectory, path: Union[str, Path]) -> Path:
    """Debug dump: one row per step with the step's log-probability and the sampled x_{t-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = trajectory.states.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "logprob", *[f"x{i}" for i in range(d)]])
        for k, t in enumerate(trajectory.steps):
            writer.writerow([int(t), repr(float(trajectory.logprobs[k])), *[repr(float(v)) for v in trajectory.states[k + 1]]])
    return path
