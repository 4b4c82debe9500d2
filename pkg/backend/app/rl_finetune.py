"""
Reward fine-tuning of the reverse chain viewed as an MDP.

State s_t = (x_t, t), action = x_{t-1}, reward r(x_0) at the terminal transition only.
The clipped importance-sampled policy gradient is shared by the full-chain update
(every trajectory starts at T) and the windowed update (trajectories start at an
intermediate step reached by re-noising a clean reference). Window start steps come
from predefined clusters or from a per-reference scan that trades the reward gained
by starting one step earlier against how far the one-shot prediction drifts from
the reference.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffusion
from .diffusion import DenoiserModel, NoiseSchedule, Trajectory
from .errors import ConfigError, HRFError, NumericalError, UsageError
from .models import Cluster, MdpConfig, WindowSchedule
from .nn_core import GradientSet, OptimizerState, optimizer_step, save_params
from .repository import append_csv, write_csv
from .rewards import RewardFn, evaluate_rewards

logger = logging.getLogger(__name__)

EmbedFn = Callable[[np.ndarray], np.ndarray]
ReferenceFn = Callable[[np.random.Generator], np.ndarray]

ADVANTAGE_STD_FLOOR = 1e-12

TRAIN_LOG_HEADER = ["iter", "window_lo", "window_hi", "mean_reward", "std_reward",
                    "mean_ratio", "clip_fraction", "grad_norm"]
SELECTION_HEADER = ["iter", "batch", "t", "reward", "diff", "distance", "objective", "chosen"]
CHECKPOINT_MANIFEST_HEADER = ["iteration", "checkpoint", "config_hash", "seed"]


@dataclass
class RolloutBatch:
    trajectories: List[Trajectory]
    snapshot_id: str
    advantages: np.ndarray

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=np.float64)

    @property
    def t_starts(self) -> np.ndarray:
        return np.array([t.t_start for t in self.trajectories], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass
class UpdateStats:
    ratio_sum: float = 0.0
    clipped: int = 0
    transitions: int = 0

    @property
    def mean_ratio(self) -> float:
        return self.ratio_sum / self.transitions if self.transitions else 1.0

    @property
    def clip_fraction(self) -> float:
        return self.clipped / self.transitions if self.transitions else 0.0

    def merge(self, other: "UpdateStats") -> "UpdateStats":
        return UpdateStats(self.ratio_sum + other.ratio_sum, self.clipped + other.clipped,
                           self.transitions + other.transitions)


@dataclass
class CandidateRecord:
    t: int
    reward: float
    diff: float
    distance: float
    objective: float


@dataclass
class DynamicSelectionReport:
    records: List[CandidateRecord]
    chosen: int

    def rows(self) -> List[list]:
        return [[r.t, r.reward, r.diff, r.distance, r.objective, int(r.t == self.chosen)] for r in self.records]


@dataclass
class InitialSteps:
    steps: np.ndarray
    start_states: np.ndarray
    reference: Optional[np.ndarray] = None
    report: Optional[DynamicSelectionReport] = None


@dataclass
class IterationRecord:
    iteration: int
    window_lo: int
    window_hi: int
    mean_reward: float
    std_reward: float
    mean_ratio: float
    clip_fraction: float
    grad_norm: float

    def row(self) -> list:
        return [self.iteration, self.window_lo, self.window_hi, self.mean_reward, self.std_reward,
                self.mean_ratio, self.clip_fraction, self.grad_norm]


@dataclass
class TrainingLog:
    iterations: List[IterationRecord] = field(default_factory=list)
    selections: List[Tuple[int, int, DynamicSelectionReport]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def mean_rewards(self) -> np.ndarray:
        return np.array([r.mean_reward for r in self.iterations])


def standardize_advantages(rewards: np.ndarray, normalize: bool = True) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if not normalize:
        return rewards.copy()
    std = rewards.std()
    if std < ADVANTAGE_STD_FLOOR:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def collect_rollouts(model: DenoiserModel, t_starts: Sequence[int], start_states: np.ndarray, reward_fn: RewardFn,
                     rng: np.random.Generator, normalize: bool = True) -> RolloutBatch:
    """
    Roll every start state down to x_0 under `model` (the old-policy snapshot) and attach
    r(x_0). Trajectories sharing a start step are sampled together, noisiest group first.
    """
    t_starts = np.asarray(t_starts, dtype=np.int64)
    start_states = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    if len(t_starts) != len(start_states):
        raise ConfigError(f"{len(t_starts)} start steps for {len(start_states)} start states")
    if len(t_starts) == 0:
        raise ConfigError("collect_rollouts needs at least one start state")
    model.schedule.check_step(t_starts)

    trajectories: List[Optional[Trajectory]] = [None] * len(t_starts)
    for t in sorted(set(t_starts.tolist()), reverse=True):
        idx = np.flatnonzero(t_starts == t)
        for i, traj in zip(idx, diffusion.sample_trajectories(model, t, start_states[idx], rng)):
            trajectories[i] = traj

    rewards = evaluate_rewards(reward_fn, np.stack([traj.x0 for traj in trajectories]))
    for traj, r in zip(trajectories, rewards):
        traj.reward = float(r)
    return RolloutBatch(trajectories, model.state_id, standardize_advantages(rewards, normalize))


def policy_gradient(model: DenoiserModel, old_snapshot: DenoiserModel, batch: RolloutBatch,
                    clip_range: float) -> Tuple[GradientSet, UpdateStats]:
    """
    Ascent direction of the clipped surrogate
        (1/N) sum_i sum_t min(r_t A_i, clip(r_t, 1-eps, 1+eps) A_i),  r_t = p_theta / p_old,
    over every recorded transition of every trajectory. Where the unclipped term is the
    minimum its gradient is r_t A_i grad log p_theta(x_{t-1} | x_t); elsewhere zero.
    """
    if batch.snapshot_id != old_snapshot.state_id:
        raise UsageError(f"Batch was sampled under snapshot {batch.snapshot_id}, got {old_snapshot.state_id}")
    if not model.params.same_shape(old_snapshot.params):
        raise UsageError("Model and snapshot parameters differ in shape")
    if not clip_range > 0:
        raise ConfigError(f"clip_range must be positive, got {clip_range}")

    schedule = model.schedule
    trajectories = batch.trajectories
    n = len(trajectories)
    t_starts = batch.t_starts
    grads = GradientSet.zeros_like(model.params)
    stats = UpdateStats()

    for t in range(int(t_starts.max()), 0, -1):
        rows = np.flatnonzero(t_starts >= t)
        x_t = np.stack([trajectories[i].state_at(t) for i in rows])
        x_prev = np.stack([trajectories[i].state_at(t - 1) for i in rows])
        old_logprob = np.array([trajectories[i].logprobs[trajectories[i].t_start - t] for i in rows])

        eps, tape = model.forward(x_t, t)
        mean = diffusion.mean_from_noise(schedule, x_t, t, eps)
        sigma = float(schedule.sigma(t))
        ratio = np.exp(diffusion.gaussian_logprob(x_prev, mean, sigma) - old_logprob)

        advantages = batch.advantages[rows]
        clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
        active = ratio * advantages <= clipped * advantages
        weight = np.where(active, ratio * advantages, 0.0) / n

        score = (x_prev - mean) / (sigma * sigma)
        output_grad = (weight * diffusion.mean_noise_coefficient(schedule, t))[:, None] * score
        grads.add(model.backward(tape, output_grad))

        stats.ratio_sum += float(ratio.sum())
        stats.clipped += int(np.count_nonzero(clipped != ratio))
        stats.transitions += len(rows)

    grads.count = 1
    return grads, stats


def ddpo_is_update(model: DenoiserModel, old_snapshot: DenoiserModel, batch: RolloutBatch,
                   clip_range: float) -> Tuple[GradientSet, UpdateStats]:
    """Full-chain update: every trajectory must start from pure noise at T."""
    if np.any(batch.t_starts != model.schedule.T):
        raise UsageError(f"Full-chain update needs every trajectory to start at T={model.schedule.T}")
    return policy_gradient(model, old_snapshot, batch, clip_range)


def hrf_windowed_update(model: DenoiserModel, old_snapshot: DenoiserModel, batch: RolloutBatch,
                        clip_range: float) -> Tuple[GradientSet, UpdateStats]:
    """Windowed update: the sum runs over the recorded steps t*..1 of each trajectory."""
    return policy_gradient(model, old_snapshot, batch, clip_range)


def generate_reference(model: DenoiserModel, rng: np.random.Generator) -> np.ndarray:
    """Clean reference x_0 from a full rollout of `model`."""
    return diffusion.sample(model, 1, rng)[0]


def renoise(schedule: NoiseSchedule, reference: np.ndarray, t_targets: Sequence[int], rng: np.random.Generator,
            noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    One start state per target step: forward_noise(reference, t, eps). At t = T the
    state is the draw eps itself, the pure-noise initial distribution.
    """
    t_targets = np.asarray(t_targets, dtype=np.int64)
    schedule.check_step(t_targets)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if noise is None:
        noise = rng.standard_normal((len(t_targets), reference.shape[0]))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    refs = np.broadcast_to(reference, noise.shape)
    states = diffusion.forward_noise(schedule, refs, t_targets, noise)
    at_T = t_targets == schedule.T
    states[at_T] = noise[at_T]
    return states


def make_start_states(model: DenoiserModel, t_targets: Sequence[int], rng: np.random.Generator,
                      reference: Optional[np.ndarray] = None,
                      noise: Optional[np.ndarray] = None) -> List[Tuple[int, np.ndarray]]:
    """
    Draws from rho(x_noised): re-noisings of one clean reference (generated by the
    current model unless given) to each target step. `noise` overrides the eps draws.
    """
    if reference is None:
        reference = generate_reference(model, rng)
    states = renoise(model.schedule, reference, t_targets, rng, noise)
    return [(int(t), states[i]) for i, t in enumerate(t_targets)]


def cosine_distances(reference: np.ndarray, others: np.ndarray) -> np.ndarray:
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    others = np.atleast_2d(np.asarray(others, dtype=np.float64))
    denom = np.maximum(np.linalg.norm(others, axis=1) * np.linalg.norm(reference), 1e-12)
    return 1.0 - (others @ reference) / denom


def score_candidates(steps: Sequence[int], rewards: Sequence[float], next_rewards: Sequence[float],
                     distances: Sequence[float], beta: float) -> DynamicSelectionReport:
    """
    objective(t) = (R_t - R_next(t)) - beta * D_t; the maximum wins, ties going to the
    larger (less noisy) step.
    """
    if beta < 0:
        raise ConfigError(f"beta must be non-negative, got {beta}")
    if not steps:
        raise ConfigError("No candidate steps to score")
    records = []
    for t, r, r_next, d in zip(steps, rewards, next_rewards, distances):
        diff = float(r) - float(r_next)
        records.append(CandidateRecord(int(t), float(r), diff, float(d), diff - beta * float(d)))
    best = None
    for record in sorted(records, key=lambda rec: rec.t, reverse=True):
        if best is None or record.objective > best.objective:
            best = record
    return DynamicSelectionReport(records, best.t)


def dynamic_window_select(model: DenoiserModel, reference: np.ndarray, candidate_steps: Sequence[int], beta: float,
                          embed_fn: EmbedFn, reward_fn: RewardFn, rng: np.random.Generator,
                          rollouts_per_step: int = 4) -> DynamicSelectionReport:
    """
    For each candidate t: re-noise the reference to t, denoise fully `rollouts_per_step`
    times (mean reward R_t) and measure the mean cosine distance D_t between the
    reference embedding and the embeddings of the one-shot predictions from those
    start states. R at the successor of the top candidate comes from one extra grid point.
    """
    T = model.schedule.T
    if rollouts_per_step < 1:
        raise ConfigError("Dynamic selection needs at least one rollout per candidate step")
    steps = sorted(set(int(t) for t in candidate_steps))
    if not steps or steps[0] < 1 or steps[-1] > T - 1:
        raise ConfigError(f"Candidate steps must lie in [1, {T - 1}], got {list(candidate_steps)}")
    stride = steps[-1] - steps[-2] if len(steps) > 1 else 1
    successor = min(steps[-1] + stride, T)

    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    try:
        ref_embedding = np.asarray(embed_fn(reference[None, :]))[0]
    except HRFError:
        raise
    except Exception as e:
        raise NumericalError(f"Embedding the reference failed: {e}") from e

    reward_at = {}
    distance_at = {}
    for t in steps + ([successor] if successor not in steps else []):
        starts = renoise(model.schedule, reference, np.full(rollouts_per_step, t), rng)
        trajectories = diffusion.sample_trajectories(model, t, starts, rng)
        reward_at[t] = float(np.mean(evaluate_rewards(reward_fn, np.stack([tr.x0 for tr in trajectories]))))
        if t in steps:
            predictions = diffusion.predict_x0(model, starts, t)
            try:
                embeddings = np.asarray(embed_fn(predictions))
            except HRFError:
                raise
            except Exception as e:
                raise NumericalError(f"Embedding predictions at t={t} failed: {e}") from e
            distance_at[t] = float(np.mean(cosine_distances(ref_embedding, embeddings)))

    next_rewards = [reward_at[steps[k + 1]] if k + 1 < len(steps) else reward_at[successor] for k in range(len(steps))]
    report = score_candidates(steps, [reward_at[t] for t in steps], next_rewards,
                              [distance_at[t] for t in steps], beta)
    logger.debug(f"WINDOW SELECTION: chosen={report.chosen}, candidates={len(steps)}, beta={beta}")
    return report


def _as_bounds(cluster: Union[Cluster, Tuple[int, int]], T: int) -> Tuple[int, int]:
    lo, hi = (cluster.lo, cluster.hi) if isinstance(cluster, Cluster) else (int(cluster[0]), int(cluster[1]))
    if lo > hi:
        raise ConfigError(f"Empty cluster ({lo}, {hi})")
    if lo < 1 or hi > T:
        raise ConfigError(f"Cluster ({lo}, {hi}) outside [1, {T}]")
    return lo, hi


def select_initial_steps(model: DenoiserModel, windows: WindowSchedule, batch_size: int, rng: np.random.Generator,
                         cluster: Optional[Union[Cluster, Tuple[int, int]]] = None,
                         reference: Optional[np.ndarray] = None, reference_fn: Optional[ReferenceFn] = None,
                         reward_fn: Optional[RewardFn] = None, embed_fn: Optional[EmbedFn] = None) -> InitialSteps:
    """
    Start steps and start states for one batch sharing one reference.
    predefined: t_i ~ U{lo..hi} per sample for the active cluster.
    dynamic: every sample starts at the step chosen by dynamic_window_select.
    References are only drawn when some start step is below T.
    """
    T = model.schedule.T

    def resolve_reference():
        if reference is not None:
            return np.asarray(reference, dtype=np.float64).reshape(-1)
        if reference_fn is not None:
            return np.asarray(reference_fn(rng), dtype=np.float64).reshape(-1)
        return generate_reference(model, rng)

    if windows.mode == "predefined":
        if cluster is None:
            raise ConfigError("Predefined window selection needs the active cluster")
        lo, hi = _as_bounds(cluster, T)
        steps = rng.integers(lo, hi + 1, size=batch_size)
        if lo == T:
            return InitialSteps(steps, rng.standard_normal((batch_size, model.data_dim)))
        ref = resolve_reference()
        return InitialSteps(steps, renoise(model.schedule, ref, steps, rng), ref)

    if reward_fn is None or embed_fn is None:
        raise ConfigError("Dynamic window selection needs a reward function and an embedding function")
    ref = resolve_reference()
    report = dynamic_window_select(model, ref, windows.candidate_steps(T), windows.beta, embed_fn, reward_fn, rng,
                                   windows.rollouts_per_step)
    steps = np.full(batch_size, report.chosen, dtype=np.int64)
    return InitialSteps(steps, renoise(model.schedule, ref, steps, rng), ref, report)


def hierarchical_train(model: DenoiserModel, windows: WindowSchedule, reward_fn: RewardFn, mdp: MdpConfig,
                       optimizer: OptimizerState, rng: np.random.Generator, embed_fn: Optional[EmbedFn] = None,
                       reference_fn: Optional[ReferenceFn] = None, checkpoint_dir: Optional[Path] = None,
                       log_path: Optional[Path] = None, selection_path: Optional[Path] = None,
                       run_meta: Optional[dict] = None) -> TrainingLog:
    """
    Outer loop. Each iteration snapshots theta_old, samples num_batches batches (one
    reference per batch, batch_size re-noisings), then applies updates_per_iteration
    optimizer steps, each over a contiguous group of batches. A full-chain schedule
    (single cluster (T, T)) is plain DDPO.
    """
    T = model.schedule.T
    windows.check_steps(T)
    if windows.mode == "dynamic" and embed_fn is None:
        raise ConfigError("Dynamic window selection needs an embedding function")
    run_meta = run_meta or {}
    log = TrainingLog()
    for path in (log_path, selection_path):
        if path is not None and Path(path).exists():
            Path(path).unlink()

    last_checkpoint = None
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        write_csv(checkpoint_dir / "manifest.csv", CHECKPOINT_MANIFEST_HEADER, [])
        last_checkpoint = _write_checkpoint(model, checkpoint_dir, 0, run_meta)
        log.checkpoints.append(last_checkpoint)

    plan = windows.iteration_plan()
    logger.info(f"TRAIN START: iterations={len(plan)}, windows={windows.describe()}, "
                f"samples_per_iteration={mdp.samples_per_iteration}, clip_range={mdp.clip_range}")
    for iteration, cluster in enumerate(plan, start=1):
        try:
            record = _train_iteration(model, windows, cluster, reward_fn, mdp, optimizer, rng, embed_fn,
                                      reference_fn, iteration, log)
        except NumericalError as e:
            logger.error(f"TRAIN ABORTED: iter={iteration}, error={e}, last_checkpoint={last_checkpoint}")
            raise NumericalError(f"{e} (iteration {iteration}; last good checkpoint: {last_checkpoint})") from e

        log.iterations.append(record)
        if log_path is not None:
            append_csv(log_path, TRAIN_LOG_HEADER, record.row())
        if checkpoint_dir is not None:
            last_checkpoint = _write_checkpoint(model, checkpoint_dir, iteration, run_meta)
            log.checkpoints.append(last_checkpoint)
        logger.info(f"TRAIN ITERATION: iter={iteration}, window=({record.window_lo}, {record.window_hi}), "
                    f"mean_reward={record.mean_reward:.4f}, mean_ratio={record.mean_ratio:.6f}, "
                    f"clip_fraction={record.clip_fraction:.3f}, grad_norm={record.grad_norm:.4g}")

    if selection_path is not None and log.selections:
        write_csv(selection_path, SELECTION_HEADER,
                  [[it, j, *row] for it, j, report in log.selections for row in report.rows()])
    return log


def _train_iteration(model: DenoiserModel, windows: WindowSchedule, cluster: Optional[Cluster], reward_fn: RewardFn,
                     mdp: MdpConfig, optimizer: OptimizerState, rng: np.random.Generator,
                     embed_fn: Optional[EmbedFn], reference_fn: Optional[ReferenceFn], iteration: int,
                     log: TrainingLog) -> IterationRecord:
    old_snapshot = model.snapshot()
    batches: List[RolloutBatch] = []
    chosen_steps: List[int] = []
    for j in range(mdp.num_batches):
        init = select_initial_steps(old_snapshot, windows, mdp.batch_size, rng, cluster=cluster,
                                    reference_fn=reference_fn, reward_fn=reward_fn, embed_fn=embed_fn)
        if init.report is not None:
            log.selections.append((iteration, j, init.report))
            chosen_steps.append(init.report.chosen)
        batches.append(collect_rollouts(old_snapshot, init.steps, init.start_states, reward_fn, rng,
                                        mdp.normalize_advantages))

    stats = UpdateStats()
    grad_norms = []
    for group in np.array_split(np.arange(mdp.num_batches), mdp.updates_per_iteration):
        accumulated = GradientSet.zeros_like(model.params)
        for j in group:
            grads, batch_stats = hrf_windowed_update(model, old_snapshot, batches[j], mdp.clip_range)
            accumulated.add(grads)
            stats = stats.merge(batch_stats)
        grad_norms.append(accumulated.mean().global_norm())
        optimizer_step(optimizer, model.params, accumulated.negated())

    rewards = np.concatenate([b.rewards for b in batches])
    if cluster is not None:
        lo, hi = cluster.lo, cluster.hi
    else:
        lo, hi = min(chosen_steps), max(chosen_steps)
    return IterationRecord(iteration, lo, hi, float(rewards.mean()), float(rewards.std()),
                           stats.mean_ratio, stats.clip_fraction, float(np.mean(grad_norms)))


def _write_checkpoint(model: DenoiserModel, checkpoint_dir: Path, iteration: int, run_meta: dict) -> Path:
    path = save_params(model.params, checkpoint_dir / f"iter_{iteration:03d}.bin")
    append_csv(checkpoint_dir / "manifest.csv", CHECKPOINT_MANIFEST_HEADER,
               [iteration, path.name, run_meta.get("config_hash", ""), run_meta.get("seed", "")])
    return path
