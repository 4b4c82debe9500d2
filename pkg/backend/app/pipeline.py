"""
Pipeline stages over a run directory: pretrain -> finetune -> eval / vendi-curve / inject,
plus the cross-run report.
"""
import logging
import platform
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
import scipy

from . import config as config_mod
from . import diffusion, injection, metrics, rewards
from .datasets import generate_dataset, mode_centers
from .diffusion import DenoiserModel, NoiseSchedule
from .errors import ConfigError, NumericalError
from .metrics import Embedder
from .models import MetricsReport, RunConfig
from .nn_core import OptimizerState, ParamSet, load_params, optimizer_step, save_params
from .repository import (RunPaths, read_csv, read_manifest, record_run, write_csv, write_manifest,
                         write_pgm_sheet, write_samples_csv)
from .rl_finetune import hierarchical_train

logger = logging.getLogger(__name__)

VERSION = "1.0.0"
BOUND_TOLERANCE = 1e-9
REPORT_COLUMNS = ["run_id", "task", "method", "preset", "seed", "num_samples", "mean_reward", "se_reward",
                  "vendi_raw", "vendi_embed", "is_score", "mode_coverage", "config_hash"]
REPORT_METRICS = ["mean_reward", "se_reward", "vendi_raw", "vendi_embed", "is_score", "mode_coverage"]
PGM_SHEET_SIZE = 64


@dataclass
class StageResult:
    run_id: str
    stage: str
    out_dir: Path
    metrics: Optional[Dict[str, float]] = None


def run_id_for(config: RunConfig) -> str:
    return f"{config.run.name}-{config.config_hash()[:12]}"


def build_schedule(config: RunConfig) -> NoiseSchedule:
    return diffusion.make_schedule(config.schedule.T, *config.schedule.beta_range())


def load_denoiser(path: Path, config: RunConfig) -> DenoiserModel:
    if not path.exists():
        raise ConfigError(f"Missing artifact: denoiser checkpoint {path}")
    return DenoiserModel.load(path, build_schedule(config), config.dataset.data_dim, config.model.time_embed_dim)


def load_embedder(path: Path) -> Embedder:
    if not path.exists():
        raise ConfigError(f"Missing artifact: embedder checkpoint {path}")
    return Embedder.load(path)


def load_reward_fn(config: RunConfig, paths: RunPaths) -> rewards.RewardFn:
    scorer: Optional[ParamSet] = None
    if config.reward.kind == "fixed_scorer":
        scorer = load_params(paths.scorer if paths.scorer.exists() else Path(config.reward.scorer_path))
    return rewards.make_reward_fn(config.reward, scorer)


def _stage_manifest(paths: RunPaths, config: RunConfig, stage: str, extra: Optional[Dict] = None) -> Path:
    entries: Dict[str, object] = {}
    if paths.manifest.exists():
        entries.update(read_manifest(paths.manifest))
    entries.update({
        "run_id": run_id_for(config),
        "config_hash": config.config_hash(),
        "seed": config.run.seed,
        "eval_seed": config.eval.eval_seed,
        "method": config.finetune.method,
        "preset": config.finetune.preset or "",
        "windows": config.effective_windows().describe(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "cpu_count": psutil.cpu_count(logical=True),
        "memory_gb": round(psutil.virtual_memory().total / 1e9, 1),
        f"stage_{stage}": "done",
    })
    if config.finetune.preset:
        clusters = config_mod.preset_clusters(config.finetune.preset)
        entries["preset_clusters"] = "[" + ", ".join(f"({lo},{hi})" for lo, hi in clusters) + "]"
    entries.update(extra or {})
    return write_manifest(paths.manifest, entries)


def pretrain(config: RunConfig) -> StageResult:
    """DDPM pretraining, the embedder/classifier, and the frozen scorer when the reward needs one."""
    paths = RunPaths(Path(config.run.out_dir)).ensure()
    seed = config.run.seed
    spec = config.pretrain

    data = generate_dataset(config.dataset, spec.dataset_size, config_mod.stream(seed, "data"))
    rng = config_mod.stream(seed, "pretrain")
    model = DenoiserModel.create(build_schedule(config), config.dataset.data_dim, rng, hidden=config.model.hidden,
                                 time_embed_dim=config.model.time_embed_dim, activation=config.model.activation)
    state = OptimizerState.for_params(model.params, learning_rate=spec.learning_rate, weight_decay=spec.weight_decay,
                                      clip_norm=None, warmup_steps=spec.warmup_steps)
    losses = []
    window = []
    for step in range(1, spec.steps + 1):
        idx = rng.integers(0, len(data.samples), size=min(spec.batch_size, len(data.samples)))
        loss, grads = diffusion.ddpm_loss_step(model, data.samples[idx], rng)
        optimizer_step(state, model.params, grads)
        window.append(loss)
        if step % 100 == 0 or step == spec.steps:
            losses.append((step, float(np.mean(window))))
            window = []
        if step % 1000 == 0:
            logger.info(f"PRETRAIN STEP: step={step}, loss={losses[-1][1]:.4f}")
    model.save(paths.denoiser)
    write_csv(paths.logs / "pretrain.csv", ["step", "loss"], losses)

    emb_rng = config_mod.stream(seed, "embedder")
    embedder = Embedder.create(config.dataset.data_dim, config.dataset.modes, emb_rng)
    accuracy = embedder.fit(data.samples, data.labels, emb_rng, steps=spec.embedder_steps,
                            learning_rate=spec.embedder_lr)
    embedder.save(paths.embedder)

    if config.reward.kind == "fixed_scorer":
        scorer_file = Path(config.reward.scorer_path)
        if not scorer_file.exists():
            if config.dataset.kind != "ring":
                raise ConfigError(f"Missing artifact: scorer checkpoint {scorer_file}")
            params, _ = rewards.train_ring_scorer(config.dataset.radius, emb_rng, steps=spec.scorer_steps)
            save_params(params, scorer_file)
        shutil.copyfile(scorer_file, paths.scorer)

    config_mod.write_config_ini(config, paths.config)
    _stage_manifest(paths, config, "pretrain", {"embedder_accuracy": accuracy})
    record_run(run_id_for(config), "pretrain", "baseline", None, seed, config.config_hash(), str(paths.root))
    logger.info(f"PRETRAIN DONE: out={paths.root}, final_loss={losses[-1][1]:.4f}, embedder_accuracy={accuracy:.3f}")
    return StageResult(run_id_for(config), "pretrain", paths.root)


def finetune(config: RunConfig) -> StageResult:
    pre_dir = config.finetune.pretrained_dir
    if not pre_dir:
        raise ConfigError("Missing artifact: finetune needs [finetune] pretrained_dir (a pretrain run directory)")
    pre = RunPaths(Path(pre_dir))
    model = load_denoiser(pre.denoiser, config)
    if not pre.embedder.exists():
        raise ConfigError(f"Missing artifact: embedder checkpoint {pre.embedder}")

    paths = RunPaths(Path(config.run.out_dir)).ensure()
    shutil.copyfile(pre.embedder, paths.embedder)
    if pre.scorer.exists():
        shutil.copyfile(pre.scorer, paths.scorer)
    embedder = load_embedder(paths.embedder)
    reward_fn = load_reward_fn(config, paths)

    rng = config_mod.stream(config.run.seed, "rollout")
    reference_fn = None
    if config.mdp.reference_source == "dataset":
        def reference_fn(gen):
            return generate_dataset(config.dataset, 1, gen).samples[0]

    windows = config.effective_windows()
    opt = config.optimizer
    state = OptimizerState.for_params(model.params, learning_rate=opt.learning_rate, weight_decay=opt.weight_decay,
                                      clip_norm=opt.clip_norm, warmup_steps=opt.warmup_steps)
    log = hierarchical_train(
        model, windows, reward_fn, config.mdp, state, rng,
        embed_fn=embedder.embed,
        reference_fn=reference_fn,
        checkpoint_dir=paths.checkpoints / "train",
        log_path=paths.logs / "train.csv",
        selection_path=paths.logs / "selection.csv" if windows.mode == "dynamic" else None,
        run_meta={"config_hash": config.config_hash(), "seed": config.run.seed},
    )
    model.save(paths.finetuned)
    config_mod.write_config_ini(config, paths.config)
    _stage_manifest(paths, config, "finetune", {"pretrained_dir": pre_dir, "iterations": len(log.iterations)})
    final_reward = float(log.mean_rewards[-1]) if log.iterations else float("nan")
    record_run(run_id_for(config), "finetune", config.finetune.method, config.finetune.preset, config.run.seed,
               config.config_hash(), str(paths.root), {"final_mean_reward": final_reward})
    logger.info(f"FINETUNE DONE: method={config.finetune.method}, iterations={len(log.iterations)}, "
                f"final_mean_reward={final_reward:.4f}")
    return StageResult(run_id_for(config), "finetune", paths.root, {"final_mean_reward": final_reward})


def _evaluated_model(config: RunConfig, paths: RunPaths) -> Tuple[DenoiserModel, str]:
    if paths.finetuned.exists():
        return load_denoiser(paths.finetuned, config), config.finetune.method
    if paths.denoiser.exists():
        return load_denoiser(paths.denoiser, config), "baseline"
    raise ConfigError(f"Missing artifact: no checkpoint at {paths.finetuned} or {paths.denoiser}")


def evaluation_samples(model: DenoiserModel, config: RunConfig, n: Optional[int] = None) -> np.ndarray:
    """Samples from the fixed evaluation noise shared by every method."""
    n = n or config.eval.num_samples
    rng = config_mod.eval_stream(config)
    x_T = rng.standard_normal((n, model.data_dim))
    return diffusion.sample(model, n, rng, x_T)


def compute_report(samples: np.ndarray, reward_fn: rewards.RewardFn, embedder: Embedder, config: RunConfig,
                   method: str) -> MetricsReport:
    n = len(samples)
    values = rewards.evaluate_rewards(reward_fn, samples)
    vendi_raw = metrics.vendi_score(samples)
    vendi_embed = metrics.vendi_score(samples, embedder.embed)
    is_score = metrics.inception_style_score(samples, embedder)
    centers = mode_centers(config.dataset)
    if centers is not None:
        coverage, _ = metrics.mode_coverage(samples, centers, config.eval.coverage_sigmas * config.dataset.sigma)
    else:
        coverage, _ = metrics.class_coverage(samples, embedder)

    for name, value, upper in (("vendi_raw", vendi_raw, n), ("vendi_embed", vendi_embed, n),
                               ("is_score", is_score, embedder.num_classes)):
        if not 1.0 - BOUND_TOLERANCE <= value <= upper + BOUND_TOLERANCE:
            raise NumericalError(f"{name}={value} outside [1, {upper}]")

    return MetricsReport(
        run_id=run_id_for(config), task=f"{config.dataset.kind}/{config.reward.kind}", method=method,
        preset=config.finetune.preset or "", seed=config.run.seed, num_samples=n,
        mean_reward=float(values.mean()), se_reward=float(values.std(ddof=1) / np.sqrt(n)),
        vendi_raw=vendi_raw, vendi_embed=vendi_embed, is_score=is_score, mode_coverage=coverage,
        config_hash=config.config_hash(),
    )


def write_report(report: MetricsReport, path: Path) -> Path:
    row = report.model_dump()
    return write_csv(path, REPORT_COLUMNS, [[row[c] for c in REPORT_COLUMNS]])


def evaluate(config: RunConfig) -> StageResult:
    paths = RunPaths(Path(config.run.out_dir)).ensure()
    model, method = _evaluated_model(config, paths)
    embedder = load_embedder(paths.embedder)
    samples = evaluation_samples(model, config)
    report = compute_report(samples, load_reward_fn(config, paths), embedder, config, method)

    write_report(report, paths.metrics / "report.csv")
    write_samples_csv(samples, paths.samples / "eval.csv")
    if config.dataset.grid_shape is not None:
        write_pgm_sheet(samples[:PGM_SHEET_SIZE], config.dataset.grid_shape, paths.samples / "eval.pgm")
    _stage_manifest(paths, config, "eval")
    summary = {k: float(getattr(report, k)) for k in REPORT_METRICS}
    record_run(run_id_for(config), "eval", method, config.finetune.preset, config.run.seed, config.config_hash(),
               str(paths.root), summary)
    logger.info(f"EVAL DONE: method={method}, mean_reward={report.mean_reward:.4f}, vendi_embed={report.vendi_embed:.4f}, "
                f"is_score={report.is_score:.4f}, mode_coverage={report.mode_coverage}")
    return StageResult(run_id_for(config), "eval", paths.root, summary)


def vendi_curve(config: RunConfig) -> StageResult:
    paths = RunPaths(Path(config.run.out_dir)).ensure()
    model, method = _evaluated_model(config, paths)
    embedder = load_embedder(paths.embedder)
    ev = config.eval
    schedule = metrics.curve_schedule(ev.num_samples, ev.curve_start, ev.curve_switch, ev.curve_step,
                                      ev.curve_coarse_step)
    samples = evaluation_samples(model, config, max(schedule))
    curve = metrics.incremental_vendi_curve(samples, embedder.embed, schedule)
    metrics.write_vendi_curve(curve, paths.metrics / "vendi_curve.csv")
    _stage_manifest(paths, config, "vendi-curve")
    logger.info(f"VENDI CURVE DONE: method={method}, points={len(curve)}, final={curve[-1][1]:.4f}")
    return StageResult(run_id_for(config), "vendi-curve", paths.root, {"final_vendi": curve[-1][1]})


def inject(config: RunConfig) -> StageResult:
    paths = RunPaths(Path(config.run.out_dir)).ensure()
    plan = config.inject
    ft_dir = RunPaths(Path(plan.finetuned_dir or config.run.out_dir))
    base_dir = plan.base_dir or config.finetune.pretrained_dir
    if not base_dir:
        raise ConfigError("Missing artifact: injection needs [inject] base_dir or [finetune] pretrained_dir")
    finetuned = load_denoiser(ft_dir.finetuned, config)
    base = load_denoiser(RunPaths(Path(base_dir)).denoiser, config)
    embed_path = ft_dir.embedder if ft_dir.embedder.exists() else RunPaths(Path(base_dir)).embedder
    embedder = load_embedder(embed_path)

    seeds = plan.seeds or [int(s) for s in config_mod.stream(config.run.seed, "inject").integers(0, 2**31 - 1,
                                                                                                 size=plan.trajectories)]
    result = injection.injection_experiment(finetuned, base, plan.steps, seeds, embedder.embed)
    injection.write_curves(result, paths.inject / "curves.csv")
    injection.write_trend(result, paths.inject / "trend.csv")
    _stage_manifest(paths, config, "inject", {"inject_spearman": result.spearman})
    logger.info(f"INJECT DONE: steps={plan.steps}, trajectories={len(seeds)}, spearman={result.spearman:.3f}")
    return StageResult(run_id_for(config), "inject", paths.root, {"spearman": result.spearman})


STAGES = {
    "pretrain": pretrain,
    "finetune": finetune,
    "eval": evaluate,
    "vendi-curve": vendi_curve,
    "inject": inject,
}


def run_pipeline(config: RunConfig, stage: str) -> StageResult:
    if stage not in STAGES:
        raise ConfigError(f"Unknown stage '{stage}'; expected one of {sorted(STAGES)}")
    start = time.time()
    logger.info(f"STAGE START: stage={stage}, run_id={run_id_for(config)}, out={config.run.out_dir}, "
                f"seed={config.run.seed}")
    result = STAGES[stage](config)
    logger.info(f"STAGE DONE: stage={stage}, run_id={result.run_id}, duration_s={time.time() - start:.1f}")
    return result


def aggregate_reports(run_dirs: Sequence[Union[str, Path]]) -> List[Dict[str, object]]:
    """Mean and standard error (ddof=1) of every metric across runs, grouped by (method, preset)."""
    groups: Dict[Tuple[str, str], List[Dict[str, str]]] = {}
    for d in run_dirs:
        path = RunPaths(Path(d)).metrics / "report.csv"
        if not path.exists():
            raise ConfigError(f"Missing artifact: metrics report {path}")
        for row in read_csv(path):
            groups.setdefault((row["method"], row["preset"]), []).append(row)

    aggregated = []
    for (method, preset), rows in sorted(groups.items()):
        entry: Dict[str, object] = {"method": method, "preset": preset, "n_runs": len(rows)}
        for name in REPORT_METRICS:
            values = np.array([float(r[name]) for r in rows])
            entry[f"{name}_mean"] = float(values.mean())
            entry[f"{name}_se"] = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        aggregated.append(entry)
    return aggregated


def report(run_dirs: Sequence[Union[str, Path]], out_path: Union[str, Path]) -> Path:
    aggregated = aggregate_reports(run_dirs)
    header = ["method", "preset", "n_runs"] + [f"{m}_{s}" for m in REPORT_METRICS for s in ("mean", "se")]
    path = write_csv(out_path, header, [[entry[h] for h in header] for entry in aggregated])
    logger.info(f"REPORT DONE: runs={len(run_dirs)}, groups={len(aggregated)}, out={path}")
    return path
