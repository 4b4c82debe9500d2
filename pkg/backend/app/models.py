"""
Pydantic models for run configuration, reports and request/response validation
"""
import hashlib
import json
import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

DatasetKind = Literal["ring", "swiss-roll", "grid16"]
RewardKind = Literal["region", "dct_compress", "dct_incompress", "fixed_scorer"]
Method = Literal["ddpo", "hrf", "hrf-d"]
Stage = Literal["pretrain", "finetune", "eval", "inject", "vendi-curve"]

TERMINAL_ALPHA_BAR_LIMIT = 0.05

# Run locations stay out of the config hash.
HASH_EXCLUDED_FIELDS = {"run": {"out_dir"}, "finetune": {"pretrained_dir"}}


class RunSection(BaseModel):
    name: str = Field(default="run", description="Free-form run label")
    seed: int = Field(default=0, ge=0, description="Master seed; every random stream derives from it")
    out_dir: str = Field(default="runs/default", description="Run directory")


class DatasetSpec(BaseModel):
    """Toy generator: ring of Gaussian modes, 2-D swiss roll, or 16x16 band-limited textures."""
    kind: DatasetKind = "ring"
    modes: int = Field(default=8, ge=1, description="Ring modes, swiss-roll label segments or grid16 prototypes")
    radius: float = Field(default=3.0, gt=0, description="Ring radius")
    sigma: float = Field(default=0.15, ge=0, description="Per-mode std (ring), additive noise (swiss-roll), perturbation (grid16)")
    prototype_seed: int = Field(default=0, ge=0, description="Seed of the grid16 prototype textures")
    grid_size: int = Field(default=16, ge=8, description="Side of grid16 images")

    @property
    def data_dim(self) -> int:
        return self.grid_size * self.grid_size if self.kind == "grid16" else 2

    @property
    def grid_shape(self) -> Optional[Tuple[int, int]]:
        return (self.grid_size, self.grid_size) if self.kind == "grid16" else None


class ScheduleSpec(BaseModel):
    T: int = Field(default=40, ge=2, description="Number of diffusion steps")
    beta_min: Optional[float] = Field(default=None, gt=0, lt=1, description="beta_1; defaults to the 1000-step range scaled to T")
    beta_max: Optional[float] = Field(default=None, gt=0, lt=1, description="beta_T")

    @model_validator(mode="after")
    def _both_or_neither(self):
        if (self.beta_min is None) != (self.beta_max is None):
            raise ValueError("beta_min and beta_max must be given together")
        if self.beta_min is not None and self.beta_min > self.beta_max:
            raise ValueError(f"beta_min={self.beta_min} exceeds beta_max={self.beta_max}")
        return self

    def beta_range(self) -> Tuple[float, float]:
        if self.beta_min is not None:
            return self.beta_min, self.beta_max
        scale = 1000.0 / self.T
        return 1e-4 * scale, min(0.02 * scale, 0.999)

    def terminal_alpha_bar(self) -> float:
        lo, hi = self.beta_range()
        return float(np.prod(1.0 - np.linspace(lo, hi, self.T)))


class ModelSpec(BaseModel):
    hidden: List[int] = Field(default_factory=lambda: [64, 64], description="Hidden layer widths of the denoiser")
    time_embed_dim: int = Field(default=16, ge=0, description="Sinusoidal time embedding size (even)")
    activation: Literal["tanh", "relu"] = "tanh"

    @field_validator("time_embed_dim")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("time_embed_dim must be even")
        return v


class PretrainSpec(BaseModel):
    steps: int = Field(default=5000, ge=1)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=2e-3, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    warmup_steps: int = Field(default=0, ge=0)
    dataset_size: int = Field(default=8000, ge=10)
    embedder_steps: int = Field(default=1500, ge=1, description="Training steps of the classifier/embedder")
    embedder_lr: float = Field(default=5e-3, ge=0)
    scorer_steps: int = Field(default=2000, ge=1, description="Training steps of the frozen scorer (fixed_scorer reward only)")


class OptimizerSpec(BaseModel):
    """Fine-tuning optimizer (AdamW)."""
    learning_rate: float = Field(default=2e-3, ge=0)
    weight_decay: float = Field(default=1e-3, ge=0)
    clip_norm: float = Field(default=4.5, gt=0)
    warmup_steps: int = Field(default=0, ge=0)


class RewardSpec(BaseModel):
    kind: RewardKind = "region"
    normal: List[float] = Field(default_factory=lambda: [1.8478, 0.7654], description="Half-plane normal (region)")
    offset: float = Field(default=0.0, description="Half-plane offset (region)")
    quant_scale: float = Field(default=1.0, gt=0, description="Quantization scale q (dct kinds)")
    grid_shape: Optional[Tuple[int, int]] = Field(default=None, description="h, w of grid-shaped samples (dct kinds)")
    scorer_path: Optional[str] = Field(default=None, description="Frozen scorer checkpoint (fixed_scorer)")

    @model_validator(mode="after")
    def _check_parameters(self):
        if not all(math.isfinite(v) for v in [*self.normal, self.offset, self.quant_scale]):
            raise ValueError("Reward parameters must be finite")
        if self.kind == "region" and math.sqrt(sum(v * v for v in self.normal)) <= 0.0:
            raise ValueError("region reward needs a non-zero normal")
        if self.kind in ("dct_compress", "dct_incompress"):
            if self.grid_shape is None:
                raise ValueError(f"{self.kind} needs grid_shape")
            if self.grid_shape[0] % 8 or self.grid_shape[1] % 8:
                raise ValueError(f"grid_shape {self.grid_shape} is not a multiple of 8")
        if self.kind == "fixed_scorer" and not self.scorer_path:
            raise ValueError("fixed_scorer needs scorer_path")
        return self


class MdpConfig(BaseModel):
    clip_range: float = Field(default=1e-4, gt=0, description="Ratio clip epsilon; inf disables clipping")
    batch_size: int = Field(default=12, ge=1, description="Trajectories per batch (one reference per batch)")
    num_batches: int = Field(default=8, ge=1, description="Batches sampled per iteration")
    updates_per_iteration: int = Field(default=1, ge=1, description="Optimizer steps per iteration")
    normalize_advantages: bool = True
    reference_source: Literal["model", "dataset"] = "model"

    @model_validator(mode="after")
    def _updates_fit(self):
        if self.updates_per_iteration > self.num_batches:
            raise ValueError("updates_per_iteration cannot exceed num_batches")
        return self

    @property
    def samples_per_iteration(self) -> int:
        return self.batch_size * self.num_batches


class Cluster(BaseModel):
    lo: int = Field(ge=1)
    hi: int = Field(ge=1)
    iterations: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.lo > self.hi:
            raise ValueError(f"Empty cluster ({self.lo}, {self.hi})")
        return self


class WindowSchedule(BaseModel):
    """Predefined clusters visited in order (noisiest first) or dynamic per-reference selection."""
    mode: Literal["predefined", "dynamic"] = "predefined"
    clusters: List[Cluster] = Field(default_factory=list)
    iterations: int = Field(default=24, ge=1, description="Outer iterations in dynamic mode")
    candidate_stride: int = Field(default=4, ge=1)
    beta: float = Field(default=1.0, ge=0, description="Weight of the distance penalty (dynamic)")
    distance: Literal["cosine"] = "cosine"
    rollouts_per_step: int = Field(default=4, ge=1, description="Rollouts per candidate step (dynamic)")

    @model_validator(mode="after")
    def _clusters_present(self):
        if self.mode == "predefined" and not self.clusters:
            raise ValueError("predefined window schedule needs at least one cluster")
        return self

    @classmethod
    def full_chain(cls, T: int, iterations: int) -> "WindowSchedule":
        return cls(mode="predefined", clusters=[Cluster(lo=T, hi=T, iterations=iterations)])

    @property
    def total_iterations(self) -> int:
        if self.mode == "dynamic":
            return self.iterations
        return sum(c.iterations for c in self.clusters)

    def iteration_plan(self) -> List[Optional[Cluster]]:
        if self.mode == "dynamic":
            return [None] * self.iterations
        return [c for c in self.clusters for _ in range(c.iterations)]

    def candidate_steps(self, T: int) -> List[int]:
        return list(range(1, T, self.candidate_stride))

    def check_steps(self, T: int) -> None:
        for c in self.clusters:
            if c.hi > T:
                raise ValueError(f"Cluster ({c.lo}, {c.hi}) exceeds T={T}")

    def describe(self) -> str:
        if self.mode == "dynamic":
            return f"dynamic(stride={self.candidate_stride}, beta={self.beta})"
        return "[" + ", ".join(f"({c.lo},{c.hi})x{c.iterations}" for c in self.clusters) + "]"


class FinetuneSpec(BaseModel):
    method: Method = "hrf"
    preset: Optional[str] = Field(default=None, description="Window preset name (baseline | early | later | ...)")
    pretrained_dir: Optional[str] = Field(default=None, description="Run directory holding the pretrained checkpoints")
    iterations: int = Field(default=24, ge=1, description="Outer iterations for ddpo")


class EvalSpec(BaseModel):
    num_samples: int = Field(default=2000, ge=10)
    eval_seed: int = Field(default=20240601, ge=0, description="Shared initial-noise seed across methods")
    curve_start: int = Field(default=50, ge=2)
    curve_switch: int = Field(default=200, ge=2)
    curve_step: int = Field(default=5, ge=1)
    curve_coarse_step: int = Field(default=50, ge=1)
    coverage_sigmas: float = Field(default=3.0, gt=0, description="Coverage radius in ring component stds")


class InjectionPlan(BaseModel):
    finetuned_dir: Optional[str] = None
    base_dir: Optional[str] = None
    steps: List[int] = Field(default_factory=lambda: [38, 35, 30, 25, 20, 10], description="Injection steps, diffusion time")
    trajectories: int = Field(default=15, ge=2)
    seeds: Optional[List[int]] = Field(default=None, description="Shared seeds; derived from the inject stream when omitted")


class RunConfig(BaseModel):
    run: RunSection = Field(default_factory=RunSection)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    pretrain: PretrainSpec = Field(default_factory=PretrainSpec)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    reward: RewardSpec = Field(default_factory=RewardSpec)
    mdp: MdpConfig = Field(default_factory=MdpConfig)
    windows: WindowSchedule = Field(default_factory=lambda: WindowSchedule(clusters=[Cluster(lo=28, hi=32)]))
    finetune: FinetuneSpec = Field(default_factory=FinetuneSpec)
    eval: EvalSpec = Field(default_factory=EvalSpec)
    inject: InjectionPlan = Field(default_factory=InjectionPlan)

    @model_validator(mode="after")
    def _cross_checks(self):
        T = self.schedule.T
        if self.schedule.terminal_alpha_bar() >= TERMINAL_ALPHA_BAR_LIMIT:
            raise ValueError(
                f"alpha_bar_T={self.schedule.terminal_alpha_bar():.4f} >= {TERMINAL_ALPHA_BAR_LIMIT}; "
                "x_T would not be near-isotropic noise"
            )
        self.windows.check_steps(T)
        if any(not 1 <= s <= T for s in self.inject.steps):
            raise ValueError(f"Injection steps {self.inject.steps} outside [1, {T}]")
        if self.reward.kind in ("dct_compress", "dct_incompress"):
            if self.dataset.grid_shape is None or tuple(self.reward.grid_shape) != self.dataset.grid_shape:
                raise ValueError(f"{self.reward.kind} needs grid data of shape {self.reward.grid_shape}")
        if self.reward.kind == "region" and len(self.reward.normal) != self.dataset.data_dim:
            raise ValueError(f"region normal has {len(self.reward.normal)} entries, data dim is {self.dataset.data_dim}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        content = self.model_dump(mode="json", exclude=HASH_EXCLUDED_FIELDS)
        blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def effective_windows(self) -> WindowSchedule:
        """Window schedule actually trained: ddpo runs the whole chain from T."""
        if self.finetune.method == "ddpo":
            return WindowSchedule.full_chain(self.schedule.T, self.finetune.iterations)
        if self.finetune.method == "hrf-d" and self.windows.mode != "dynamic":
            return self.windows.model_copy(update={"mode": "dynamic"})
        return self.windows


class MetricsReport(BaseModel):
    run_id: str
    task: str
    method: str = Field(description="baseline | ddpo | hrf | hrf-d")
    preset: str = ""
    seed: int = 0
    num_samples: int
    mean_reward: float
    se_reward: float
    vendi_raw: float
    vendi_embed: float
    is_score: float
    mode_coverage: int
    config_hash: str = ""


# HTTP surface

class HealthResponse(BaseModel):
    status: str
    timestamp: str
    version: str
    runs_db: str


class RunSummary(BaseModel):
    run_id: str
    stage: str
    method: str
    preset: str = ""
    seed: int
    config_hash: str
    out_dir: str
    created_at: str
    metrics: Optional[Dict[str, float]] = None


class RunListResponse(BaseModel):
    runs: List[RunSummary]
    total: int


class StageRequest(BaseModel):
    """Execute one pipeline stage in the worker pool."""
    stage: Stage
    config_path: str = Field(description="INI run configuration")
    seed: Optional[int] = Field(default=None, ge=0)
    out_dir: Optional[str] = None
    preset: Optional[str] = None
    method: Optional[Method] = None
    pretrained_dir: Optional[str] = Field(default=None, description="Pretrain run directory (finetune)")

    class Config:
        json_schema_extra = {
            "examples": [
                {"stage": "pretrain", "config_path": "configs/ring_region.ini", "seed": 0, "out_dir": "runs/base"},
                {"stage": "finetune", "config_path": "configs/ring_region.ini", "method": "hrf", "preset": "baseline"},
            ]
        }


class StageResponse(BaseModel):
    run_id: str
    stage: str
    out_dir: str
    duration_ms: float
    metrics: Optional[Dict[str, float]] = None


class VendiRequest(BaseModel):
    samples: List[List[float]] = Field(min_length=2, description="Feature rows; cosine kernel on unit-normalized rows")


class VendiResponse(BaseModel):
    score: float
    n: int
    dim: int


class RewardRequest(BaseModel):
    reward: RewardSpec
    samples: List[List[float]] = Field(min_length=1)

    class Config:
        json_schema_extra = {
            "examples": [
                {"reward": {"kind": "region", "normal": [1.0, 0.0], "offset": 0.0}, "samples": [[0.0, 0.0], [3.0, 0.0]]}
            ]
        }


class RewardResponse(BaseModel):
    rewards: List[float]
    mean: float
