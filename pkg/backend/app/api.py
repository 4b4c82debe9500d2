"""
FastAPI endpoints for the fine-tuning lab: run index, pipeline stages, metric utilities
"""
import logging
import time
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query

from .config import load_run_config
from .errors import ConfigError, HRFError, NumericalError, RewardError, UsageError
from .logging_config import configure_logging
from .metrics import vendi_score
from .models import (
    HealthResponse,
    RewardRequest,
    RewardResponse,
    RunListResponse,
    RunSummary,
    StageRequest,
    StageResponse,
    VendiRequest,
    VendiResponse,
)
from .pipeline import VERSION, run_pipeline
from .repository import count_runs, get_run, list_runs, now_iso_utc, run_db
from . import repository
from .rewards import evaluate_rewards, make_reward_fn

configure_logging()
logger = logging.getLogger(__name__)

app = FastAPI(
    title="Hierarchical Reward Fine-tuning Lab API",
    description="Pretrain, fine-tune and evaluate toy diffusion models with DDPO, HRF and HRF-D",
    version=VERSION,
)


@app.get("/", response_model=dict)
async def root():
    """Root endpoint with API information"""
    return {
        "message": "Hierarchical Reward Fine-tuning Lab API",
        "version": VERSION,
        "endpoints": {
            "/health": "GET - Health check",
            "/runs": "GET - List recorded runs; POST - Execute a pipeline stage",
            "/runs/{run_id}/metrics": "GET - Recorded stages and metrics of one run",
            "/metrics/vendi": "POST - Vendi score of feature rows",
            "/rewards/evaluate": "POST - Evaluate a reward on samples",
            "/docs": "GET - Interactive API documentation",
        },
    }


@app.get("/health", response_model=HealthResponse)
async def health_check():
    return HealthResponse(status="healthy", timestamp=now_iso_utc(), version=VERSION, runs_db=repository.DB_PATH)


@app.get("/runs", response_model=RunListResponse)
async def runs_list(
    page: int = Query(1, ge=1),
    per_page: int = Query(50, ge=1, le=500),
    method: Optional[str] = Query(None, description="Filter by method label (baseline, ddpo, hrf, hrf-d)"),
):
    offset = (page - 1) * per_page
    total = await run_db(count_runs, method)
    rows = await run_db(list_runs, offset, per_page, method)
    return RunListResponse(runs=[RunSummary(**r) for r in rows], total=total)


@app.get("/runs/{run_id}/metrics", response_model=RunListResponse)
async def run_metrics(run_id: str):
    rows = await run_db(get_run, run_id)
    if not rows:
        logger.error(f"RUN NOT FOUND: run_id={run_id}")
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' not found")
    return RunListResponse(runs=[RunSummary(**r) for r in rows], total=len(rows))


def _execute_stage(request: StageRequest):
    config = load_run_config(request.config_path, seed=request.seed, out_dir=request.out_dir,
                             preset=request.preset, method=request.method,
                             pretrained_dir=request.pretrained_dir)
    return run_pipeline(config, request.stage)


@app.post("/runs", response_model=StageResponse)
async def run_stage(request: StageRequest):
    """
    Execute one pipeline stage synchronously in the worker pool.

    Raises:
        HTTPException: 400 on configuration errors or missing artifacts, 500 when the run aborts
    """
    endpoint_start = time.time()
    logger.info(f"STAGE REQUEST: stage={request.stage}, config={request.config_path}, seed={request.seed}, "
                f"method={request.method}, preset={request.preset}")
    try:
        result = await run_db(_execute_stage, request)
        duration_ms = (time.time() - endpoint_start) * 1000
        logger.info(f"STAGE COMPLETE: run_id={result.run_id}, stage={result.stage}, duration={duration_ms:.0f}ms, status=200")
        return StageResponse(run_id=result.run_id, stage=result.stage, out_dir=str(result.out_dir),
                             duration_ms=duration_ms, metrics=result.metrics)
    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"CONFIG ERROR: error='{e}', duration={time.time() - endpoint_start:.4f}s")
        raise HTTPException(status_code=400, detail=str(e))
    except (NumericalError, RewardError, UsageError) as e:
        logger.error(f"RUN ABORTED: type={type(e).__name__}, error='{e}', duration={time.time() - endpoint_start:.4f}s")
        raise HTTPException(status_code=500, detail=f"Run aborted: {e}")


@app.post("/metrics/vendi", response_model=VendiResponse)
async def vendi_endpoint(request: VendiRequest):
    try:
        samples = np.asarray(request.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ConfigError("samples must be a rectangular list of rows")
        score = vendi_score(samples)
        return VendiResponse(score=score, n=samples.shape[0], dim=samples.shape[1])
    except (ConfigError, ValueError) as e:
        logger.error(f"VENDI REQUEST FAILED: error='{e}'")
        raise HTTPException(status_code=400, detail=str(e))
    except HRFError as e:
        logger.error(f"VENDI INTERNAL ERROR: error='{e}'")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/rewards/evaluate", response_model=RewardResponse)
async def reward_endpoint(request: RewardRequest):
    if request.reward.kind == "fixed_scorer":
        raise HTTPException(status_code=400, detail="fixed_scorer rewards need a checkpoint; use the CLI")
    try:
        samples = np.asarray(request.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ConfigError("samples must be a rectangular list of rows")
        spec = request.reward
        expected = len(spec.normal) if spec.kind == "region" else spec.grid_shape[0] * spec.grid_shape[1]
        if samples.shape[1] != expected:
            raise ConfigError(f"{spec.kind} reward expects rows of dimension {expected}, got {samples.shape[1]}")
        values = evaluate_rewards(make_reward_fn(request.reward), samples)
        return RewardResponse(rewards=values.tolist(), mean=float(values.mean()))
    except (ConfigError, ValueError) as e:
        logger.error(f"REWARD REQUEST FAILED: kind={request.reward.kind}, error='{e}'")
        raise HTTPException(status_code=400, detail=str(e))
    except RewardError as e:
        logger.error(f"REWARD EVALUATION FAILED: kind={request.reward.kind}, error='{e}'")
        raise HTTPException(status_code=500, detail=str(e))
