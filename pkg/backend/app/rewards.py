"""
Scalar rewards evaluated on final samples x_0 only: a smooth half-plane preference,
a block-DCT code-length proxy (compressibility / incompressibility), and a frozen
MLP scorer squashed into [1, 10].
"""
import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dctn
from scipy.special import expit

from . import nn_core
from .errors import ConfigError, RewardError
from .models import RewardSpec
from .nn_core import OptimizerState, ParamSet

logger = logging.getLogger(__name__)

RewardFn = Callable[[np.ndarray], np.ndarray]

BLOCK = 8
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

RUN_SYMBOL_BITS = 4
SIZE_SYMBOL_BITS = 4
SCORE_MIN, SCORE_MAX = 1.0, 10.0


def _zigzag_order(n: int = BLOCK) -> np.ndarray:
    cells = [(i, j) for i in range(n) for j in range(n)]
    cells.sort(key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else ij[1]))
    return np.array([i * n + j for i, j in cells])


ZIGZAG = _zigzag_order()


def region_reward(x0: np.ndarray, normal: Sequence[float], offset: float) -> np.ndarray:
    """sigmoid(normal . x0 - offset); rows of a 2-D input are scored independently."""
    normal = np.asarray(normal, dtype=np.float64)
    if not np.linalg.norm(normal) > 0.0:
        raise ConfigError("region_reward needs a non-zero normal")
    return expit(np.asarray(x0, dtype=np.float64) @ normal - offset)


def to_pixels(x0: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Map model space [-1, 1] to level-shifted 8-bit pixels (clamped to [0, 1] first)."""
    h, w = shape
    x = np.asarray(x0, dtype=np.float64).reshape(h, w)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0) * 255.0 - 128.0


def quantized_blocks(pixels: np.ndarray, quant_scale: float) -> np.ndarray:
    """Quantized type-II DCT coefficients, one zigzag-ordered row of 64 per 8x8 block."""
    h, w = pixels.shape
    if h % BLOCK or w % BLOCK:
        raise ConfigError(f"Grid shape {pixels.shape} is not a multiple of {BLOCK}")
    if not quant_scale > 0:
        raise ConfigError(f"Quantization scale must be positive, got {quant_scale}")
    blocks = pixels.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2).reshape(-1, BLOCK, BLOCK)
    coeffs = dctn(blocks, type=2, norm="ortho", axes=(1, 2))
    quantized = np.round(coeffs / (quant_scale * LUMINANCE_TABLE))
    return quantized.reshape(-1, BLOCK * BLOCK)[:, ZIGZAG].astype(np.int64)


def _bit_length(values: np.ndarray) -> np.ndarray:
    mags = np.abs(values)
    out = np.zeros(mags.shape, dtype=np.int64)
    nz = mags > 0
    out[nz] = np.floor(np.log2(mags[nz])).astype(np.int64) + 1
    return out


def code_length_bits(pixels: np.ndarray, quant_scale: float) -> int:
    """
    Estimated entropy-coded size. Per block: DC pays 1 + bitlen(|DC|); every non-zero AC
    coefficient pays a size symbol plus 1 + bitlen(|c|); each zero run that precedes a
    non-zero AC pays a run symbol; trailing zeros are free (end of block).
    """
    total = 0
    for row in quantized_blocks(pixels, quant_scale):
        total += 1 + int(_bit_length(row[:1])[0])
        ac = row[1:]
        nz = np.flatnonzero(ac)
        if nz.size == 0:
            continue
        total += int(np.sum(SIZE_SYMBOL_BITS + 1 + _bit_length(ac[nz])))
        gaps = np.diff(np.concatenate(([-1], nz))) - 1
        total += RUN_SYMBOL_BITS * int(np.count_nonzero(gaps))
    return total


def dct_size_proxy(x0: np.ndarray, shape: Tuple[int, int], quant_scale: float = 1.0) -> int:
    return code_length_bits(to_pixels(x0, shape), quant_scale)


def scorer_output(params: ParamSet, x0: np.ndarray) -> np.ndarray:
    raw, _ = nn_core.forward(params, np.atleast_2d(x0))
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * expit(raw[:, 0])


def fixed_scorer(x0: np.ndarray, params: Optional[ParamSet]) -> np.ndarray:
    """Frozen MLP score in [1, 10]."""
    if params is None:
        raise ConfigError("fixed_scorer needs a loaded scorer checkpoint")
    if params.output_dim != 1:
        raise ConfigError(f"Scorer must have a single output, got {params.output_dim}")
    scores = scorer_output(params, x0)
    return scores if np.ndim(x0) == 2 else float(scores[0])


def ring_proximity_target(x: np.ndarray, radius: float, width: float = 0.5) -> np.ndarray:
    dist = np.linalg.norm(x, axis=1) - radius
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * np.exp(-0.5 * (dist / width) ** 2)


def train_ring_scorer(radius: float, rng: np.random.Generator, steps: int = 2000, batch_size: int = 256,
                      hidden: Sequence[int] = (32, 32), learning_rate: float = 5e-3) -> Tuple[ParamSet, float]:
    """
    Fit a scorer that rates 2-D points by closeness to the ring of the given radius.
    Returns (params, validation mean-squared error on a held-out draw).
    """
    sizes = [2, *hidden, 1]
    params = ParamSet.initialise(sizes, ["tanh"] * len(hidden) + ["identity"], rng)
    state = OptimizerState.for_params(params, learning_rate=learning_rate, weight_decay=0.0, clip_norm=None)
    span = radius * 1.5
    for step in range(1, steps + 1):
        x = rng.uniform(-span, span, size=(batch_size, 2))
        target = ring_proximity_target(x, radius)
        raw, tape = nn_core.forward(params, x)
        s = expit(raw[:, 0])
        score = SCORE_MIN + (SCORE_MAX - SCORE_MIN) * s
        grad_score = 2.0 * (score - target) / batch_size
        grad_raw = grad_score * (SCORE_MAX - SCORE_MIN) * s * (1.0 - s)
        nn_core.optimizer_step(state, params, nn_core.backward(params, tape, grad_raw[:, None]))
        if step % 500 == 0:
            logger.info(f"SCORER TRAINING: step={step}, mse={np.mean((score - target) ** 2):.4f}")
    x_val = rng.uniform(-span, span, size=(1000, 2))
    val_mse = float(np.mean((scorer_output(params, x_val) - ring_proximity_target(x_val, radius)) ** 2))
    logger.info(f"SCORER READY: radius={radius}, val_mse={val_mse:.4f}")
    return params, val_mse


def make_reward_fn(spec: RewardSpec, scorer: Optional[ParamSet] = None) -> RewardFn:
    """Batch reward callable: (n, d) final samples -> (n,) rewards."""
    if spec.kind == "region":
        def reward(x0):
            return region_reward(x0, spec.normal, spec.offset)
    elif spec.kind in ("dct_compress", "dct_incompress"):
        sign = -1.0 if spec.kind == "dct_compress" else 1.0
        shape = tuple(spec.grid_shape)

        def reward(x0):
            return sign * np.array([dct_size_proxy(row, shape, spec.quant_scale) for row in np.atleast_2d(x0)],
                                   dtype=np.float64)
    elif spec.kind == "fixed_scorer":
        if scorer is None:
            scorer = nn_core.load_params(spec.scorer_path)

        def reward(x0):
            return fixed_scorer(np.atleast_2d(x0), scorer)
    else:
        raise ConfigError(f"Unknown reward kind {spec.kind}")
    reward.kind = spec.kind
    return reward


def evaluate_rewards(reward_fn: RewardFn, x0: np.ndarray) -> np.ndarray:
    """Evaluate a whole batch; any failure or non-finite value discards the batch."""
    x0 = np.atleast_2d(x0)
    try:
        values = np.asarray(reward_fn(x0), dtype=np.float64).reshape(-1)
    except RewardError:
        raise
    except Exception as e:
        raise RewardError(f"Reward evaluation failed on a batch of {len(x0)}: {e}") from e
    if values.shape[0] != x0.shape[0]:
        raise RewardError(f"Reward function returned {values.shape[0]} values for {x0.shape[0]} samples")
    if not np.all(np.isfinite(values)):
        raise RewardError(f"Reward function returned non-finite values for {int(np.sum(~np.isfinite(values)))} samples")
    return values
