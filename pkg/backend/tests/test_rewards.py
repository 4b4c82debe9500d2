import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy.fft import idctn

from app import rewards
from app.datasets import generate_dataset
from app.errors import ConfigError, RewardError
from app.models import DatasetSpec, RewardSpec
from app.nn_core import Layer, ParamSet

SHAPE = (16, 16)


def test_region_reward_boundary_and_saturation():
    normal = [1.0, 0.0]
    assert rewards.region_reward(np.array([0.0, 5.0]), normal, 0.0) == pytest.approx(0.5)
    assert rewards.region_reward(np.array([50.0, 0.0]), normal, 0.0) > 0.999
    assert rewards.region_reward(np.array([-50.0, 0.0]), normal, 0.0) < 1e-3


def test_region_reward_is_symmetric_on_the_ring():
    data = generate_dataset(DatasetSpec(kind="ring"), 20_000, np.random.default_rng(5))
    values = rewards.region_reward(data.samples, [1.8478, 0.7654], 0.0)
    assert values.shape == (20_000,)
    assert values.mean() == pytest.approx(0.5, abs=0.02)


def test_region_reward_needs_normal():
    with pytest.raises(ConfigError):
        rewards.region_reward(np.zeros(2), [0.0, 0.0], 0.0)


def test_constant_image_only_pays_dc():
    x0 = np.full(SHAPE[0] * SHAPE[1], 0.6)
    pixel = (0.6 + 1.0) / 2.0 * 255.0 - 128.0
    dc = int(np.round(8.0 * pixel / 16.0))
    blocks = (SHAPE[0] // 8) * (SHAPE[1] // 8)
    assert rewards.dct_size_proxy(x0, SHAPE) == blocks * (1 + int(dc).bit_length())


@pytest.mark.parametrize("seed", range(10))
def test_noise_costs_more_than_flat(seed):
    noise = np.random.default_rng(seed).uniform(-1.0, 1.0, SHAPE[0] * SHAPE[1])
    flat = np.full(SHAPE[0] * SHAPE[1], 0.6)
    assert rewards.dct_size_proxy(noise, SHAPE) > rewards.dct_size_proxy(flat, SHAPE)


@given(seed=st.integers(0, 2**32 - 1), q=st.floats(0.25, 4.0))
def test_doubling_quantization_never_increases_length(seed, q):
    image = np.random.default_rng(seed).uniform(-1.0, 1.0, SHAPE[0] * SHAPE[1])
    assert rewards.dct_size_proxy(image, SHAPE, 2 * q) <= rewards.dct_size_proxy(image, SHAPE, q)


def _block_at_bin_centres(dc_level, ac_levels, q):
    coeffs = np.zeros((8, 8))
    coeffs[0, 0] = dc_level * q * rewards.LUMINANCE_TABLE[0, 0]
    for (i, j), level in zip([(0, 1), (1, 0), (1, 1)], ac_levels):
        coeffs[i, j] = level * q * rewards.LUMINANCE_TABLE[i, j]
    return idctn(coeffs, norm="ortho")


@given(dc_levels=st.tuples(st.integers(-3, 3), st.integers(-3, 3)),
       ac_levels=st.lists(st.integers(-2, 2), min_size=3, max_size=3),
       q=st.floats(0.5, 2.0), fraction=st.floats(-0.99, 0.99))
def test_sub_half_step_dc_shift_keeps_length(dc_levels, ac_levels, q, fraction):
    # An 8-pixel shift of the mean moves the DC coefficient by 8 * delta; half a step is 16q / 2.
    shape = (8, 16)
    left = _block_at_bin_centres(dc_levels[0], ac_levels, q)
    right = _block_at_bin_centres(dc_levels[1], ac_levels[::-1], q)
    pixels = np.hstack([left, right])
    shifted = pixels.copy()
    shifted[:, :8] += fraction * q

    def as_model_space(p):
        return ((p + 128.0) / 127.5 - 1.0).reshape(-1)

    assert rewards.dct_size_proxy(as_model_space(shifted), shape, q) == rewards.dct_size_proxy(
        as_model_space(pixels), shape, q)


def test_zero_run_accounting():
    # one block: DC 0, AC zigzag positions 1 and 4 non-zero
    row = np.zeros(64, dtype=np.int64)
    row[1], row[4] = 3, -1
    pixels_cost = 1 + (4 + 1 + 2) + (4 + 1 + 1) + 4
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(rewards, "quantized_blocks", lambda pixels, q: row[None, :])
        assert rewards.code_length_bits(np.zeros((8, 8)), 1.0) == pixels_cost


def test_pixel_range_is_clamped():
    bright = rewards.to_pixels(np.full(64, 5.0), (8, 8))
    dark = rewards.to_pixels(np.full(64, -5.0), (8, 8))
    assert np.all(bright == 127.0)
    assert np.all(dark == -128.0)


def test_dct_shape_must_be_block_multiple():
    with pytest.raises(ConfigError):
        rewards.dct_size_proxy(np.zeros(100), (10, 10))


def test_compress_and_incompress_have_opposite_signs():
    image = np.random.default_rng(0).uniform(-1, 1, (2, 256))
    small = rewards.make_reward_fn(RewardSpec(kind="dct_compress", grid_shape=SHAPE))
    large = rewards.make_reward_fn(RewardSpec(kind="dct_incompress", grid_shape=SHAPE))
    np.testing.assert_array_equal(small(image), -large(image))
    assert np.all(large(image) > 0)
    assert small.kind == "dct_compress"


def test_zero_weight_scorer_is_midpoint():
    params = ParamSet([Layer(np.zeros((4, 2)), np.zeros(4), "tanh"), Layer(np.zeros((1, 4)), np.zeros(1), "identity")])
    assert rewards.fixed_scorer(np.array([0.3, -2.0]), params) == pytest.approx(5.5)
    scores = rewards.fixed_scorer(np.ones((3, 2)), params)
    np.testing.assert_allclose(scores, 5.5)


def test_scorer_needs_checkpoint_and_single_output(rng):
    with pytest.raises(ConfigError):
        rewards.fixed_scorer(np.zeros(2), None)
    with pytest.raises(ConfigError):
        rewards.fixed_scorer(np.zeros(2), ParamSet.initialise([2, 2], ["identity"], rng))


def test_trained_ring_scorer_prefers_ring_points():
    params, val_mse = rewards.train_ring_scorer(3.0, np.random.default_rng(0), steps=1500)
    angles = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    on_ring = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    off_ring = np.vstack([np.zeros((1, 2)), 0.5 * on_ring[:4], 1.4 * on_ring[:4]])
    on_scores = rewards.fixed_scorer(on_ring, params)
    off_scores = rewards.fixed_scorer(off_ring, params)
    assert on_scores.min() > off_scores.max()
    assert np.all((on_scores >= 1.0) & (on_scores <= 10.0))
    np.testing.assert_array_equal(rewards.fixed_scorer(on_ring, params), on_scores)
    assert val_mse < 3.0


def test_evaluate_rewards_discards_bad_batches():
    x = np.zeros((3, 2))
    with pytest.raises(RewardError):
        rewards.evaluate_rewards(lambda v: np.array([1.0, np.nan, 0.0]), x)
    with pytest.raises(RewardError):
        rewards.evaluate_rewards(lambda v: np.ones(2), x)

    def broken(v):
        raise KeyError("scorer offline")

    with pytest.raises(RewardError):
        rewards.evaluate_rewards(broken, x)
    np.testing.assert_array_equal(rewards.evaluate_rewards(lambda v: v[:, 0] + 1.0, x), np.ones(3))


@pytest.mark.parametrize("kwargs", [
    {"kind": "dct_compress"},
    {"kind": "dct_compress", "grid_shape": (12, 12)},
    {"kind": "region", "normal": [0.0, 0.0]},
    {"kind": "fixed_scorer"},
    {"kind": "region", "offset": float("inf")},
])
def test_reward_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        RewardSpec(**kwargs)
