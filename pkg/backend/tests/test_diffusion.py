import math

import numpy as np
import pytest

from app import diffusion
from app.diffusion import DenoiserModel, NoiseSchedule
from app.errors import ConfigError, NumericalError
from app.nn_core import Layer, ParamSet


class FixedNoiseModel:
    """Stub denoiser that predicts a fixed noise array regardless of input."""

    def __init__(self, schedule, eps):
        self.schedule = schedule
        self.eps = np.asarray(eps, dtype=np.float64)
        self.data_dim = self.eps.shape[-1]
        self.state_id = "stub"

    def predict_noise(self, x, t):
        return np.broadcast_to(self.eps, np.shape(x)).copy()


def _zero_model(schedule, d=2, embed=4):
    layers = [Layer(np.zeros((d, d + embed)), np.zeros(d), "identity")]
    return DenoiserModel(ParamSet(layers), schedule, d, embed)


def test_default_schedule_reaches_near_isotropic_noise():
    schedule = diffusion.make_schedule(40, *diffusion.scaled_beta_range(40))
    assert schedule.T == 40
    assert schedule.alpha_bars[-1] < 0.05
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert np.all(schedule.sigmas > 0)


def test_two_step_schedule_hand_product():
    schedule = diffusion.make_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(schedule.alpha_bars, [0.5, 0.25])
    assert float(schedule.sigma(1)) == pytest.approx(math.sqrt(0.5))


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.3, 0.1), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_invalid_schedule_ranges(args):
    with pytest.raises(ConfigError):
        diffusion.make_schedule(*args)


def test_step_out_of_range(schedule):
    with pytest.raises(ConfigError):
        schedule.alpha_bar(0)
    with pytest.raises(ConfigError):
        schedule.beta(schedule.T + 1)


def test_forward_noise_edge_cases(schedule, rng):
    x0 = rng.standard_normal(3)
    eps = rng.standard_normal(3)
    ab = float(schedule.alpha_bar(5))
    np.testing.assert_allclose(diffusion.forward_noise(schedule, x0, 5, np.zeros(3)), math.sqrt(ab) * x0)
    np.testing.assert_allclose(diffusion.forward_noise(schedule, np.zeros(3), 5, eps), math.sqrt(1 - ab) * eps)


def test_forward_noise_moments_at_half_chain(schedule):
    t = schedule.T // 2
    rng = np.random.default_rng(t)
    n = 100_000
    x0 = np.array([1.5, -0.5])
    xt = diffusion.forward_noise(schedule, np.tile(x0, (n, 1)), t, rng.standard_normal((n, 2)))
    ab = float(schedule.alpha_bar(t))
    mean_se = math.sqrt((1 - ab) / n)
    assert np.all(np.abs(xt.mean(axis=0) - math.sqrt(ab) * x0) < 3 * mean_se)
    var_se = (1 - ab) * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(xt.var(axis=0, ddof=1) - (1 - ab)) < 3 * var_se)


def test_per_row_steps(schedule, rng):
    x0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    t = np.array([1, 4, 9])
    batched = diffusion.forward_noise(schedule, x0, t, eps)
    for i in range(3):
        np.testing.assert_allclose(batched[i], diffusion.forward_noise(schedule, x0[i], int(t[i]), eps[i]))


def test_ddpm_loss_of_zero_model_is_dimension(schedule):
    rng = np.random.default_rng(7)
    model = _zero_model(schedule, d=3)
    loss, grads = diffusion.ddpm_loss_step(model, rng.standard_normal((20_000, 3)), rng)
    assert loss == pytest.approx(3.0, abs=0.1)
    assert grads.matches(model.params)


def test_ddpm_loss_matches_finite_differences(schedule):
    rng = np.random.default_rng(3)
    layers = [Layer(np.array([[0.3, -0.2, 0.05]]), np.array([0.1]), "identity")]
    model = DenoiserModel(ParamSet(layers), schedule, 1, 2)
    x0 = rng.standard_normal((8, 1))
    t = rng.integers(1, schedule.T + 1, size=8)
    noise = rng.standard_normal((8, 1))
    _, grads = diffusion.ddpm_loss_step(model, x0, rng, t=t, noise=noise)

    w = model.params.layers[0].weight
    h = 1e-6
    for j in range(3):
        orig = w[0, j]
        w[0, j] = orig + h
        up, _ = diffusion.ddpm_loss_step(model, x0, rng, t=t, noise=noise)
        w[0, j] = orig - h
        down, _ = diffusion.ddpm_loss_step(model, x0, rng, t=t, noise=noise)
        w[0, j] = orig
        numeric = (up - down) / (2 * h)
        assert grads.weights[0][0, j] == pytest.approx(numeric, rel=1e-4)


def test_ddpm_loss_needs_batch(small_model, rng):
    with pytest.raises(ConfigError):
        diffusion.ddpm_loss_step(small_model, np.empty((0, 2)), rng)


def test_reverse_mean_zero_noise(schedule):
    model = FixedNoiseModel(schedule, np.zeros(2))
    x = np.array([0.4, -1.2])
    np.testing.assert_allclose(diffusion.reverse_mean(model, x, 3), x / math.sqrt(float(schedule.alpha(3))))


def test_reverse_mean_scalar_hand_computation():
    # alpha_1 = 0.99 gives alpha_bar_1 = 0.99; pick a second step with alpha_bar = 0.9
    a2 = 0.9 / 0.99
    schedule = NoiseSchedule([0.01, 1.0 - a2])
    model = FixedNoiseModel(schedule, np.array([0.5]))
    beta = 1.0 - a2
    expected = (1.0 - beta / math.sqrt(1.0 - 0.9) * 0.5) / math.sqrt(a2)
    assert diffusion.reverse_mean(model, np.array([1.0]), 2)[0] == pytest.approx(expected, abs=1e-12)


def test_predict_x0_round_trip_for_every_step(schedule, rng):
    x0 = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    model = FixedNoiseModel(schedule, eps)
    for t in range(1, schedule.T + 1):
        xt = diffusion.forward_noise(schedule, x0, t, eps)
        assert np.max(np.abs(diffusion.predict_x0(model, xt, t) - x0)) < 1e-9


def test_predict_x0_zero_noise(schedule):
    model = FixedNoiseModel(schedule, np.zeros(2))
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(diffusion.predict_x0(model, x, 4), x / math.sqrt(float(schedule.alpha_bar(4))))


def test_predict_x0_guard():
    schedule = NoiseSchedule(np.full(60, 0.999))
    model = FixedNoiseModel(schedule, np.zeros(1))
    with pytest.raises(NumericalError):
        diffusion.predict_x0(model, np.ones(1), 60)


@pytest.mark.parametrize("x, mean, sigma, expected", [
    ([0.0], [0.0], 1.0, -0.5 * math.log(2 * math.pi)),
    ([1.0, 0.0], [0.0, 0.0], 1.0, -math.log(2 * math.pi) - 0.5),
])
def test_gaussian_logprob_hand_values(x, mean, sigma, expected):
    assert diffusion.gaussian_logprob(np.array(x), np.array(mean), sigma) == pytest.approx(expected, abs=1e-12)


def test_gaussian_logprob_needs_positive_sigma():
    with pytest.raises(ConfigError):
        diffusion.gaussian_logprob(np.zeros(2), np.zeros(2), 0.0)


def test_noiseless_chain_of_zero_model(schedule, rng):
    model = FixedNoiseModel(schedule, np.zeros(2))
    x_T = np.array([0.3, -0.7])
    traj = diffusion.sample_trajectory(model, schedule.T, x_T, rng, noise_scale=0.0)
    np.testing.assert_allclose(traj.x0, x_T / np.prod(np.sqrt(schedule.alphas)))


def test_trajectory_records_and_logprobs(small_model, schedule):
    traj = diffusion.sample_trajectory(small_model, 6, np.array([0.5, 0.5]), np.random.default_rng(0))
    assert len(traj.records()) == 6
    assert traj.states.shape == (7, 2)
    np.testing.assert_array_equal(traj.steps, [6, 5, 4, 3, 2, 1])
    for k, t in enumerate(traj.steps):
        sigma = float(schedule.sigma(int(t)))
        recomputed = diffusion.gaussian_logprob(traj.states[k + 1], traj.means[k], sigma)
        assert abs(recomputed - traj.logprobs[k]) < 1e-9
        np.testing.assert_allclose(traj.means[k], diffusion.reverse_mean(small_model, traj.state_at(int(t)), int(t)))
    assert traj.snapshot_id == small_model.state_id


def test_sampling_is_deterministic_per_seed(small_model):
    a = diffusion.sample_trajectory(small_model, 10, np.ones(2), np.random.default_rng(11))
    b = diffusion.sample_trajectory(small_model, 10, np.ones(2), np.random.default_rng(11))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.logprobs, b.logprobs)


def test_sample_rejects_wrong_dimension(small_model, rng):
    with pytest.raises(ConfigError):
        diffusion.sample_trajectories(small_model, 5, np.ones((2, 3)), rng)


def test_snapshot_keeps_state_id_and_is_frozen(small_model):
    snap = small_model.snapshot()
    assert snap.state_id == small_model.state_id
    small_model.params.layers[0].weight += 0.1
    small_model.params.mark_updated()
    assert snap.state_id != small_model.state_id
    assert not np.array_equal(snap.params.layers[0].weight, small_model.params.layers[0].weight)


def test_denoiser_checkpoint_round_trip(small_model, schedule, tmp_path):
    path = small_model.save(tmp_path / "denoiser.bin")
    loaded = DenoiserModel.load(path, schedule, 2, 8)
    x = np.array([[0.1, 0.2]])
    np.testing.assert_array_equal(loaded.predict_noise(x, 3), small_model.predict_noise(x, 3))
    with pytest.raises(ConfigError):
        DenoiserModel.load(path, schedule, 3, 8)
