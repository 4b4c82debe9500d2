import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from app import metrics
from app.datasets import generate_dataset, ring_centers
from app.errors import ConfigError, UsageError
from app.metrics import Embedder
from app.models import DatasetSpec
from app.repository import read_csv


@pytest.fixture(scope="module")
def ring_embedder():
    spec = DatasetSpec(kind="ring")
    rng = np.random.default_rng(0)
    data = generate_dataset(spec, 4000, rng)
    embedder = Embedder.create(2, spec.modes, rng, hidden=(32, 16))
    accuracy = embedder.fit(data.samples, data.labels, rng, steps=800)
    return embedder, accuracy


def test_vendi_of_identical_vectors_is_one():
    assert metrics.vendi_score(np.tile([0.3, 0.4, 1.0], (12, 1))) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("n", [2, 5, 9])
def test_vendi_of_orthogonal_vectors_is_n(n):
    assert metrics.vendi_score(3.0 * np.eye(n)) == pytest.approx(n, abs=1e-6)


def test_vendi_hand_built_kernel():
    samples = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    expected = math.exp(-(2 / 3) * math.log(2 / 3) - (1 / 3) * math.log(1 / 3))
    assert metrics.vendi_score(samples) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(1.8899, abs=1e-4)


def test_vendi_primal_and_dual_paths_agree(rng):
    x = rng.standard_normal((30, 4))
    kernel_path = metrics.vendi_score_from_kernel(metrics.cosine_kernel(x))
    assert metrics.vendi_score(x) == pytest.approx(kernel_path, abs=1e-9)


def test_vendi_matches_independent_eigen_routine(rng):
    x = rng.standard_normal((50, 60))
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    lam = np.clip(np.linalg.eigvalsh(unit @ unit.T / 50), 0, None)
    lam = lam[lam > 0]
    assert metrics.vendi_score(x) == pytest.approx(math.exp(-np.sum(lam * np.log(lam))), abs=1e-9)


@given(seed=st.integers(0, 10_000), n=st.integers(2, 25), d=st.integers(1, 6))
def test_vendi_bounds_and_permutation_invariance(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d)) + 0.1
    score = metrics.vendi_score(x)
    assert 1.0 - 1e-9 <= score <= n + 1e-9
    assert metrics.vendi_score(x[rng.permutation(n)]) == pytest.approx(score, abs=1e-9)


def test_vendi_rejects_zero_features_and_tiny_sets():
    with pytest.raises(ConfigError):
        metrics.vendi_score(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ConfigError):
        metrics.vendi_score(np.ones((1, 3)))


def test_vendi_uses_feature_fn():
    samples = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    spread = metrics.vendi_score(samples, lambda x: np.eye(3))
    assert spread == pytest.approx(3.0, abs=1e-6)


def test_inception_score_extremes():
    assert metrics.inception_score_from_probs(np.tile([1.0, 0.0, 0.0], (10, 1))) == pytest.approx(1.0)
    assert metrics.inception_score_from_probs(np.tile(np.eye(4), (3, 1))) == pytest.approx(4.0)


def test_inception_score_hand_table():
    probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.5, 0.5]])
    marginal = probs.mean(axis=0)
    kl = [sum(p * math.log(p / m) for p, m in zip(row, marginal)) for row in probs]
    assert metrics.inception_score_from_probs(probs) == pytest.approx(math.exp(np.mean(kl)), abs=1e-12)


def test_embedder_training_and_scores(ring_embedder):
    embedder, accuracy = ring_embedder
    assert accuracy > 0.95
    data = generate_dataset(DatasetSpec(kind="ring"), 500, np.random.default_rng(9))
    probs = embedder.predict_proba(data.samples)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert embedder.embed(data.samples).shape == (500, 16)
    score = metrics.inception_style_score(data.samples, embedder)
    assert 5.0 < score <= embedder.num_classes + 1e-9
    collapsed = np.tile(ring_centers(8, 3.0)[:1], (50, 1))
    assert metrics.inception_style_score(collapsed, embedder) == pytest.approx(1.0, abs=1e-6)


def test_embedder_is_frozen_after_fit(ring_embedder, rng):
    embedder, _ = ring_embedder
    with pytest.raises(UsageError):
        embedder.fit(np.zeros((4, 2)), np.zeros(4, dtype=int), rng, steps=1)


def test_inception_score_guards(rng):
    untrained = Embedder.create(2, 3, rng)
    with pytest.raises(UsageError):
        metrics.inception_style_score(np.ones((20, 2)), untrained)
    trained = Embedder(untrained.params, trained=True)
    with pytest.raises(ConfigError):
        metrics.inception_style_score(np.ones((5, 2)), trained)


def test_embedder_checkpoint_round_trip(ring_embedder, tmp_path):
    embedder, _ = ring_embedder
    loaded = Embedder.load(embedder.save(tmp_path / "embedder.bin"))
    assert loaded.trained
    x = np.array([[3.0, 0.0], [0.0, -3.0]])
    np.testing.assert_array_equal(loaded.embed(x), embedder.embed(x))


def test_mode_coverage_cases():
    centers = ring_centers(8, 3.0)
    covered, hist = metrics.mode_coverage(centers, centers, 0.45)
    assert covered == 8
    np.testing.assert_array_equal(hist, np.ones(8))
    covered, hist = metrics.mode_coverage(np.tile(centers[2], (40, 1)), centers, 0.45)
    assert covered == 1
    assert hist[2] == 40


def test_generator_draw_covers_every_ring_mode():
    spec = DatasetSpec(kind="ring")
    data = generate_dataset(spec, 2000, np.random.default_rng(3))
    covered, _ = metrics.mode_coverage(data.samples, ring_centers(spec.modes, spec.radius), 3 * spec.sigma)
    assert covered == 8


def test_coverage_threshold_scales_with_sample_count():
    # 400 samples over 8 modes: a mode needs 400 / 32 = 12.5 samples
    assignments = np.array([0] * 388 + [1] * 12)
    covered, _ = metrics.coverage_from_assignments(assignments, 8, 400)
    assert covered == 1


def test_curve_schedule_contract():
    assert metrics.curve_schedule(300, 50, 200, 5, 50) == list(range(50, 201, 5)) + [250, 300]
    assert metrics.curve_schedule(120, 50, 200, 5, 50) == list(range(50, 121, 5))


def test_incremental_curve_on_constant_stream_is_flat(tmp_path):
    samples = np.tile([1.0, 2.0], (120, 1))
    schedule = [10, 20, 50, 120]
    curve = metrics.incremental_vendi_curve(samples, None, schedule)
    assert [n for n, _ in curve] == schedule
    assert all(v == pytest.approx(1.0, abs=1e-6) for _, v in curve)
    rows = read_csv(metrics.write_vendi_curve(curve, tmp_path / "curve.csv"))
    assert [int(r["n"]) for r in rows] == schedule


def test_incremental_curve_schedule_exceeding_samples():
    with pytest.raises(ConfigError):
        metrics.incremental_vendi_curve(np.ones((10, 2)), None, [5, 20])


def test_incremental_curve_plateaus_on_generator_data(ring_embedder):
    embedder, _ = ring_embedder
    data = generate_dataset(DatasetSpec(kind="ring"), 1000, np.random.default_rng(4))
    schedule = metrics.curve_schedule(1000)
    curve = metrics.incremental_vendi_curve(data.samples, embedder.embed, schedule)
    ns = np.array([n for n, _ in curve], dtype=float)
    vs = np.array([v for _, v in curve])
    quarter = len(curve) // 4
    early = (vs[quarter] - vs[0]) / (ns[quarter] - ns[0])
    late = (vs[-1] - vs[-quarter - 1]) / (ns[-1] - ns[-quarter - 1])
    assert abs(late) < 0.1 * abs(early) or abs(late) < 1e-3
