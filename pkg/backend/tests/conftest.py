import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from app import repository
from app.diffusion import DenoiserModel, make_schedule

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schedule():
    return make_schedule(10, 1e-3, 0.3)


@pytest.fixture
def small_model(schedule, rng):
    return DenoiserModel.create(schedule, 2, rng, hidden=[16, 16], time_embed_dim=8)


@pytest.fixture(autouse=True)
def isolated_run_index(tmp_path, monkeypatch):
    monkeypatch.setattr(repository, "DB_PATH", str(tmp_path / "runs.db"))


TINY_RUN_INI = """
[run]
name = tiny
seed = 3

[dataset]
kind = ring

[schedule]
T = 10

[model]
hidden = [32, 32]
time_embed_dim = 8

[pretrain]
steps = 300
batch_size = 64
dataset_size = 600
embedder_steps = 200

[reward]
kind = region

[mdp]
clip_range = 0.2
batch_size = 4
num_batches = 2

[windows]
clusters = [[2, 4], [6, 8]]
iterations_per_cluster = [1, 1]
candidate_stride = 3
rollouts_per_step = 2

[finetune]
method = hrf
iterations = 2

[eval]
num_samples = 60
curve_start = 10
curve_switch = 40
curve_step = 10
curve_coarse_step = 10

[inject]
steps = [8, 5, 2]
trajectories = 4
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_RUN_INI)
    return path
