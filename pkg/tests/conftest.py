import os

import hypothesis
import numpy as np
import pytest

from morphcl.schemas import ActivationKind, Architecture, RunConfig
from morphcl.services.netcore import init_network
from morphcl.services.tasks import make_task_sequence, split_sequence

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=15, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


TINY_CONFIG = {
    "experiment": "sine2",
    "conditions": ["C1", "C4"],
    "seeds": [0],
    "epochs_per_task": 12,
    "batch_size": 32,
    "samples_per_task": 120,
    "hidden": [8, 8],
    "lr": 1e-3,
    "warmup_epochs": 3,
    "loss_window": 3,
    "ab_epochs": 5,
    "eval_every": 5,
    "buffer_size": 1000,
    "search": {"max_rounds": 1, "eval_epochs": 3, "eval_subset_size": 32, "step_size": 4, "multiples": [1]},
}


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig.model_validate(TINY_CONFIG)


@pytest.fixture
def small_net():
    return init_network(Architecture.parse([1, 8, 8, 1]), ActivationKind.TANH, 0)


@pytest.fixture
def sine_tasks():
    tasks = make_task_sequence("sine", 2, 0, samples_per_task=200)
    return split_sequence(tasks, 0.8, 0)


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "runs"
    path.mkdir()
    return path
