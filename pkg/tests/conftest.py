"""Shared fixtures: small synthetic task sets that train in seconds."""

import numpy as np
import pytest

from taskcond.data import make_synthetic_tasks, split_synthetic
from taskcond.network import TrainConfig
from taskcond.pool import ExpertPool


def tiny_tasks(
    n_tasks=2,
    seed=0,
    samples_per_class=60,
    n_features=6,
    task_separation=8.0,
    class_separation=4.0,
):
    raw = make_synthetic_tasks(
        n_tasks=n_tasks,
        classes_per_task=2,
        samples_per_class=samples_per_class,
        n_features=n_features,
        task_separation=task_separation,
        class_separation=class_separation,
        seed=seed,
    )
    return split_synthetic(raw, test_fraction=0.25, seed=seed)


def tiny_pool(n_tasks=2, seed=0, task_kwargs=None, **overrides):
    """Train a small pool on Gaussian-cluster tasks."""
    tasks = tiny_tasks(n_tasks=n_tasks, seed=seed, **(task_kwargs or {}))
    kwargs = dict(
        train_config=TrainConfig(lam=0.1, learning_rate=3e-3, batch_size=32, epochs=20, seed=seed),
        hidden_widths=(16,),
        activation="tanh",
        cov_diag=0.5,
        seed=seed,
    )
    kwargs.update(overrides)
    pool = ExpertPool(**kwargs)
    for task in tasks:
        pool.learn_task(task.X_train, task.y_train, task_id=task.task_id)
    return pool, tasks


@pytest.fixture(scope="session")
def trained_pool():
    """A 3-task pool shared by read-only tests."""
    return tiny_pool(n_tasks=3, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
