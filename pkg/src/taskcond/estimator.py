"""Scikit-learn style front door for the expert-pool classifier."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import split_tasks
from .multiview import default_view_set, identity_view_set
from .network import TrainConfig
from .pool import ExpertPool, ReplayConfig
from .validation import check_matrix, check_same_length


class TaskConditionalClassifier(BaseEstimator, ClassifierMixin):
    """Continual classifier that grows one frozen expert per task.

    `fit` trains the whole task sequence at once (``tasks`` gives the
    class grouping); `fit_task` adds tasks incrementally.  `predict`
    runs per-sample mixture inference over all learned experts, so no
    task label is needed at test time.

    Parameters mirror the pool: `views` is "all", "none", or a list of
    view kind names, applied only when `image_shape` is set; `lam`
    weighs the task-likelihood term of the training objective; `cf`
    calibrates each expert's acceptance threshold.
    """

    def __init__(
        self,
        hidden_widths=(200, 200, 256),
        lam=0.1,
        learning_rate=1e-3,
        epochs=10,
        batch_size=128,
        optimizer="adam",
        n_kernels=None,
        views="all",
        inference_repeats=10,
        image_shape=None,
        cf=4.0,
        calibration_block_size=10,
        likelihood_variant="unit",
        gate_statistic="likelihood",
        exemplar_cap=None,
        activation="relu",
        cov_diag=1.0,
        seed=0,
    ):
        self.hidden_widths = hidden_widths
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.n_kernels = n_kernels
        self.views = views
        self.inference_repeats = inference_repeats
        self.image_shape = image_shape
        self.cf = cf
        self.calibration_block_size = calibration_block_size
        self.likelihood_variant = likelihood_variant
        self.gate_statistic = gate_statistic
        self.exemplar_cap = exemplar_cap
        self.activation = activation
        self.cov_diag = cov_diag
        self.seed = seed

    # -- construction helpers ------------------------------------------------

    def _build_view_set(self):
        if self.image_shape is None or self.views == "none":
            return identity_view_set(self.image_shape)
        kinds = None if self.views == "all" else list(self.views)
        return default_view_set(
            self.image_shape,
            inference_repeats=self.inference_repeats,
            seed=self.seed,
            kinds=kinds,
        )

    def _make_pool(self):
        train_config = TrainConfig(
            lam=self.lam,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            optimizer=self.optimizer,
            seed=self.seed,
        )
        return ExpertPool(
            view_set=self._build_view_set(),
            train_config=train_config,
            hidden_widths=self.hidden_widths,
            n_kernels=self.n_kernels,
            activation=self.activation,
            cov_diag=self.cov_diag,
            likelihood_variant=self.likelihood_variant,
            gate_statistic=self.gate_statistic,
            cf=self.cf,
            calibration_block_size=self.calibration_block_size,
            exemplar_cap=self.exemplar_cap,
            seed=self.seed,
        )

    def _fitted_pool(self):
        pool = getattr(self, "pool_", None)
        if pool is None or pool.n_experts == 0:
            raise NotFittedError("fit or fit_task must run before inference")
        return pool

    def _sync_classes(self):
        self.classes_ = np.asarray(self.pool_.global_classes)
        self.n_features_in_ = self.pool_.entries[0].net.input_dim

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y, tasks=None):
        """Train one expert per task group; default is a single task."""
        X = check_matrix(X, "X", min_rows=2)
        check_same_length(X, y)
        y = np.asarray(y)
        if tasks is None:
            tasks = [tuple(int(c) for c in np.unique(y))]
        self.pool_ = self._make_pool()
        for t, group in enumerate(tasks):
            mask = np.isin(y, np.asarray(group))
            if not np.any(mask):
                raise ValueError(f"task {t} classes {tuple(group)} have no samples")
            self.pool_.learn_task(X[mask], y[mask], task_id=t)
        self._sync_classes()
        return self

    def fit_task(self, X, y, task_id=None):
        """Add one expert for a new task with unseen class labels."""
        if getattr(self, "pool_", None) is None:
            self.pool_ = self._make_pool()
        self.pool_.learn_task(X, y, task_id=task_id)
        self._sync_classes()
        return self

    def predict(self, X):
        labels, _ = self._fitted_pool().infer_mixture(check_matrix(X))
        return labels

    def predict_proba(self, X):
        _, scores = self._fitted_pool().infer_mixture(check_matrix(X))
        total = scores.sum(axis=1, keepdims=True)
        uniform = np.full_like(scores, 1.0 / scores.shape[1])
        return np.where(total > 0, scores / np.where(total > 0, total, 1.0), uniform)

    def task_likelihoods(self, X, rng_key=0):
        """Block-mean task likelihood under each learned expert."""
        return self._fitted_pool().pool_likelihoods(check_matrix(X), rng_key=rng_key)

    def predict_block(self, X, rng_key=0):
        """Selection-mode prediction for one block of same-task samples."""
        return self._fitted_pool().infer_selection(check_matrix(X), rng_key=rng_key)

    def replay(self, **kwargs):
        """Exemplar replay over all learned experts; see ReplayConfig."""
        self._fitted_pool().replay(ReplayConfig(**kwargs))
        return self


def fit_task_sequence(estimator, task_sequence):
    """Fit an estimator over a TaskSequence's training splits, in order."""
    for task in task_sequence:
        estimator.fit_task(task.X_train, task.y_train, task_id=task.task_id)
    return estimator


__all__ = ["TaskConditionalClassifier", "fit_task_sequence", "split_tasks"]
