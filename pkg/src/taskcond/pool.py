"""A growable pool of frozen per-task experts.

Each learned task gets its own expert (backbone, classifier head, and
kernel likelihood layer) trained jointly on that task's multi-view
augmented data, then frozen.  Earlier experts are never touched by later
learning, which removes forgetting by construction.

Inference needs no task label: every expert scores the input under its
own views and feature statistics, and either the per-sample mixture
(classifier posteriors weighted by task likelihood, averaged over views)
or the per-block selection (argmax-likelihood expert gated by its
calibrated threshold) produces the prediction.

Replay retraining widens the gating margin: each expert revisits stored
exemplars of every task, keeping its likelihood high in-task while
pushing it down on out-task samples.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import network
from .data import exemplar_sample
from .detect import Threshold, calibrate, tlf
from .linalg import make_rng, softmax_rows
from .multiview import (
    FeatureStats,
    ViewSet,
    augment_batch,
    identity_view_set,
    fit_feature_stats,
    inference_variants,
)
from .network import TrainConfig, init_expert, train_epochs
from .validation import check_matrix, check_same_length

GATE_STATISTICS = ("likelihood", "softmax")

DEFAULT_IMAGE_EXEMPLAR_CAP = 2000
DEFAULT_TABULAR_EXEMPLAR_CAP = 45

POOL_MANIFEST = "manifest.json"
POOL_FORMAT_VERSION = 1


@dataclass
class Prediction:
    """Outcome of one inference call."""

    global_label: np.ndarray
    per_expert_likelihood: np.ndarray
    selected_expert: int
    gated: bool


@dataclass
class ExpertEntry:
    net: network.ExpertNetwork
    view_set: ViewSet
    stats: FeatureStats
    threshold: Threshold = None
    task_id: int = 0
    report: network.TrainingReport = None

    @property
    def classes(self):
        return tuple(self.net.class_map)


@dataclass
class ReplayConfig:
    """Exemplar replay settings.

    lambda_replay is deliberately large: in-task passes strengthen the
    likelihood term, out-task passes (classifier inactive) push the
    likelihood down.  freeze_classifier pins the classifier head
    entirely instead of relying on the relative down-weighting.
    """

    lambda_replay: float = 5.0
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    freeze_classifier: bool = False
    calibration_block_size: int = 10
    augment: bool = True

    def __post_init__(self):
        if self.lambda_replay <= 0:
            raise ValueError("lambda_replay must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.calibration_block_size < 1:
            raise ValueError("calibration_block_size must be >= 1")


class ExpertPool:
    """Ordered experts with disjoint class sets, plus their exemplars."""

    def __init__(
        self,
        view_set=None,
        train_config=None,
        hidden_widths=(200, 200, 256),
        n_kernels=None,
        activation="relu",
        cov_diag=1.0,
        likelihood_variant="unit",
        gate_statistic="likelihood",
        cf=4.0,
        calibration_block_size=10,
        exemplar_cap=None,
        seed=0,
    ):
        if gate_statistic not in GATE_STATISTICS:
            raise ValueError(f"gate_statistic must be one of {GATE_STATISTICS}")
        self.view_set = view_set if view_set is not None else identity_view_set()
        self.train_config = train_config if train_config is not None else TrainConfig()
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.n_kernels = n_kernels
        self.activation = activation
        self.cov_diag = cov_diag
        self.likelihood_variant = likelihood_variant
        self.gate_statistic = gate_statistic
        self.cf = float(cf)
        self.calibration_block_size = int(calibration_block_size)
        self.exemplar_cap = exemplar_cap
        self.seed = int(seed)
        self.entries = []
        self.exemplars = {}

    # -- bookkeeping --------------------------------------------------------

    @property
    def n_experts(self):
        return len(self.entries)

    def learned_labels(self):
        return [e.task_id for e in self.entries]

    def thresholds(self):
        return [e.threshold for e in self.entries]

    @property
    def global_classes(self):
        out = []
        for e in self.entries:
            out.extend(e.classes)
        return tuple(sorted(out))

    def classes_of(self, k):
        return self.entries[k].classes

    def _require_experts(self):
        if not self.entries:
            raise ValueError("expert pool is empty")

    def _derived_seed(self, *key):
        return int(make_rng(self.seed, *key).integers(0, 2**63 - 1))

    @staticmethod
    def _set_frozen(net, frozen):
        for _, arr in net.parameters():
            arr.flags.writeable = not frozen

    def parameter_hash(self, k):
        """Digest of expert k's parameters; unchanged means untouched."""
        digest = hashlib.sha256()
        for name, arr in self.entries[k].net.parameters():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    # -- learning -----------------------------------------------------------

    def learn_task(self, X, y, task_id=None, train_config=None):
        """Train, calibrate, and freeze one new expert on one task.

        Labels are global; they must not collide with any learned
        expert's classes.  Returns the new expert's index.
        """
        X = check_matrix(X, "X", min_rows=2)
        check_same_length(X, y)
        y = np.asarray(y)
        classes = tuple(int(c) for c in np.unique(y))
        taken = set(self.global_classes)
        overlap = taken.intersection(classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} already owned by the pool")

        k = self.n_experts
        task_id = k if task_id is None else int(task_id)
        view_set = dataclasses.replace(self.view_set)
        stats = None
        if view_set.image_shape is not None and view_set.needs_stats():
            stats = fit_feature_stats(X, task_id=task_id)

        tc = train_config if train_config is not None else self.train_config
        tc = dataclasses.replace(tc, seed=self._derived_seed(53, k))
        net = init_expert(
            input_dim=X.shape[1],
            hidden_widths=self.hidden_widths,
            class_map=classes,
            n_kernels=self.n_kernels,
            activation=self.activation,
            cov_diag=self.cov_diag,
            likelihood_variant=self.likelihood_variant,
            task_id=task_id,
            seed=tc.seed,
        )
        local = {c: i for i, c in enumerate(classes)}
        y_local = np.asarray([local[int(v)] for v in y], dtype=np.int64)

        def hook(epoch, rng):
            parts = augment_batch(view_set, stats, X, rng)
            return np.vstack(parts), np.tile(y_local, len(parts))

        report = train_epochs(net, X, y_local, tc, batch_hook=hook)
        self._set_frozen(net, True)
        entry = ExpertEntry(net=net, view_set=view_set, stats=stats, task_id=task_id)
        self.entries.append(entry)
        self._calibrate_entry(k, X, self.calibration_block_size, self.cf)

        cap = self.exemplar_cap
        if cap is None:
            cap = (
                DEFAULT_IMAGE_EXEMPLAR_CAP
                if view_set.image_shape is not None
                else DEFAULT_TABULAR_EXEMPLAR_CAP
            )
        self.exemplars[k] = exemplar_sample(X, y, cap, self._derived_seed(59, k))
        entry.report = report
        return k

    def learn_task_from_blocks(self, blocks, detector_config):
        """Train a new expert from buffered novel stream blocks."""
        X = np.vstack([b.X for b in blocks])
        y = np.concatenate([np.asarray(b.y) for b in blocks])
        k = self.learn_task(X, y)
        self._calibrate_entry(k, X, detector_config.block_size, detector_config.cf)
        return k

    def _calibrate_entry(self, k, X, block_size, cf):
        """Threshold from per-block likelihood means over the task's data."""
        entry = self.entries[k]
        n = X.shape[0]
        n_blocks = n // block_size
        if n_blocks < 2:
            raise ValueError(
                f"need at least 2 calibration blocks of size {block_size}, have {n} samples"
            )
        order = make_rng(self.seed, 43, k).permutation(n)
        means = []
        for b in range(n_blocks):
            idx = order[b * block_size : (b + 1) * block_size]
            rng = make_rng(self.seed, 43, k, b + 1)
            like_views, _ = self._entry_eval(entry, X[idx], rng)
            means.append(float(like_views.mean(axis=0).mean()))
        entry.threshold = calibrate(means, cf=cf, expert=k)

    # -- evaluation ---------------------------------------------------------

    def _entry_eval(self, entry, X, rng):
        """Per-view gate statistics and classifier posteriors of one expert.

        All view variants are stacked into a single forward pass.
        Returns (like_views (V, B), soft_views (V, B, C)) where repeats
        of a stochastic view are already averaged within their view.
        """
        pairs = inference_variants(entry.view_set, entry.stats, X, rng)
        reps = [len(variants) for _, variants in pairs]
        stacked = np.vstack([v for _, variants in pairs for v in variants])
        logits, P = network.forward(entry.net, stacked)
        B = X.shape[0]
        R = sum(reps)
        P = P.reshape(R, B)
        S = softmax_rows(logits).reshape(R, B, -1)
        if self.gate_statistic == "softmax":
            P = S.max(axis=2)
        like_views, soft_views = [], []
        r0 = 0
        for r in reps:
            like_views.append(P[r0 : r0 + r].mean(axis=0))
            soft_views.append(S[r0 : r0 + r].mean(axis=0))
            r0 += r
        return np.stack(like_views), np.stack(soft_views)

    def _eval_rng(self, k, rng_key):
        return make_rng(self.seed, 41, k, int(rng_key))

    def block_likelihoods(self, X, rng_key=0):
        """Block-mean and per-sample gate statistic under every expert.

        Returns (means (K,), per_sample (K, B)); each expert evaluates
        the block under its own views and statistics.
        """
        self._require_experts()
        X = check_matrix(X, "block")
        if X.shape[0] == 0:
            raise ValueError("block is empty")
        per_sample = []
        for k, entry in enumerate(self.entries):
            like_views, _ = self._entry_eval(entry, X, self._eval_rng(k, rng_key))
            per_sample.append(like_views.mean(axis=0))
        per_sample = np.stack(per_sample)
        return per_sample.mean(axis=1), per_sample

    def pool_likelihoods(self, X, rng_key=0):
        """Block-mean gate statistic per expert (K,)."""
        means, _ = self.block_likelihoods(X, rng_key=rng_key)
        return means

    def _expert_predictions(self, k, X, rng_key=0):
        """Per-sample global labels from expert k's view-averaged posterior."""
        entry = self.entries[k]
        _, soft_views = self._entry_eval(entry, X, self._eval_rng(k, rng_key))
        posterior = soft_views.mean(axis=0)
        classes = np.asarray(entry.classes)
        return classes[np.argmax(posterior, axis=1)]

    def block_accuracy(self, X, y, k, rng_key=0):
        """Fraction of the block labelled correctly by expert k."""
        pred = self._expert_predictions(k, X, rng_key=rng_key)
        return float(np.mean(pred == np.asarray(y)))

    def infer_mixture(self, X, rng_key=0):
        """Per-sample mixture prediction over the global class union.

        score(c owned by expert k) = mean over k's views of
        posterior_k(c) * likelihood_k, summed over experts; the label is
        the arg-max global class.  Returns (labels (B,), scores (B, G)).
        """
        self._require_experts()
        X = check_matrix(X, "block")
        global_classes = self.global_classes
        col = {c: i for i, c in enumerate(global_classes)}
        scores = np.zeros((X.shape[0], len(global_classes)))
        for k, entry in enumerate(self.entries):
            like_views, soft_views = self._entry_eval(entry, X, self._eval_rng(k, rng_key))
            contrib = (soft_views * like_views[:, :, None]).mean(axis=0)
            for j, c in enumerate(entry.classes):
                scores[:, col[c]] += contrib[:, j]
        labels = np.asarray(global_classes)[np.argmax(scores, axis=1)]
        return labels, scores

    def infer_selection(self, X, rng_key=0):
        """Block-level prediction by the argmax-likelihood expert, gated."""
        self._require_experts()
        for e in self.entries:
            if e.threshold is None:
                raise ValueError("thresholds missing; calibrate before inference")
        means, _ = self.block_likelihoods(X, rng_key=rng_key)
        j = int(np.argmax(means))
        gated = bool(tlf(float(means[j]), self.entries[j].threshold.delta))
        labels = self._expert_predictions(j, X, rng_key=rng_key)
        return Prediction(
            global_label=labels,
            per_expert_likelihood=means,
            selected_expert=j,
            gated=gated,
        )

    def infer(self, X, rng_key=0):
        """Both inference modes: (mixture labels, selection Prediction)."""
        labels, _ = self.infer_mixture(X, rng_key=rng_key)
        return labels, self.infer_selection(X, rng_key=rng_key)

    # -- replay -------------------------------------------------------------

    def replay(self, config=None):
        """Retrain every expert on the union of stored exemplars.

        In-task exemplars run the joint objective with the replay
        weight; out-task exemplars (no usable labels) minimise the log
        task likelihood, pushing it toward zero.  Thresholds are
        recalibrated afterwards.
        """
        config = config if config is not None else ReplayConfig()
        stocked = [k for k, (X, _) in self.exemplars.items() if X.shape[0] > 0]
        if len(stocked) < 2:
            raise ValueError("replay requires exemplars from at least 2 tasks")
        for k, entry in enumerate(self.entries):
            Xin, yin = self.exemplars[k]
            local = {c: i for i, c in enumerate(entry.classes)}
            y_local = np.asarray([local[int(v)] for v in yin], dtype=np.int64)
            Xout = np.vstack([self.exemplars[j][0] for j in stocked if j != k])

            seed = self._derived_seed(61, k)
            tc = TrainConfig(
                lam=config.lambda_replay,
                learning_rate=config.learning_rate,
                batch_size=config.batch_size,
                epochs=config.epochs,
                optimizer=config.optimizer,
                seed=seed,
            )
            net = entry.net
            self._set_frozen(net, False)
            params = net.parameters()
            opt = network.make_optimizer(tc, params)
            for epoch in range(config.epochs):
                if config.augment:
                    rng = make_rng(seed, 2, epoch)
                    Xi = np.vstack(augment_batch(entry.view_set, entry.stats, Xin, rng))
                    yi = np.tile(y_local, entry.view_set.m)
                    Xo = np.vstack(augment_batch(entry.view_set, entry.stats, Xout, rng))
                else:
                    Xi, yi, Xo = Xin, y_local, Xout
                in_order = make_rng(seed, 3, epoch).permutation(Xi.shape[0])
                out_order = make_rng(seed, 4, epoch).permutation(Xo.shape[0])
                pos = 0
                for start in range(0, len(in_order), config.batch_size):
                    bi = in_order[start : start + config.batch_size]
                    bo = out_order.take(
                        np.arange(pos, pos + len(bi)), mode="wrap"
                    )
                    pos += len(bi)
                    _, g_in = network.joint_loss(net, Xi[bi], yi[bi], lam=config.lambda_replay)
                    _, g_out = network.joint_loss(
                        net,
                        Xo[bo],
                        None,
                        lam=config.lambda_replay,
                        classifier_weight=0.0,
                        likelihood_sign=1.0,
                    )
                    grads = {name: g_in[name] + g_out[name] for name in g_in}
                    if config.freeze_classifier:
                        grads["classifier.W"][:] = 0.0
                        grads["classifier.b"][:] = 0.0
                    opt.step(params, grads)
                if not net.all_finite():
                    raise network.DivergenceError(
                        f"replay diverged on expert {k} at epoch {epoch}"
                    )
            self._set_frozen(net, True)
            self._calibrate_entry(k, Xin, config.calibration_block_size, entry.threshold.cf)

    # -- persistence --------------------------------------------------------

    def save(self, directory):
        """Checkpoint the pool: manifest + per-expert files + exemplars."""
        os.makedirs(directory, exist_ok=True)
        experts = []
        for k, entry in enumerate(self.entries):
            expert_file = f"expert_{k}.json"
            payload = {
                "network": network.to_dict(entry.net),
                "view_set": entry.view_set.to_dict(),
                "feature_stats": entry.stats.to_dict() if entry.stats else None,
            }
            with open(os.path.join(directory, expert_file), "w") as fh:
                json.dump(payload, fh)
            Xe, ye = self.exemplars.get(k, (np.zeros((0, 1)), np.zeros(0)))
            ex_file = f"exemplars_{k}.bin"
            flat = np.concatenate([Xe.astype(np.float64).ravel(), ye.astype(np.float64)])
            flat.tofile(os.path.join(directory, ex_file))
            experts.append(
                {
                    "file": expert_file,
                    "task_id": entry.task_id,
                    "classes": list(entry.classes),
                    "threshold": entry.threshold.to_dict() if entry.threshold else None,
                    "exemplars": {"file": ex_file, "n": int(Xe.shape[0]), "d": int(Xe.shape[1])},
                }
            )
        manifest = {
            "format_version": POOL_FORMAT_VERSION,
            "seed": self.seed,
            "cf": self.cf,
            "calibration_block_size": self.calibration_block_size,
            "gate_statistic": self.gate_statistic,
            "likelihood_variant": self.likelihood_variant,
            "hidden_widths": list(self.hidden_widths),
            "n_kernels": self.n_kernels,
            "activation": self.activation,
            "cov_diag": self.cov_diag,
            "exemplar_cap": self.exemplar_cap,
            "view_set": self.view_set.to_dict(),
            "train_config": {
                "lam": self.train_config.lam,
                "learning_rate": self.train_config.learning_rate,
                "batch_size": self.train_config.batch_size,
                "epochs": self.train_config.epochs,
                "optimizer": self.train_config.optimizer,
            },
            "experts": experts,
        }
        with open(os.path.join(directory, POOL_MANIFEST), "w") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, directory):
        manifest_path = os.path.join(directory, POOL_MANIFEST)
        try:
            with open(manifest_path) as fh:
                manifest = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot load pool manifest {manifest_path}: {exc}")
        if manifest.get("format_version") != POOL_FORMAT_VERSION:
            raise ValueError(f"unsupported pool format {manifest.get('format_version')}")
        tc = manifest["train_config"]
        pool = cls(
            view_set=ViewSet.from_dict(manifest["view_set"]),
            train_config=TrainConfig(
                lam=tc["lam"],
                learning_rate=tc["learning_rate"],
                batch_size=tc["batch_size"],
                epochs=tc["epochs"],
                optimizer=tc["optimizer"],
            ),
            hidden_widths=manifest["hidden_widths"],
            n_kernels=manifest["n_kernels"],
            activation=manifest["activation"],
            cov_diag=manifest["cov_diag"],
            likelihood_variant=manifest["likelihood_variant"],
            gate_statistic=manifest["gate_statistic"],
            cf=manifest["cf"],
            calibration_block_size=manifest["calibration_block_size"],
            exemplar_cap=manifest["exemplar_cap"],
            seed=manifest["seed"],
        )
        for k, spec in enumerate(manifest["experts"]):
            with open(os.path.join(directory, spec["file"])) as fh:
                payload = json.load(fh)
            net = network.from_dict(payload["network"])
            pool._set_frozen(net, True)
            stats = (
                FeatureStats.from_dict(payload["feature_stats"])
                if payload["feature_stats"]
                else None
            )
            entry = ExpertEntry(
                net=net,
                view_set=ViewSet.from_dict(payload["view_set"]),
                stats=stats,
                threshold=Threshold.from_dict(spec["threshold"]) if spec["threshold"] else None,
                task_id=spec["task_id"],
            )
            pool.entries.append(entry)
            ex = spec["exemplars"]
            flat = np.fromfile(os.path.join(directory, ex["file"]), dtype=np.float64)
            need = ex["n"] * ex["d"] + ex["n"]
            if flat.size != need:
                raise ValueError(f"exemplar file {ex['file']} has {flat.size} values, need {need}")
            Xe = flat[: ex["n"] * ex["d"]].reshape(ex["n"], ex["d"])
            ye = flat[ex["n"] * ex["d"] :].astype(np.int64)
            pool.exemplars[k] = (Xe, ye)
        return pool
