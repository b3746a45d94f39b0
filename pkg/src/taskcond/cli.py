"""Experiment driver: train, evaluate, stream, and ablate from JSON configs.

Every hyperparameter lives in the config file; `--seed` and `--out`
override the corresponding fields.  Outputs are deterministic given
config and seed, except a '#'-prefixed timestamp header line in CSV
traces.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
divergence.
"""

import argparse
import datetime
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import (
    DataFormatError,
    block_stream,
    load_cifar_batches,
    load_mnist,
    load_split_digits,
    make_synthetic_tasks,
    resolve_data_dir,
    split_synthetic,
    split_tasks,
    subsample_tasks,
    train_block_stream,
)
from .detect import (
    DetectorConfig,
    detection_metrics,
    stream_protocol,
    write_metrics_json,
    write_trace_csv,
)
from .multiview import VIEW_KINDS, default_view_set, identity_view_set
from .network import DivergenceError, TrainConfig
from .pool import ExpertPool, ReplayConfig

DATASETS = ("digits", "mnist", "cifar10", "synthetic")
ABLATION_VARIANTS = (
    "no_views",
    "one_kernel",
    "k_kernels",
    "no_prob_layer",
    "replay_on_off",
    "predecessor_denominator",
)


class ConfigError(Exception):
    """Invalid experiment configuration; message names the field."""


@dataclass
class ExperimentConfig:
    """Every knob of an experiment, loaded from one JSON file."""

    dataset: str = "digits"
    data_dir: str = None
    grouping: list = None
    subsample_per_task: int = None
    test_fraction: float = 0.2
    n_tasks: int = 3
    classes_per_task: int = 2
    samples_per_class: int = 150
    n_features: int = 8
    imbalance: list = None
    hidden_widths: list = field(default_factory=lambda: [200, 200, 256])
    n_kernels: int = None
    lam: float = 0.1
    views: object = "all"
    inference_repeats: int = 10
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    likelihood_variant: str = "unit"
    gate_statistic: str = "likelihood"
    activation: str = "relu"
    cov_diag: float = 1.0
    exemplar_cap: int = None
    cf: float = 4.0
    eta: float = 1.0
    interval: int = 3
    consecutive_batches: int = 3
    window_mode: str = "disjoint"
    collect_blocks: int = 40
    block_sizes: list = field(default_factory=lambda: [1, 10])
    stream_block_size: int = 10
    blocks_per_segment: int = 200
    stream_schedule: list = None
    stream_source: str = "test"
    on_change: str = "ignore"
    start_empty: bool = False
    replay: bool = False
    lambda_replay: float = 5.0
    replay_epochs: int = 5
    freeze_classifier: bool = False
    seed: int = 0
    out: str = "runs/out"

    def validate(self):
        def fail(name, why):
            raise ConfigError(f"config field '{name}': {why}")

        if self.dataset not in DATASETS:
            fail("dataset", f"must be one of {DATASETS}")
        if not 0.0 < self.test_fraction < 1.0:
            fail("test_fraction", "must lie in (0, 1)")
        if self.grouping is not None:
            seen = set()
            for g in self.grouping:
                for c in g:
                    if c in seen:
                        fail("grouping", f"class {c} appears twice")
                    seen.add(c)
        if not self.hidden_widths or any(int(w) < 1 for w in self.hidden_widths):
            fail("hidden_widths", "must be a non-empty list of positive widths")
        if self.n_kernels is not None and self.n_kernels < 1:
            fail("n_kernels", "must be >= 1")
        if self.lam < 0:
            fail("lam", "must be >= 0")
        if isinstance(self.views, str):
            if self.views not in ("all", "none"):
                fail("views", "string form must be 'all' or 'none'")
        else:
            bad = [v for v in self.views if v not in VIEW_KINDS]
            if bad:
                fail("views", f"unknown view kinds {bad}")
        if self.inference_repeats < 1:
            fail("inference_repeats", "must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            fail("epochs", "epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            fail("learning_rate", "must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            fail("optimizer", "must be 'adam' or 'sgd'")
        if self.likelihood_variant not in ("unit", "scaled"):
            fail("likelihood_variant", "must be 'unit' or 'scaled'")
        if self.gate_statistic not in ("likelihood", "softmax"):
            fail("gate_statistic", "must be 'likelihood' or 'softmax'")
        if self.activation not in ("relu", "tanh"):
            fail("activation", "must be 'relu' or 'tanh'")
        if self.cov_diag <= 0:
            fail("cov_diag", "must be > 0")
        if self.exemplar_cap is not None and self.exemplar_cap < 1:
            fail("exemplar_cap", "must be >= 1")
        if self.cf < 0:
            fail("cf", "must be >= 0")
        if not 0.0 < self.eta <= 1.0:
            fail("eta", "must lie in (0, 1]")
        if self.interval < 1 or self.consecutive_batches < 1:
            fail("interval", "interval and consecutive_batches must be >= 1")
        if self.window_mode not in ("disjoint", "sliding"):
            fail("window_mode", "must be 'disjoint' or 'sliding'")
        if self.collect_blocks < 2:
            fail("collect_blocks", "must be >= 2")
        if not self.block_sizes or any(int(b) < 1 for b in self.block_sizes):
            fail("block_sizes", "must be a non-empty list of positive sizes")
        if self.stream_block_size < 1:
            fail("stream_block_size", "must be >= 1")
        if self.blocks_per_segment < 1:
            fail("blocks_per_segment", "must be >= 1")
        if self.stream_source not in ("test", "train"):
            fail("stream_source", "must be 'test' or 'train'")
        if self.on_change not in ("ignore", "learn_new"):
            fail("on_change", "must be 'ignore' or 'learn_new'")
        if self.lambda_replay <= 0:
            fail("lambda_replay", "must be > 0")
        if self.replay_epochs < 1:
            fail("replay_epochs", "must be >= 1")
        if self.seed < 0:
            fail("seed", "must be >= 0")
        return self

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"config field '{unknown[0]}': unknown field")
        return cls(**raw).validate()


# ---------------------------------------------------------------------------
# experiment assembly


DEFAULT_PAIR_GROUPING = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]


def build_tasks(config):
    """TaskSequence for the configured dataset."""
    if config.dataset == "synthetic":
        raw = make_synthetic_tasks(
            n_tasks=config.n_tasks,
            classes_per_task=config.classes_per_task,
            samples_per_class=config.samples_per_class,
            n_features=config.n_features,
            imbalance=config.imbalance,
            seed=config.seed,
        )
        tasks = split_synthetic(raw, test_fraction=config.test_fraction, seed=config.seed)
        return subsample_tasks(tasks, config.subsample_per_task, config.seed)
    if config.dataset == "digits":
        Xtr, ytr, Xte, yte, shape = load_split_digits(
            test_fraction=config.test_fraction, seed=config.seed
        )
    elif config.dataset == "mnist":
        Xtr, ytr, Xte, yte, shape = load_mnist(config.data_dir)
    else:
        data_dir = resolve_data_dir(config.data_dir)
        if data_dir is None:
            raise DataFormatError("cifar10 requires data_dir or TASKCOND_DATA_DIR")
        for sub in ("", "cifar-10-batches-bin"):
            base = os.path.join(data_dir, sub) if sub else data_dir
            train_paths = [os.path.join(base, f"data_batch_{i}.bin") for i in range(1, 6)]
            test_path = os.path.join(base, "test_batch.bin")
            if all(os.path.exists(p) for p in train_paths):
                break
        else:
            raise DataFormatError(f"no data_batch_*.bin files under {data_dir}")
        Xtr, ytr, shape = load_cifar_batches(train_paths)
        if os.path.exists(test_path):
            Xte, yte, _ = load_cifar_batches([test_path])
        else:
            raise DataFormatError(f"missing {test_path}")
    grouping = config.grouping if config.grouping is not None else DEFAULT_PAIR_GROUPING
    tasks = split_tasks(Xtr, ytr, Xte, yte, grouping, image_shape=shape)
    return subsample_tasks(tasks, config.subsample_per_task, config.seed)


def build_pool(config, image_shape):
    if config.views == "none" or image_shape is None:
        view_set = identity_view_set(image_shape)
    else:
        kinds = None if config.views == "all" else list(config.views)
        view_set = default_view_set(
            image_shape,
            inference_repeats=config.inference_repeats,
            seed=config.seed,
            kinds=kinds,
        )
    train_config = TrainConfig(
        lam=config.lam,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        epochs=config.epochs,
        optimizer=config.optimizer,
        seed=config.seed,
    )
    return ExpertPool(
        view_set=view_set,
        train_config=train_config,
        hidden_widths=config.hidden_widths,
        n_kernels=config.n_kernels,
        activation=config.activation,
        cov_diag=config.cov_diag,
        likelihood_variant=config.likelihood_variant,
        gate_statistic=config.gate_statistic,
        cf=config.cf,
        calibration_block_size=config.stream_block_size,
        exemplar_cap=config.exemplar_cap,
        seed=config.seed,
    )


def replay_config(config):
    return ReplayConfig(
        lambda_replay=config.lambda_replay,
        epochs=config.replay_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        optimizer=config.optimizer,
        freeze_classifier=config.freeze_classifier,
        calibration_block_size=config.stream_block_size,
    )


def mixture_accuracy(pool, X, y, chunk=256):
    hits = 0
    for c, start in enumerate(range(0, X.shape[0], chunk)):
        sl = slice(start, start + chunk)
        labels, _ = pool.infer_mixture(X[sl], rng_key=c)
        hits += int(np.sum(labels == np.asarray(y)[sl]))
    return hits / X.shape[0]


def evaluate_blocks(pool, blocks):
    """Selection accuracy (gated; rejected counts 0) and decision accuracy."""
    sel_acc, decisions = [], []
    task_of_expert = {k: e.task_id for k, e in enumerate(pool.entries)}
    for block in blocks:
        pred = pool.infer_selection(block.X, rng_key=block.block_index)
        correct_expert = task_of_expert.get(pred.selected_expert) == block.segment_label
        decisions.append(1.0 if correct_expert else 0.0)
        if pred.gated:
            sel_acc.append(float(np.mean(pred.global_label == block.y)))
        else:
            sel_acc.append(0.0)
    return float(np.mean(sel_acc)), float(np.mean(decisions))


# ---------------------------------------------------------------------------
# commands


def _timestamp():
    return datetime.datetime.now().isoformat(timespec="seconds")


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _dry_run(config):
    print(json.dumps(asdict(config), indent=2, sort_keys=True))
    return 0


def cmd_train(config):
    tasks = build_tasks(config)
    pool = build_pool(config, tasks.image_shape)
    os.makedirs(config.out, exist_ok=True)
    report_tasks = []
    for task in tasks:
        k = pool.learn_task(task.X_train, task.y_train, task_id=task.task_id)
        pool.save(os.path.join(config.out, f"pool_after_task_{task.task_id}"))
        entry = pool.entries[k]
        report_tasks.append(
            {
                "task": task.task_id,
                "classes": list(entry.classes),
                "loss_curve": entry.report.loss_curve,
                "likelihood_curve": entry.report.likelihood_curve,
                "train_accuracy": entry.report.train_accuracy,
                "threshold": entry.threshold.to_dict(),
            }
        )
    if config.replay:
        pool.replay(replay_config(config))
    pool.save(os.path.join(config.out, "pool"))
    per_task_acc = {
        str(task.task_id): mixture_accuracy(pool, task.X_test, task.y_test)
        for task in tasks
    }
    report = {
        "dataset": config.dataset,
        "n_experts": pool.n_experts,
        "tasks": report_tasks,
        "test_accuracy_per_task": per_task_acc,
        "mean_test_accuracy": float(np.mean(list(per_task_acc.values()))),
    }
    _write_json(os.path.join(config.out, "train_report.json"), report)
    print(f"trained {pool.n_experts} experts; mean test accuracy "
          f"{report['mean_test_accuracy']:.4f}; outputs in {config.out}")
    return 0


def _load_pool(pool_dir):
    try:
        return ExpertPool.load(pool_dir)
    except ValueError as exc:
        raise DataFormatError(str(exc))


def cmd_eval(config, pool_dir):
    pool = _load_pool(pool_dir)
    tasks = build_tasks(config)
    os.makedirs(config.out, exist_ok=True)
    rows = ["block_size,selection_accuracy,decision_accuracy,mixture_accuracy"]
    schedule = [(t, config.blocks_per_segment) for t in range(tasks.n_tasks)]
    for bs in config.block_sizes:
        blocks = block_stream(tasks, schedule, block_size=bs, seed=config.seed)
        sel, dec = evaluate_blocks(pool, blocks)
        mix = float(
            np.mean([mixture_accuracy(pool, t.X_test, t.y_test) for t in tasks])
        )
        rows.append(f"{bs},{sel!r},{dec!r},{mix!r}")
    with open(os.path.join(config.out, "eval.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")

    table = ["expert,task,mean_likelihood,var_likelihood"]
    for k in range(pool.n_experts):
        for t_idx, task in enumerate(tasks):
            blocks = block_stream(
                tasks, [(t_idx, 20)], block_size=config.stream_block_size,
                seed=config.seed,
            )
            means = [
                float(pool.block_likelihoods(b.X, rng_key=b.block_index)[0][k])
                for b in blocks
            ]
            table.append(
                f"{k},{task.task_id},{float(np.mean(means))!r},{float(np.var(means))!r}"
            )
    with open(os.path.join(config.out, "likelihood_table.csv"), "w") as fh:
        fh.write("\n".join(table) + "\n")
    print(f"eval tables written to {config.out}")
    return 0


def cmd_stream(config, pool_dir=None):
    tasks = build_tasks(config)
    if pool_dir and not config.start_empty:
        pool = _load_pool(pool_dir)
    else:
        pool = build_pool(config, tasks.image_shape)
    detector = DetectorConfig(
        interval=config.interval,
        eta=config.eta,
        consecutive_batches=config.consecutive_batches,
        block_size=config.stream_block_size,
        cf=config.cf,
        window_mode=config.window_mode,
        collect_blocks=config.collect_blocks,
    )
    schedule = config.stream_schedule
    if schedule is None:
        schedule = [[t, config.blocks_per_segment] for t in range(tasks.n_tasks)]
    for entry in schedule:
        if len(entry) != 2:
            raise ConfigError("config field 'stream_schedule': entries must be [task, blocks]")
    make_stream = block_stream if config.stream_source == "test" else train_block_stream
    blocks = make_stream(
        tasks, [(int(t), int(b)) for t, b in schedule],
        block_size=detector.block_size, seed=config.seed,
    )
    record = stream_protocol(pool, blocks, detector, on_change=config.on_change)
    os.makedirs(config.out, exist_ok=True)
    write_trace_csv(os.path.join(config.out, "trace.csv"), record, timestamp=_timestamp())
    metrics = detection_metrics(record, detector.interval)
    write_metrics_json(os.path.join(config.out, "metrics.json"), metrics)
    if config.on_change == "learn_new":
        pool.save(os.path.join(config.out, "pool_stream"))
    print(
        f"stream of {record.n_blocks} blocks: TD={metrics.TD:.4f} FD={metrics.FD:.4f} "
        f"TDR={metrics.TDR:.4f} FDR={metrics.FDR:.4f}; outputs in {config.out}"
    )
    return 0


def _ablation_config(config, variant, k):
    if variant == "no_views":
        return replace(config, views="none")
    if variant == "one_kernel":
        return replace(config, n_kernels=1)
    if variant == "k_kernels":
        if k is None or k < 1:
            raise ConfigError("config field 'n_kernels': k_kernels requires --k >= 1")
        return replace(config, n_kernels=k)
    if variant == "no_prob_layer":
        # Conventional network: no likelihood term during training, and the
        # gate falls back to the classifier's max softmax probability.
        return replace(config, gate_statistic="softmax", lam=0.0)
    if variant == "replay_on_off":
        return replace(config, replay=True)
    if variant == "predecessor_denominator":
        return replace(config, likelihood_variant="scaled")
    raise ConfigError(f"config field 'variant': unknown ablation '{variant}'")


def _detection_run(config):
    """Train on all tasks but the last, stream over all segments, report."""
    tasks = build_tasks(config)
    pool = build_pool(config, tasks.image_shape)
    for task in list(tasks)[:-1]:
        pool.learn_task(task.X_train, task.y_train, task_id=task.task_id)
    if config.replay and pool.n_experts >= 2:
        pool.replay(replay_config(config))
    detector = DetectorConfig(
        interval=config.interval,
        eta=config.eta,
        consecutive_batches=config.consecutive_batches,
        block_size=config.stream_block_size,
        cf=config.cf,
        window_mode=config.window_mode,
        collect_blocks=config.collect_blocks,
    )
    schedule = [(t, config.blocks_per_segment) for t in range(tasks.n_tasks)]
    blocks = block_stream(tasks, schedule, block_size=detector.block_size, seed=config.seed)
    record = stream_protocol(pool, blocks, detector, on_change="ignore")
    return detection_metrics(record, detector.interval)


def cmd_ablate(config, variant, k=None):
    modified = _ablation_config(config, variant, k)
    base_metrics = _detection_run(config)
    variant_metrics = _detection_run(modified)
    os.makedirs(config.out, exist_ok=True)
    payload = {
        "variant": variant if variant != "k_kernels" else f"k_kernels({k})",
        "base": base_metrics.to_dict(),
        "modified": variant_metrics.to_dict(),
    }
    _write_json(os.path.join(config.out, "ablate.json"), payload)
    print(
        f"ablation '{payload['variant']}': base TD={base_metrics.TD:.4f} "
        f"FD={base_metrics.FD:.4f} vs modified TD={variant_metrics.TD:.4f} "
        f"FD={variant_metrics.FD:.4f}; report in {config.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="taskcond",
        description="Continual learning with per-task experts, task-free inference, "
        "and stream change detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--dry-run", action="store_true", help="print resolved config and exit")

    p_train = sub.add_parser("train", help="train one expert per task")
    common(p_train)

    p_eval = sub.add_parser("eval", help="accuracy and likelihood tables for a pool")
    common(p_eval)
    p_eval.add_argument("--pool", default=None, help="pool checkpoint dir (default <out>/pool)")

    p_stream = sub.add_parser("stream", help="run the task-unknown detection protocol")
    common(p_stream)
    p_stream.add_argument("--pool", default=None, help="starting pool checkpoint dir")

    p_ablate = sub.add_parser("ablate", help="side-by-side ablation report")
    common(p_ablate)
    p_ablate.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    p_ablate.add_argument("--k", type=int, default=None, help="kernel count for k_kernels")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_json(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed).validate()
        if args.out is not None:
            config = replace(config, out=args.out)
        if args.dry_run:
            return _dry_run(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            pool_dir = args.pool or os.path.join(config.out, "pool")
            return cmd_eval(config, pool_dir)
        if args.command == "stream":
            return cmd_stream(config, pool_dir=args.pool)
        return cmd_ablate(config, args.variant, k=args.k)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        # invalid values that surface past config validation, e.g. a
        # stream schedule referencing a task the sequence does not have
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
