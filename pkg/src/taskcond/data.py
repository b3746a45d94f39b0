"""Dataset loading, task splitting, and block streams.

Supports the big-endian IDX image/label format, the 3073-byte-record
binary image format with channel-major pixel planes, a bundled
small-digits fallback, and synthetic Gaussian tasks.  Pixel data is
scaled to [0, 1] float64 at load time.

The environment variable TASKCOND_DATA_DIR points at a directory of
binary dataset files; loaders fall back to it when no explicit path is
given.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import make_rng
from .validation import check_labels, check_matrix, check_same_length

DATA_DIR_ENV = "TASKCOND_DATA_DIR"

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (32, 32, 3)


class DataFormatError(Exception):
    """A dataset file is missing, truncated, or has the wrong magic."""


def resolve_data_dir(path=None):
    """Explicit path if given, else TASKCOND_DATA_DIR, else None."""
    if path is not None:
        return str(path)
    return os.environ.get(DATA_DIR_ENV)


def _read_binary(path):
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
            fh.seek(0)
            if head == b"\x1f\x8b":
                with gzip.open(fh) as gz:
                    return gz.read()
            return fh.read()
    except FileNotFoundError:
        raise DataFormatError(f"dataset file not found: {path}")
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset file {path}: {exc}")


def load_idx_images(path):
    """Images from an IDX file as (n, rows*cols) float64 in [0, 1]."""
    raw = _read_binary(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad image magic {magic}, expected {IDX_IMAGE_MAGIC}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated pixel data ({len(raw)} bytes, need {need})")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    X = pixels.astype(np.float64).reshape(n, rows * cols) / 255.0
    return X, (rows, cols)


def load_idx_labels(path):
    raw = _read_binary(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"{path}: bad label magic {magic}, expected {IDX_LABEL_MAGIC}")
    if len(raw) < 8 + n:
        raise DataFormatError(f"{path}: truncated label data")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx_pair(images_path, labels_path):
    X, shape = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    check_same_length(X, y, "images", "labels")
    return X, y, shape


_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_file(data_dir, candidates):
    for name in candidates:
        for suffix in ("", ".gz"):
            p = os.path.join(data_dir, name + suffix)
            if os.path.exists(p):
                return p
    raise DataFormatError(f"none of {candidates} found under {data_dir}")


def load_mnist(data_dir=None):
    """Train/test handwritten-digit arrays from IDX files.

    Returns (X_train, y_train, X_test, y_test, image_shape).
    """
    data_dir = resolve_data_dir(data_dir)
    if data_dir is None:
        raise DataFormatError(f"no data directory: pass one or set {DATA_DIR_ENV}")
    Xtr, ytr, shape = load_idx_pair(
        _find_file(data_dir, _MNIST_FILES["train_images"]),
        _find_file(data_dir, _MNIST_FILES["train_labels"]),
    )
    Xte, yte, _ = load_idx_pair(
        _find_file(data_dir, _MNIST_FILES["test_images"]),
        _find_file(data_dir, _MNIST_FILES["test_labels"]),
    )
    return Xtr, ytr, Xte, yte, shape


def load_cifar_batches(paths):
    """Stacked records from 3073-byte-per-record binary batch files.

    Each record is one label byte followed by a 32x32 image stored as
    three channel planes; output is (n, 3072) float64 in [0, 1] with
    channel-last pixel layout, plus the label vector.
    """
    chunks, labels = [], []
    for path in paths:
        raw = _read_binary(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        planes = rec[:, 1:].reshape(-1, 3, 32, 32)
        chunks.append(np.transpose(planes, (0, 2, 3, 1)).reshape(-1, 3072))
    X = np.concatenate(chunks).astype(np.float64) / 255.0
    y = np.concatenate(labels)
    return X, y, CIFAR_SHAPE


# ---------------------------------------------------------------------------
# fallback and synthetic data


def load_split_digits(test_fraction=0.2, seed=0):
    """Bundled 8x8 digit images as a train/test split, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    X = bunch.data.astype(np.float64) / 16.0
    y = bunch.target.astype(np.int64)
    n_test = int(round(test_fraction * X.shape[0]))
    order = make_rng(seed, 11).permutation(X.shape[0])
    test_idx, train_idx = order[:n_test], order[n_test:]
    return X[train_idx], y[train_idx], X[test_idx], y[test_idx], (8, 8)


def make_synthetic_tasks(
    n_tasks=2,
    classes_per_task=2,
    samples_per_class=100,
    n_features=8,
    class_separation=4.0,
    task_separation=8.0,
    noise=1.0,
    imbalance=None,
    seed=0,
):
    """Gaussian-cluster tasks with globally unique class labels.

    `imbalance`, if given, is a per-class multiplier list of length
    classes_per_task applied to samples_per_class.  Returns a list of
    (X, y) pairs; labels for task t are t*classes_per_task + c.
    """
    if imbalance is None:
        imbalance = [1.0] * classes_per_task
    if len(imbalance) != classes_per_task:
        raise ValueError("imbalance must have one entry per class")
    rng = make_rng(seed, 17)
    tasks = []
    for t in range(n_tasks):
        task_shift = rng.normal(0.0, task_separation, size=n_features)
        xs, ys = [], []
        for c in range(classes_per_task):
            n_c = max(1, int(round(samples_per_class * imbalance[c])))
            centre = task_shift + rng.normal(0.0, class_separation, size=n_features)
            xs.append(centre + rng.normal(0.0, noise, size=(n_c, n_features)))
            ys.append(np.full(n_c, t * classes_per_task + c, dtype=np.int64))
        X = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(X.shape[0])
        tasks.append((X[order], y[order]))
    return tasks


# ---------------------------------------------------------------------------
# task splitting


@dataclass
class Task:
    task_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    classes: tuple

    @property
    def class_map(self):
        return {int(c): i for i, c in enumerate(self.classes)}


@dataclass
class TaskSequence:
    tasks: list = field(default_factory=list)
    image_shape: tuple = None

    @property
    def n_tasks(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def split_tasks(X_train, y_train, X_test, y_test, task_classes, image_shape=None):
    """Partition a labelled dataset into class-disjoint tasks.

    `task_classes` is a list of class tuples, one per task, e.g.
    [(0, 1), (2, 3)].  Classes may not repeat across tasks.
    """
    X_train = check_matrix(X_train, "X_train")
    X_test = check_matrix(X_test, "X_test")
    check_same_length(X_train, y_train, "X_train", "y_train")
    check_same_length(X_test, y_test, "X_test", "y_test")
    seen = set()
    for group in task_classes:
        for c in group:
            if c in seen:
                raise ValueError(f"class {c} assigned to more than one task")
            seen.add(c)
    tasks = []
    for t, group in enumerate(task_classes):
        group = tuple(int(c) for c in group)
        tr = np.isin(y_train, group)
        te = np.isin(y_test, group)
        if not np.any(tr):
            raise ValueError(f"task {t} has no training samples for classes {group}")
        tasks.append(
            Task(
                task_id=t,
                X_train=X_train[tr],
                y_train=np.asarray(y_train)[tr],
                X_test=X_test[te],
                y_test=np.asarray(y_test)[te],
                classes=group,
            )
        )
    return TaskSequence(tasks=tasks, image_shape=image_shape)


def split_synthetic(tasks, test_fraction=0.25, seed=0, image_shape=None):
    """Train/test-split a list of (X, y) pairs into a TaskSequence."""
    out = []
    for t, (X, y) in enumerate(tasks):
        rng = make_rng(seed, 23, t)
        order = rng.permutation(X.shape[0])
        n_test = max(1, int(round(test_fraction * X.shape[0])))
        te, tr = order[:n_test], order[n_test:]
        classes = tuple(int(c) for c in np.unique(y))
        out.append(
            Task(
                task_id=t,
                X_train=X[tr],
                y_train=y[tr],
                X_test=X[te],
                y_test=y[te],
                classes=classes,
            )
        )
    return TaskSequence(tasks=out, image_shape=image_shape)


# ---------------------------------------------------------------------------
# block streams


@dataclass
class StreamBlock:
    """One block of consecutive stream observations from a single segment."""

    block_index: int
    segment_index: int
    segment_label: int
    X: np.ndarray
    y: np.ndarray
    with_replacement: bool = False


def segment_blocks(segments, block_size=10, seed=0):
    """Blocks drawn segment by segment from sample pools.

    Each segment is (label, X, y, block_count).  Indices are drawn
    without replacement until the pool is exhausted, then with
    replacement; blocks containing any replacement draw are flagged.
    Block indices run consecutively across the whole stream.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    blocks = []
    bi = 0
    for si, (label, X, y, n_blocks) in enumerate(segments):
        X = check_matrix(X, f"segment[{si}].X")
        check_same_length(X, y, f"segment[{si}].X", f"segment[{si}].y")
        n = X.shape[0]
        if block_size > n:
            raise ValueError(
                f"block_size {block_size} exceeds segment {si} pool size {n}"
            )
        rng = make_rng(seed, 29, si)
        fresh = list(rng.permutation(n))
        for _ in range(n_blocks):
            idx, replaced = [], False
            for _ in range(block_size):
                if fresh:
                    idx.append(fresh.pop())
                else:
                    idx.append(int(rng.integers(0, n)))
                    replaced = True
            idx = np.asarray(idx)
            blocks.append(
                StreamBlock(
                    block_index=bi,
                    segment_index=si,
                    segment_label=int(label),
                    X=X[idx],
                    y=np.asarray(y)[idx],
                    with_replacement=replaced,
                )
            )
            bi += 1
    return blocks


def _schedule_segments(task_sequence, schedule, source):
    segments = []
    for t, n_blocks in schedule:
        if not 0 <= t < task_sequence.n_tasks:
            raise ValueError(f"schedule references unknown task {t}")
        if n_blocks < 1:
            raise ValueError("schedule block counts must be >= 1")
        task = task_sequence[t]
        X, y = (task.X_test, task.y_test) if source == "test" else (task.X_train, task.y_train)
        segments.append((task.task_id, X, y, n_blocks))
    return segments


def block_stream(task_sequence, schedule, block_size=10, seed=0):
    """Block stream over a task sequence's held-out test pools.

    `schedule` lists (task index, block count) pairs in arrival order;
    a task may appear in several segments, each drawing from a fresh
    permutation of its test pool.
    """
    segments = _schedule_segments(task_sequence, schedule, "test")
    return segment_blocks(segments, block_size=block_size, seed=seed)


def train_block_stream(task_sequence, schedule, block_size=10, seed=0):
    """Block stream over training pools, for streams that feed learning.

    Evaluation streams must stay on held-out pools (block_stream); this
    variant exists so a stream that triggers new-expert training carries
    data the post-hoc test pools have never seen.
    """
    segments = _schedule_segments(task_sequence, schedule, "train")
    return segment_blocks(segments, block_size=block_size, seed=seed)


def subsample_tasks(task_sequence, per_task, seed=0):
    """Cap each task's training set at `per_task` samples (seeded).

    Desk-scale switch: test sets are left whole so evaluation stays
    comparable across subsample levels.
    """
    if per_task is None:
        return task_sequence
    if per_task < 2:
        raise ValueError("per_task must be >= 2")
    out = []
    for task in task_sequence:
        n = task.X_train.shape[0]
        if n <= per_task:
            out.append(task)
            continue
        idx = make_rng(seed, 37, task.task_id).permutation(n)[:per_task]
        idx.sort()
        out.append(
            Task(
                task_id=task.task_id,
                X_train=task.X_train[idx],
                y_train=task.y_train[idx],
                X_test=task.X_test,
                y_test=task.y_test,
                classes=task.classes,
            )
        )
    return TaskSequence(tasks=out, image_shape=task_sequence.image_shape)


def exemplar_sample(X, y, cap, seed):
    """Class-balanced exemplar subset of at most `cap` samples."""
    X = check_matrix(X)
    check_same_length(X, y)
    y = np.asarray(y)
    if X.shape[0] <= cap:
        return X.copy(), y.copy()
    rng = make_rng(seed, 31)
    classes = np.unique(y)
    per = cap // len(classes)
    picked = []
    for c in classes:
        idx = np.flatnonzero(y == c)
        take = min(per, idx.size)
        picked.append(rng.choice(idx, size=take, replace=False))
    idx = np.concatenate(picked)
    if idx.size < cap:
        rest = np.setdiff1d(np.arange(X.shape[0]), idx)
        extra = rng.choice(rest, size=min(cap - idx.size, rest.size), replace=False)
        idx = np.concatenate([idx, extra])
    idx.sort()
    return X[idx], y[idx]


def check_task_labels(y, classes):
    """Validate labels against a task's class tuple; returns mapped indices."""
    mapping = {int(c): i for i, c in enumerate(classes)}
    y = np.asarray(y)
    try:
        mapped = np.asarray([mapping[int(v)] for v in y], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not in task classes {tuple(classes)}")
    return check_labels(mapped, len(classes))
