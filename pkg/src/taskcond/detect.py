"""Task-change detection over block streams.

An expert's task likelihood is calibrated into an acceptance threshold
delta = mean - cf * std over per-block mean likelihoods.  At prediction
time each block is gated by the task likelihood filter (accept iff the
selected expert's block likelihood exceeds its threshold); a window of
rejections whose rejection fraction reaches eta signals a task change.

The streaming protocol runs task-unknown: it predicts with the current
expert pool, and on a change signal either records the event or buffers
the novel blocks and trains a new expert from them.
"""

import json
from dataclasses import dataclass, field

import numpy as np

WINDOW_MODES = ("disjoint", "sliding")

TRACE_COLUMNS = (
    "block_index",
    "segment_label",
    "selected_expert",
    "mean_likelihood",
    "std_likelihood",
    "tlf",
    "change_signal",
    "block_accuracy",
)


@dataclass
class Threshold:
    """Acceptance threshold of one expert, from calibration block means."""

    expert: int
    mean_p: float
    std_p: float
    cf: float
    delta: float

    def to_dict(self):
        return {
            "expert": self.expert,
            "mean_p": self.mean_p,
            "std_p": self.std_p,
            "cf": self.cf,
            "delta": self.delta,
        }

    @staticmethod
    def from_dict(d):
        return Threshold(
            expert=int(d["expert"]),
            mean_p=float(d["mean_p"]),
            std_p=float(d["std_p"]),
            cf=float(d["cf"]),
            delta=float(d["delta"]),
        )


def calibrate(block_means, cf=4.0, expert=0):
    """Threshold from per-block mean likelihoods of one expert.

    delta = mean - cf * std with the population standard deviation;
    requires at least two calibration blocks.
    """
    means = np.asarray(block_means, dtype=np.float64).ravel()
    if means.size < 2:
        raise ValueError("calibration requires at least 2 blocks")
    if cf < 0:
        raise ValueError("cf must be >= 0")
    mean_p = float(means.mean())
    std_p = float(means.std())
    return Threshold(expert=int(expert), mean_p=mean_p, std_p=std_p, cf=float(cf), delta=mean_p - cf * std_p)


def tlf(p, delta):
    """Task likelihood filter: 1 accepts, 0 rejects; equality rejects."""
    return 1 if p > delta else 0


def frequency_test(tlf_window, interval):
    """Rejection fraction D over a window of exactly `interval` TLF bits."""
    bits = np.asarray(tlf_window)
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if bits.size != interval:
        raise ValueError(f"window has {bits.size} bits, expected {interval}")
    return float(np.sum(1 - bits)) / float(interval)


@dataclass
class DetectorConfig:
    """Windowing and protocol parameters for stream detection.

    `interval` is the disjoint-window length; `consecutive_batches` is
    the sliding-window length used when window_mode="sliding";
    `collect_blocks` is how many blocks (including the triggering
    window) are gathered to train a new expert after a change signal.
    """

    interval: int = 3
    eta: float = 1.0
    consecutive_batches: int = 3
    block_size: int = 10
    cf: float = 4.0
    window_mode: str = "disjoint"
    collect_blocks: int = 40

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.consecutive_batches < 1:
            raise ValueError("consecutive_batches must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.cf < 0:
            raise ValueError("cf must be >= 0")
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(f"window_mode must be one of {WINDOW_MODES}")
        if self.collect_blocks < 2:
            raise ValueError("collect_blocks must be >= 2 (threshold calibration)")

    @property
    def window_length(self):
        return self.interval if self.window_mode == "disjoint" else self.consecutive_batches


@dataclass
class DetectionRecord:
    """Per-block trace of one stream run plus evaluation ground truth."""

    block_index: np.ndarray
    segment_label: np.ndarray
    selected_expert: np.ndarray
    mean_likelihood: np.ndarray
    std_likelihood: np.ndarray
    tlf_bits: np.ndarray
    change_signal: np.ndarray
    block_accuracy: np.ndarray
    novel_mask: np.ndarray
    learned_at_start: tuple

    @property
    def n_blocks(self):
        return int(self.block_index.size)


@dataclass
class DetectionMetrics:
    """TD/FD window-signal rates and TDR/FDR per-block rejection rates."""

    TD: float
    FD: float
    TDR: float
    FDR: float
    per_task: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.TD, self.FD, self.TDR, self.FDR))

    def to_dict(self):
        return {
            "TD": self.TD,
            "FD": self.FD,
            "TDR": self.TDR,
            "FDR": self.FDR,
            "per_task": self.per_task,
        }


def detection_metrics(record, interval):
    """Aggregate a detection record against its segment ground truth.

    TD = change signals on novel blocks / (novel block count / interval)
    and FD analogously on learned blocks; TDR and FDR are the per-block
    rejection fractions on novel and learned blocks.  Groups with no
    blocks contribute 0.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if record.n_blocks == 0:
        raise ValueError("empty detection record")
    novel = record.novel_mask.astype(bool)
    learned = ~novel
    signals = record.change_signal.astype(np.int64)
    rejections = 1 - record.tlf_bits.astype(np.int64)

    def rate(mask):
        n = int(mask.sum())
        if n == 0:
            return 0.0, 0.0
        d = int(signals[mask].sum())
        return d / (n / interval), float(rejections[mask].sum()) / n

    td, tdr = rate(novel)
    fd, fdr = rate(learned)

    per_task = []
    labels = record.segment_label
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [labels.size]])
    for s, e in zip(starts, ends):
        if e <= s:
            raise ValueError("zero-length segment")
        seg = slice(s, e)
        per_task.append(
            {
                "task": int(labels[s]),
                "novel": bool(novel[s]),
                "blocks": int(e - s),
                "signals": int(signals[seg].sum()),
                "rejection_rate": float(rejections[seg].sum()) / (e - s),
            }
        )
    return DetectionMetrics(TD=td, FD=fd, TDR=tdr, FDR=fdr, per_task=per_task)


def stream_protocol(pool, blocks, config, on_change="ignore"):
    """Run the task-unknown protocol over a block stream.

    The pool must expose block_likelihoods, block_accuracy, thresholds,
    learned_labels, and (for on_change="learn_new") learn_task_from_blocks.
    Starting from an empty pool is allowed: the protocol opens in the
    collecting state and trains the first expert from the head of the
    stream.  Returns a DetectionRecord; the pool is updated in place
    when new tasks are learned.
    """
    if on_change not in ("ignore", "learn_new"):
        raise ValueError("on_change must be 'ignore' or 'learn_new'")
    learned_at_start = tuple(sorted(pool.learned_labels()))
    n = len(blocks)
    if n == 0:
        raise ValueError("empty block stream")

    idx = np.zeros(n, dtype=np.int64)
    seg = np.zeros(n, dtype=np.int64)
    sel = np.full(n, -1, dtype=np.int64)
    mean_p = np.full(n, np.nan)
    std_p = np.full(n, np.nan)
    bits = np.zeros(n, dtype=np.int64)
    sig = np.zeros(n, dtype=np.int64)
    acc = np.zeros(n, dtype=np.float64)
    novel = np.zeros(n, dtype=bool)

    window = []
    recent = []
    buffer = []
    collecting = pool.n_experts == 0
    wlen = config.window_length

    for i, block in enumerate(blocks):
        idx[i] = block.block_index
        seg[i] = block.segment_label
        novel[i] = block.segment_label not in learned_at_start

        if pool.n_experts > 0:
            means, per_sample = pool.block_likelihoods(block.X, rng_key=block.block_index)
            j = int(np.argmax(means))
            p = float(means[j])
            sel[i] = j
            mean_p[i] = p
            std_p[i] = float(per_sample[j].std())
            gate = tlf(p, pool.thresholds()[j].delta)
            bits[i] = gate
            if gate:
                acc[i] = pool.block_accuracy(block.X, block.y, j, rng_key=block.block_index)

        if collecting:
            buffer.append(block)
            if len(buffer) >= config.collect_blocks:
                pool.learn_task_from_blocks(buffer, config)
                buffer = []
                window = []
                recent = []
                collecting = False
            continue

        window.append(int(bits[i]))
        recent.append(block)
        if len(recent) > wlen:
            recent.pop(0)
        if config.window_mode == "sliding" and len(window) > wlen:
            window.pop(0)
        if len(window) == wlen:
            d = frequency_test(window, wlen)
            if d >= config.eta:
                sig[i] = 1
                if on_change == "learn_new":
                    buffer = list(recent)
                    collecting = True
                window = []
                recent = []
            elif config.window_mode == "disjoint":
                window = []
                recent = []

    return DetectionRecord(
        block_index=idx,
        segment_label=seg,
        selected_expert=sel,
        mean_likelihood=mean_p,
        std_likelihood=std_p,
        tlf_bits=bits,
        change_signal=sig,
        block_accuracy=acc,
        novel_mask=novel,
        learned_at_start=learned_at_start,
    )


# ---------------------------------------------------------------------------
# trace and metrics output


def write_trace_csv(path, record, timestamp=None):
    """Trace CSV, one row per block; timestamp only in a '#' header line."""
    lines = []
    if timestamp is not None:
        lines.append(f"# generated {timestamp}")
    lines.append(",".join(TRACE_COLUMNS))
    for i in range(record.n_blocks):
        lines.append(
            "%d,%d,%d,%r,%r,%d,%d,%r"
            % (
                record.block_index[i],
                record.segment_label[i],
                record.selected_expert[i],
                float(record.mean_likelihood[i]),
                float(record.std_likelihood[i]),
                record.tlf_bits[i],
                record.change_signal[i],
                float(record.block_accuracy[i]),
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_json(path, metrics):
    """Metrics JSON with keys exactly TD, FD, TDR, FDR, per_task."""
    with open(path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2)
        fh.write("\n")
