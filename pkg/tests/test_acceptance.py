"""End-to-end acceptance gate.

Eight numbered checks cover the library's headline behaviors: gradient
correctness of the joint objective, closed-form formula oracles, selection
accuracy and change detection on a five-task split digit benchmark, the
replay margin, ablation directions, task-unknown stream growth, and rerun
determinism.  Each check prints exactly one "[acceptance] <n> <name>:
PASS/FAIL" line (run with ``pytest tests/test_acceptance.py -s`` to see
them as they complete).

The benchmark uses the bundled 8x8 digit images by default; when
TASKCOND_DATA_DIR points at the full-size 28x28 corpus in IDX format,
the same protocol runs there at a 2000-samples-per-task subsample.
"""

import json

import numpy as np
import pytest

from taskcond.cli import main
from taskcond.data import (
    DataFormatError,
    block_stream,
    load_cifar_batches,
    load_mnist,
    load_split_digits,
    resolve_data_dir,
    split_synthetic,
    split_tasks,
    subsample_tasks,
    train_block_stream,
)
from taskcond.data import make_synthetic_tasks
from taskcond.detect import (
    DetectionRecord,
    DetectorConfig,
    detection_metrics,
    frequency_test,
    stream_protocol,
    tlf,
)
from taskcond.multiview import default_view_set, fit_feature_stats, identity_view_set
from taskcond.network import (
    ProbLayer,
    TrainConfig,
    init_expert,
    joint_loss,
    potential,
    task_likelihood,
)
from taskcond.pool import ExpertPool, ReplayConfig

SEEDS = (0, 1, 2)
PAIRS = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
DETECTOR = DetectorConfig(interval=3, eta=1.0, block_size=10, cf=4.0)


def verdict(number, name, ok, detail):
    print(f"[acceptance] {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{number} {name}: {detail}"


# ---------------------------------------------------------------------------
# shared benchmark: five class-pair tasks over labelled digit images


@pytest.fixture(scope="module")
def bench():
    data = None
    data_dir = resolve_data_dir()
    if data_dir is not None:
        try:
            data = load_mnist(data_dir)
        except DataFormatError:
            data = None
    if data is None:
        data = load_split_digits(seed=0)
    Xtr, ytr, Xte, yte, shape = data
    tasks = split_tasks(Xtr, ytr, Xte, yte, PAIRS, image_shape=shape)
    return subsample_tasks(tasks, 2000, 0)


def make_bench_pool(tasks, seed, n_tasks=5, n_kernels=None, lam=0.1, gate="likelihood"):
    view_set = default_view_set(tasks.image_shape, inference_repeats=10, seed=seed)
    tc = TrainConfig(lam=lam, learning_rate=1e-3, batch_size=128, epochs=25, seed=seed)
    pool = ExpertPool(
        view_set=view_set,
        train_config=tc,
        hidden_widths=(200, 200, 256),
        activation="tanh",
        cov_diag=0.25,
        cf=4.0,
        seed=seed,
        n_kernels=n_kernels,
        gate_statistic=gate,
    )
    for task in list(tasks)[:n_tasks]:
        pool.learn_task(task.X_train, task.y_train, task_id=task.task_id)
    return pool


def subpool(pool, k):
    """First k experts of a pool, sharing the frozen networks."""
    sp = ExpertPool(
        view_set=pool.view_set,
        train_config=pool.train_config,
        hidden_widths=pool.hidden_widths,
        activation=pool.activation,
        cov_diag=pool.cov_diag,
        cf=pool.cf,
        seed=pool.seed,
        n_kernels=pool.n_kernels,
        gate_statistic=pool.gate_statistic,
        likelihood_variant=pool.likelihood_variant,
    )
    sp.entries = pool.entries[:k]
    sp.exemplars = {i: pool.exemplars[i] for i in range(k)}
    return sp

def stream_rows(pool, tasks, novel_task=None):
    """TD/FD after each of tasks 1..4: stream the learned segments then a
    novel one (task k by default), 200 blocks per segment."""
    tds, fds = [], []
    for k in (1, 2, 3, 4):
        sp = subpool(pool, k)
        novel = k if novel_task is None else novel_task
        sched = [(t, 200) for t in range(k)] + [(novel, 200)]
        blocks = block_stream(tasks, sched, block_size=10, seed=pool.seed)
        record = stream_protocol(sp, blocks, DETECTOR, on_change="ignore")
        m = detection_metrics(record, DETECTOR.interval)
        tds.append(m.TD)
        fds.append(m.FD)
    return tds, fds


def gated_selection_accuracy(pool, tasks, block_size, blocks_per_task, seed, task_ids=None):
    """Mean over blocks of per-block accuracy; rejected blocks count zero."""
    ids = [t.task_id for t in tasks] if task_ids is None else task_ids
    schedule = [(t, blocks_per_task) for t in ids]
    blocks = block_stream(tasks, schedule, block_size=block_size, seed=seed)
    accs = []
    for b in blocks:
        pred = pool.infer_selection(b.X, rng_key=b.block_index)
        accs.append(float(np.mean(pred.global_label == b.y)) if pred.gated else 0.0)
    return float(np.mean(accs))


@pytest.fixture(scope="module")
def bench_pools(bench):
    return {seed: make_bench_pool(bench, seed) for seed in SEEDS}


@pytest.fixture(scope="module")
def bench_rows(bench, bench_pools):
    return {seed: stream_rows(bench_pools[seed], bench) for seed in SEEDS}


# ---------------------------------------------------------------------------
# 1: analytic gradients of the joint objective against central differences


def test_1_gradient_check():
    rng = np.random.default_rng(12345)
    h = 1e-5
    worst = 0.0
    for trial in range(50):
        input_dim = int(rng.integers(2, 17))
        widths = tuple(int(rng.integers(2, 33)) for _ in range(int(rng.integers(1, 3))))
        n_classes = int(rng.integers(2, 4))
        n_kernels = int(rng.integers(1, 4))
        activation = "relu" if rng.random() < 0.5 else "tanh"
        variant = "scaled" if rng.random() < 0.5 else "unit"
        lam = float(rng.choice([0.0, 0.1, 0.7, 3.0]))
        # every fifth trial exercises the replay complement objective
        if trial % 5 == 4:
            classifier_weight, likelihood_sign = 0.0, 1.0
        else:
            classifier_weight, likelihood_sign = 1.0, -1.0
        net = init_expert(
            input_dim=input_dim,
            hidden_widths=widths,
            class_map=list(range(n_classes)),
            n_kernels=n_kernels,
            activation=activation,
            likelihood_variant=variant,
            seed=int(rng.integers(0, 10_000)),
        )
        net.prob_layer.kernels = rng.normal(0.0, 1.0, size=net.prob_layer.kernels.shape)
        B = int(rng.integers(2, 9))
        X = rng.normal(0.0, 1.5, size=(B, input_dim))
        y = rng.integers(0, n_classes, size=B)
        _, grads = joint_loss(net, X, y, lam, classifier_weight, likelihood_sign)
        for name, p in net.parameters():
            flat = p.reshape(-1)
            analytic = grads[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp, _ = joint_loss(net, X, y, lam, classifier_weight, likelihood_sign)
                flat[i] = orig - h
                lm, _ = joint_loss(net, X, y, lam, classifier_weight, likelihood_sign)
                flat[i] = orig
                numeric = (lp - lm) / (2 * h)
                # unit floor keeps near-zero coordinates from amplifying
                # finite-difference roundoff
                err = abs(analytic[i] - numeric) / max(abs(numeric), 1.0)
                worst = max(worst, err)
    ok = worst < 1e-4
    verdict(1, "gradient-check", ok, f"50 networks, max relative error {worst:.2e}")


# ---------------------------------------------------------------------------
# 2: closed-form formulas against brute-force oracles


def oracle_potential(h, z, cov, clamp=700.0):
    q = 0.0
    for a, b, c in zip(h, z, cov):
        q += 0.5 * (a - b) ** 2 / c
    return np.exp(-min(q, clamp))


def oracle_likelihood(h, kernels, cov, variant):
    K = [oracle_potential(h, z, cov) for z in kernels]
    S, M = sum(K), max(K)
    denom = S + (1.0 - M) if variant == "unit" else S + len(K) * (1.0 - M)
    return S / denom


def oracle_metrics(labels, novel, signals, bits, interval):
    def group(mask):
        n = sum(mask)
        if n == 0:
            return 0.0, 0.0
        d = sum(s for s, m in zip(signals, mask) if m)
        r = sum(1 - b for b, m in zip(bits, mask) if m)
        return d / (n / interval), r / n

    td, tdr = group([bool(v) for v in novel])
    fd, fdr = group([not bool(v) for v in novel])
    return td, fd, tdr, fdr


def test_2_formula_oracles():
    rng = np.random.default_rng(99)
    checks = 0
    worst = 0.0

    for _ in range(1000):
        d = int(rng.integers(1, 8))
        h = rng.normal(0.0, 2.0, size=d)
        z = rng.normal(0.0, 2.0, size=d)
        cov = rng.uniform(0.1, 3.0, size=d)
        worst = max(worst, abs(potential(h, z, cov) - oracle_potential(h, z, cov)))
        checks += 1

    for i in range(1000):
        d = int(rng.integers(1, 6))
        n = int(rng.integers(1, 5))
        h = rng.normal(0.0, 2.0, size=d)
        kernels = rng.normal(0.0, 2.0, size=(n, d))
        cov = rng.uniform(0.2, 2.0, size=d)
        variant = "unit" if i % 2 == 0 else "scaled"
        got = task_likelihood(h, ProbLayer(kernels=kernels, cov_diag=cov), variant=variant)
        worst = max(worst, abs(got - oracle_likelihood(h, kernels, cov, variant)))
        checks += 1

    for i in range(1000):
        p = float(rng.uniform(-0.2, 1.2))
        delta = p if i % 10 == 0 else float(rng.uniform(-0.2, 1.2))
        assert tlf(p, delta) == (1 if p > delta else 0)
        checks += 1

    for _ in range(1000):
        interval = int(rng.integers(1, 9))
        bits = rng.integers(0, 2, size=interval)
        got = frequency_test(bits, interval)
        worst = max(worst, abs(got - sum(1 - int(b) for b in bits) / interval))
        checks += 1

    for _ in range(1000):
        interval = int(rng.integers(1, 6))
        # segment labels must be contiguous runs; novelty is per segment
        n_segments = int(rng.integers(1, 4))
        n = int(rng.integers(n_segments, 30))
        lengths = rng.multinomial(n - n_segments, np.ones(n_segments) / n_segments) + 1
        labels = np.repeat(np.arange(n_segments), lengths)
        seg_novel = rng.integers(0, 2, size=n_segments)
        novel = seg_novel[labels].astype(bool)
        signals = rng.integers(0, 2, size=labels.size)
        bits = rng.integers(0, 2, size=labels.size)
        record = DetectionRecord(
            block_index=np.arange(labels.size),
            segment_label=labels,
            selected_expert=np.zeros(labels.size, dtype=np.int64),
            mean_likelihood=rng.uniform(size=labels.size),
            std_likelihood=rng.uniform(size=labels.size),
            tlf_bits=bits,
            change_signal=signals,
            block_accuracy=np.full(labels.size, np.nan),
            novel_mask=novel,
            learned_at_start=(),
        )
        m = detection_metrics(record, interval)
        want = oracle_metrics(labels, novel, signals.tolist(), bits.tolist(), interval)
        for got_v, want_v in zip((m.TD, m.FD, m.TDR, m.FDR), want):
            worst = max(worst, abs(got_v - want_v))
        checks += 1

    for _ in range(1000):
        d = int(rng.integers(2, 9))
        rows = int(rng.integers(d + 1, 40))
        eps = float(rng.uniform(1e-3, 1e-1))
        X = rng.normal(0.0, 2.0, size=(rows, d))
        stats = fit_feature_stats(X, epsilon=eps)
        Xc = X - X.mean(axis=0)
        cov = Xc.T @ Xc / rows
        vals, vecs = np.linalg.eigh(cov)
        want = vecs @ np.diag(1.0 / np.sqrt(np.maximum(vals, 0.0) + eps)) @ vecs.T
        worst = max(worst, float(np.max(np.abs(stats.zca_transform - want))))
        worst = max(worst, float(np.max(np.abs(stats.mean - X.mean(axis=0)))))
        checks += 1

    ok = worst < 1e-10
    verdict(2, "formula-oracles", ok, f"{checks} random inputs, max deviation {worst:.2e}")


# ---------------------------------------------------------------------------
# 3: selection accuracy on the five-task benchmark


def test_3_selection_accuracy(bench, bench_pools):
    acc10, acc1 = [], []
    for seed in SEEDS:
        pool = bench_pools[seed]
        acc10.append(gated_selection_accuracy(pool, bench, 10, 20, seed))
        acc1.append(gated_selection_accuracy(pool, bench, 1, 50, seed))
    med10 = float(np.median(acc10))
    direction = all(a1 < a10 for a1, a10 in zip(acc1, acc10))
    ok = med10 >= 0.90 and direction
    verdict(
        3,
        "selection-accuracy",
        ok,
        f"block-10 median {med10:.4f} (>= 0.90), block-1 {np.round(acc1, 3).tolist()} "
        f"below block-10 {np.round(acc10, 3).tolist()}: {direction}",
    )


# ---------------------------------------------------------------------------
# 4: change detection rates after each task


def test_4_detection_rates(bench_rows):
    td = np.array([bench_rows[seed][0] for seed in SEEDS])
    fd = np.array([bench_rows[seed][1] for seed in SEEDS])
    td_med = np.median(td, axis=0)
    fd_med = np.median(fd, axis=0)
    ok = bool(np.all(td_med >= 0.8) and np.all(fd_med <= 0.15))
    verdict(
        4,
        "detection-rates",
        ok,
        f"TD medians {np.round(td_med, 3).tolist()} (>= 0.8), "
        f"FD medians {np.round(fd_med, 3).tolist()} (<= 0.15), 3 seeds",
    )


# ---------------------------------------------------------------------------
# 5: replay widens the gating margin and lifts single-sample decisions


def block_mean_likelihood(pool, tasks, k, t, seed, n_blocks=6):
    vals = []
    blocks = block_stream(tasks, [(t, n_blocks)], block_size=10, seed=seed)
    for b in blocks:
        like_views, _ = pool._entry_eval(pool.entries[k], b.X, pool._eval_rng(k, b.block_index))
        vals.append(float(like_views.mean(axis=0).mean()))
    return float(np.mean(vals))


def out_task_likelihood(pool, tasks):
    return np.array(
        [
            np.mean(
                [block_mean_likelihood(pool, tasks, k, t, 33 + t) for t in range(5) if t != k]
            )
            for k in range(5)
        ]
    )


def decision_accuracy(pool, tasks, block_size, n_blocks, seed):
    schedule = [(t.task_id, n_blocks) for t in tasks]
    blocks = block_stream(tasks, schedule, block_size=block_size, seed=seed)
    hits = []
    for b in blocks:
        means, _ = pool.block_likelihoods(b.X, rng_key=b.block_index)
        hits.append(int(np.argmax(means)) == b.segment_label)
    return float(np.mean(hits))


def test_5_replay_margin(bench, bench_pools, tmp_path):
    # replay mutates the experts, so run it on a saved copy of the seed-0 pool
    bench_pools[0].save(str(tmp_path / "pool_copy"))
    pool = ExpertPool.load(str(tmp_path / "pool_copy"))
    pre_out = out_task_likelihood(pool, bench)
    pre_acc = decision_accuracy(pool, bench, 1, 60, 7)
    pool.replay(ReplayConfig())
    post_out = out_task_likelihood(pool, bench)
    post_acc = decision_accuracy(pool, bench, 1, 60, 7)
    all_down = bool(np.all(post_out < pre_out))
    ok = all_down and post_acc > pre_acc and post_acc >= 0.85
    verdict(
        5,
        "replay-margin",
        ok,
        f"out-task likelihood down per expert: {all_down}, "
        f"block-1 decision accuracy {pre_acc:.4f} -> {post_acc:.4f} (>= 0.85)",
    )


# ---------------------------------------------------------------------------
# 6: ablation directions for the kernel count and the gate statistic


def tail_tasks(n_per_class, tail_frac, noise, n_features, seed):
    """Five line-separated 2-class tasks whose classes each leave a sparse
    tail at the within-task gap; a sixth novel distribution sits at task
    0's gap with its own labels."""
    rng = np.random.default_rng(seed)
    raw = []
    for t in range(5):
        Xs, ys = [], []
        for c in (0, 1):
            centre = np.zeros(n_features)
            centre[0] = 6.0 * t
            centre[1] = 2.0 if c == 1 else -2.0
            gap = np.zeros(n_features)
            gap[0] = 6.0 * t
            n_tail = int(round(tail_frac * n_per_class))
            Xc = centre + noise * rng.standard_normal((n_per_class - n_tail, n_features))
            Xt = gap + noise * rng.standard_normal((n_tail, n_features))
            Xs.append(np.vstack([Xc, Xt]))
            ys.append(np.full(n_per_class, t * 2 + c))
        raw.append((np.vstack(Xs), np.concatenate(ys)))
    Xn = noise * rng.standard_normal((2 * n_per_class, n_features))
    yn = np.repeat([10, 11], n_per_class)
    raw.append((Xn, yn))
    return raw


def small_stream_pool(tasks, seed, cov_diag, lam, hidden, activation, n_kernels=None,
                      gate="likelihood"):
    tc = TrainConfig(lam=lam, learning_rate=1e-3, batch_size=64, epochs=30, seed=seed)
    pool = ExpertPool(
        view_set=identity_view_set(),
        train_config=tc,
        hidden_widths=hidden,
        activation=activation,
        cov_diag=cov_diag,
        cf=4.0,
        seed=seed,
        n_kernels=n_kernels,
        gate_statistic=gate,
    )
    for task in list(tasks)[:5]:
        pool.learn_task(task.X_train, task.y_train, task_id=task.task_id)
    return pool


def test_6_ablation_directions(bench, bench_rows):
    # (a) a single central kernel goes blind on the benchmark streams the
    # class-count configuration detects
    one_td = []
    for seed in SEEDS:
        pool = make_bench_pool(bench, seed, n_tasks=4, n_kernels=1)
        one_td.append(stream_rows(pool, bench)[0])
    one_med = np.median(np.array(one_td), axis=0)
    base_med = np.median(np.array([bench_rows[seed][0] for seed in SEEDS]), axis=0)
    ok_a = bool(np.all(one_med < 0.2) and np.all(base_med >= 0.8))

    # (b) ten kernels anchor individual tail samples, so a novel
    # distribution at a learned task's tail slips through the filter
    ten_td, tail_base_td = [], []
    for seed in SEEDS:
        raw = tail_tasks(150, 0.2, 0.3, 2, seed)
        tasks = split_synthetic(raw, test_fraction=0.3, seed=seed)
        base = small_stream_pool(tasks, seed, 0.6, 0.3, (16,), "tanh")
        ten = small_stream_pool(tasks, seed, 0.6, 0.3, (16,), "tanh", n_kernels=10)
        tail_base_td.append(stream_rows(base, tasks, novel_task=5)[0])
        ten_td.append(stream_rows(ten, tasks, novel_task=5)[0])
    ten_med = np.median(np.array(ten_td), axis=0)
    tail_base_med = np.median(np.array(tail_base_td), axis=0)
    ok_b = bool(np.all(ten_med[1:] < 0.3) and np.all(tail_base_med >= 0.8))

    # (c) without the likelihood objective a softmax-confidence gate stays
    # saturated on far novel data and detects nothing
    soft_td, far_base_td = [], []
    for seed in SEEDS:
        raw = make_synthetic_tasks(
            n_tasks=5,
            classes_per_task=2,
            samples_per_class=150,
            n_features=16,
            class_separation=3.0,
            task_separation=14.0,
            noise=1.0,
            seed=seed,
        )
        tasks = split_synthetic(raw, test_fraction=0.3, seed=seed)
        base = small_stream_pool(tasks, seed, 16.0, 0.1, (64,), "relu")
        soft = small_stream_pool(tasks, seed, 16.0, 0.0, (64,), "relu", gate="softmax")
        far_base_td.append(stream_rows(base, tasks)[0])
        soft_td.append(stream_rows(soft, tasks)[0])
    soft_med = np.median(np.array(soft_td), axis=0)
    far_base_med = np.median(np.array(far_base_td), axis=0)
    ok_c = bool(np.all(soft_med <= 0.1) and np.all(far_base_med >= 0.8))

    ok = ok_a and ok_b and ok_c
    verdict(
        6,
        "ablation-directions",
        ok,
        f"one-kernel TD medians {np.round(one_med, 3).tolist()} < 0.2 vs base "
        f"{np.round(base_med, 3).tolist()}: {ok_a}; ten-kernel rows 2-4 "
        f"{np.round(ten_med[1:], 3).tolist()} < 0.3: {ok_b}; softmax gate "
        f"{np.round(soft_med, 3).tolist()} <= 0.1: {ok_c}",
    )


# ---------------------------------------------------------------------------
# 7: task-unknown stream grows one frozen expert per novel segment


def test_7_task_unknown_stream(bench):
    pool = make_bench_pool(bench, 0, n_tasks=0)
    freeze_ok = []
    grow = pool.learn_task_from_blocks

    def guarded(blocks, detector_config):
        before = [pool.parameter_hash(i) for i in range(pool.n_experts)]
        k = grow(blocks, detector_config)
        after = [pool.parameter_hash(i) for i in range(len(before))]
        freeze_ok.append(after == before)
        return k

    pool.learn_task_from_blocks = guarded
    schedule = [(t, 200) for t in range(5)]
    blocks = train_block_stream(bench, schedule, block_size=10, seed=0)
    stream_protocol(pool, blocks, DETECTOR, on_change="learn_new")

    five_experts = pool.n_experts == 5 and [e.task_id for e in pool.entries] == list(range(5))
    frozen = all(freeze_ok) and all(
        not p.flags.writeable for e in pool.entries for _, p in e.net.parameters()
    )
    accs = [
        gated_selection_accuracy(pool, bench, 10, 20, 11, task_ids=[t]) for t in range(5)
    ]
    mean_acc = float(np.mean(accs))
    ok = five_experts and frozen and mean_acc >= 0.90
    verdict(
        7,
        "task-unknown-stream",
        ok,
        f"experts {[e.task_id for e in pool.entries]}, earlier experts untouched: {frozen}, "
        f"post-hoc block-10 accuracy {np.round(accs, 3).tolist()} mean {mean_acc:.4f} (>= 0.90)",
    )


# ---------------------------------------------------------------------------
# 8: reruns reproduce metric files byte for byte


def test_8_determinism(tmp_path):
    config = {
        "dataset": "synthetic",
        "n_tasks": 2,
        "classes_per_task": 2,
        "samples_per_class": 40,
        "n_features": 6,
        "test_fraction": 0.3,
        "hidden_widths": [12],
        "activation": "tanh",
        "cov_diag": 0.5,
        "epochs": 6,
        "batch_size": 32,
        "learning_rate": 3e-3,
        "stream_block_size": 5,
        "blocks_per_segment": 12,
        "seed": 0,
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    outputs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(config_path), "--out", str(out)]) == 0
        assert main(
            ["eval", "--config", str(config_path), "--out", str(out), "--pool", str(out / "pool")]
        ) == 0
        assert main(
            ["stream", "--config", str(config_path), "--out", str(out), "--pool", str(out / "pool")]
        ) == 0
        outputs[run] = {
            "report": (out / "train_report.json").read_bytes(),
            "eval": (out / "eval.csv").read_bytes(),
            "table": (out / "likelihood_table.csv").read_bytes(),
            "metrics": (out / "metrics.json").read_bytes(),
            "trace": [
                line
                for line in (out / "trace.csv").read_text().splitlines()
                if not line.startswith("#")
            ],
        }
    same = {name: outputs["a"][name] == outputs["b"][name] for name in outputs["a"]}
    ok = all(same.values())
    verdict(
        8,
        "determinism",
        ok,
        "train/eval/stream reruns identical: "
        + ", ".join(f"{name}={'yes' if v else 'NO'}" for name, v in same.items()),
    )


# ---------------------------------------------------------------------------
# colour-image smoke run: invariants only on a 2-task 32x32x3 fixture


def test_cifar_format_smoke(tmp_path):
    rng = np.random.default_rng(0)

    def record(label, img):
        planes = np.transpose(img, (2, 0, 1))
        return bytes([label]) + planes.astype(np.uint8).tobytes()

    def class_images(c, n):
        base = np.zeros((32, 32, 3))
        base[..., c % 3] = 150.0
        base[(c * 8) % 32 : (c * 8) % 32 + 8, :, :] += 60.0
        imgs = base + rng.normal(0.0, 25.0, size=(n, 32, 32, 3))
        return np.clip(imgs, 0, 255).astype(np.uint8)

    train_blob, test_blob = b"", b""
    for c in range(4):
        for img in class_images(c, 60):
            train_blob += record(c, img)
        for img in class_images(c, 30):
            test_blob += record(c, img)
    (tmp_path / "data_batch_1.bin").write_bytes(train_blob)
    (tmp_path / "test_batch.bin").write_bytes(test_blob)

    Xtr, ytr, shape = load_cifar_batches([tmp_path / "data_batch_1.bin"])
    Xte, yte, _ = load_cifar_batches([tmp_path / "test_batch.bin"])
    tasks = split_tasks(Xtr, ytr, Xte, yte, [[0, 1], [2, 3]], image_shape=shape)

    view_set = default_view_set(shape, inference_repeats=3, seed=0,
                                kinds=("rotate", "shift", "flip"))
    tc = TrainConfig(lam=0.1, learning_rate=1e-3, batch_size=64, epochs=6, seed=0)
    pool = ExpertPool(view_set=view_set, train_config=tc, hidden_widths=(32,),
                      activation="tanh", cov_diag=0.5, cf=4.0, seed=0)
    pool.learn_task(tasks[0].X_train, tasks[0].y_train, task_id=0)
    hash_after_first = pool.parameter_hash(0)
    pool.learn_task(tasks[1].X_train, tasks[1].y_train, task_id=1)

    frozen = pool.parameter_hash(0) == hash_after_first and not any(
        p.flags.writeable for e in pool.entries for _, p in e.net.parameters()
    )
    dominance = []
    for task in tasks:
        blocks = block_stream(tasks, [(task.task_id, 6)], block_size=10, seed=5)
        for b in blocks:
            means, _ = pool.block_likelihoods(b.X, rng_key=b.block_index)
            dominance.append(int(np.argmax(means)) == task.task_id)
    diagonal = all(dominance)
    ok = frozen and diagonal
    verdict(
        "smoke",
        "colour-image-format",
        ok,
        f"first expert frozen across later learning: {frozen}, "
        f"own-task likelihood dominates on every block: {diagonal}",
    )
