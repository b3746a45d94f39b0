"""One expert network: shared hidden layers, a classifier head, and a
kernel-based likelihood layer trained jointly.

The likelihood layer holds a set of kernel vectors in the last hidden
space.  Each kernel scores an input by a Gaussian potential of its
distance to the hidden activation; the scores are combined into a single
task-membership probability in (0, 1].  Training minimises softmax
cross-entropy minus a weighted log of that probability, both averaged
over the batch, with a fully hand-derived backward pass (including the
kernel gradients) so the whole thing stays dependency-free and
finite-difference checkable.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import RNG_ALGORITHM, logsumexp_rows, make_rng, softmax_rows
from .validation import check_labels, check_matrix, check_positive_vector, check_vector

# Quadratic forms are clamped here before exponentiation so the potential
# never underflows to exactly zero and log-likelihoods stay finite.
DEFAULT_CLAMP = 700.0

LIKELIHOOD_VARIANTS = ("unit", "scaled")


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite parameter."""


def _activation(name):
    if name == "relu":
        return lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(np.float64)
    if name == "tanh":
        return np.tanh, lambda a: 1.0 - np.tanh(a) ** 2
    raise ValueError(f"unknown activation '{name}'")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"


@dataclass
class ProbLayer:
    """Kernel vectors plus a fixed diagonal covariance.

    `kernels` is (n, hidden_width); `cov_diag` is the pre-defined
    positive diagonal of the covariance (not trained).
    """

    kernels: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        if self.kernels.ndim != 2 or self.kernels.shape[0] < 1:
            raise ValueError("kernels must be a (n >= 1, width) array")
        self.cov_diag = check_positive_vector(
            self.cov_diag, "cov_diag", width=self.kernels.shape[1]
        )
        if not np.all(np.isfinite(self.kernels)):
            raise ValueError("kernels contain non-finite values")

    @property
    def n(self):
        return self.kernels.shape[0]


@dataclass
class TrainConfig:
    lam: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class TrainingReport:
    loss_curve: list
    likelihood_curve: list
    train_accuracy: float
    mean_task_likelihood: float


@dataclass
class ExpertNetwork:
    """A frozen-after-training expert for exactly one task."""

    layers: list
    classifier_W: np.ndarray
    classifier_b: np.ndarray
    prob_layer: ProbLayer
    task_id: int = 0
    class_map: list = field(default_factory=list)
    clamp: float = DEFAULT_CLAMP
    likelihood_variant: str = "unit"
    seed: int = 0

    @property
    def input_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def hidden_width(self):
        return self.layers[-1].W.shape[1]

    @property
    def n_classes(self):
        return self.classifier_W.shape[1]

    def parameters(self):
        """Live references to every trainable array, in a fixed order."""
        params = []
        for i, layer in enumerate(self.layers):
            params.append((f"hidden{i}.W", layer.W))
            params.append((f"hidden{i}.b", layer.b))
        params.append(("classifier.W", self.classifier_W))
        params.append(("classifier.b", self.classifier_b))
        params.append(("prob.kernels", self.prob_layer.kernels))
        return params

    def all_finite(self):
        return all(np.all(np.isfinite(p)) for _, p in self.parameters())


def init_expert(
    input_dim,
    hidden_widths,
    class_map,
    n_kernels=None,
    activation="relu",
    cov_diag=1.0,
    clamp=DEFAULT_CLAMP,
    likelihood_variant="unit",
    task_id=0,
    seed=0,
):
    """Build an expert with seeded Glorot-style weights and placeholder kernels.

    Kernels start at zero and are positioned on the first training batch
    (see `train_epochs`), so a freshly built expert is not yet usable for
    likelihood scoring.
    """
    if likelihood_variant not in LIKELIHOOD_VARIANTS:
        raise ValueError(f"unknown likelihood_variant '{likelihood_variant}'")
    class_map = [int(c) for c in class_map]
    n_classes = len(class_map)
    if n_classes < 1:
        raise ValueError("class_map must name at least one class")
    n_kernels = n_classes if n_kernels is None else int(n_kernels)
    if n_kernels < 1:
        raise ValueError("n_kernels must be >= 1")
    widths = [int(input_dim)] + [int(w) for w in hidden_widths]
    if len(widths) < 2:
        raise ValueError("at least one hidden layer is required")
    rng = make_rng(seed, 0)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        layers.append(
            Layer(
                W=rng.normal(0.0, scale, size=(fan_in, fan_out)),
                b=np.zeros(fan_out),
                activation=activation,
            )
        )
    hidden = widths[-1]
    scale = np.sqrt(2.0 / (hidden + n_classes))
    classifier_W = rng.normal(0.0, scale, size=(hidden, n_classes))
    classifier_b = np.zeros(n_classes)
    cov = np.full(hidden, float(cov_diag)) if np.isscalar(cov_diag) else np.asarray(cov_diag, float)
    prob = ProbLayer(kernels=np.zeros((n_kernels, hidden)), cov_diag=cov)
    return ExpertNetwork(
        layers=layers,
        classifier_W=classifier_W,
        classifier_b=classifier_b,
        prob_layer=prob,
        task_id=task_id,
        class_map=class_map,
        clamp=float(clamp),
        likelihood_variant=likelihood_variant,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# forward computations


def potential(hidden, kernel, cov_diag, clamp=DEFAULT_CLAMP):
    """Gaussian potential exp(-0.5 * sum((h - z)^2 / cov)) in (0, 1].

    Equals 1 exactly when hidden == kernel; symmetric in its two vector
    arguments; strictly decreasing in the covariance-weighted distance.
    """
    hidden = check_vector(hidden, "hidden")
    kernel = check_vector(kernel, "kernel", width=hidden.shape[0])
    cov_diag = check_positive_vector(cov_diag, "cov_diag", width=hidden.shape[0])
    d = hidden - kernel
    q = 0.5 * np.sum(d * d / cov_diag)
    return float(np.exp(-min(q, clamp)))


def _potentials(hidden_batch, prob, clamp):
    """Batched potentials: returns (K, diffs, active) for a (B, H) batch.

    K is (B, n); diffs is (B, n, H); active marks entries whose quadratic
    form was below the clamp (gradient flows only through those).
    """
    diffs = hidden_batch[:, None, :] - prob.kernels[None, :, :]
    q = 0.5 * np.einsum("bnh,h->bn", diffs * diffs, 1.0 / prob.cov_diag)
    active = q < clamp
    K = np.exp(-np.minimum(q, clamp))
    return K, diffs, active


def _combine(K, variant):
    """Combine per-kernel potentials into a per-sample likelihood in (0, 1].

    "unit" denominator adds (1 - max K); "scaled" adds n * (1 - max K).
    Both reduce to K itself when there is a single kernel.
    """
    n = K.shape[1]
    S = np.sum(K, axis=1)
    M = np.max(K, axis=1)
    if variant == "unit":
        T = S + 1.0 - M
    elif variant == "scaled":
        T = S + n * (1.0 - M)
    else:
        raise ValueError(f"unknown likelihood_variant '{variant}'")
    return S / T, S, M, T


def task_likelihood(hidden, prob, variant="unit", clamp=DEFAULT_CLAMP):
    """Normalised kernel-potential score for one hidden vector.

    With potentials K_1..K_n this is sum(K) / (sum(K) + 1 - max(K)); it
    lies in (0, 1], hits 1 iff max(K) == 1, and reduces to K_1 for n=1.
    """
    hidden = check_vector(hidden, "hidden", width=prob.kernels.shape[1])
    K, _, _ = _potentials(hidden.reshape(1, -1), prob, clamp)
    P, _, _, _ = _combine(K, variant)
    return float(P[0])


def hidden_forward(net, batch):
    """Run the shared layers; returns (last_hidden, caches for backprop)."""
    h = check_matrix(batch)
    if h.shape[1] != net.input_dim:
        raise ValueError(
            f"batch width {h.shape[1]} does not match network input {net.input_dim}"
        )
    caches = []
    for layer in net.layers:
        act, _ = _activation(layer.activation)
        a = h @ layer.W + layer.b
        caches.append((h, a))
        h = act(a)
    return h, caches


def forward(net, batch):
    """Full forward pass.

    Returns (class_logits, per-sample task likelihood).  Logits are
    (B, C) over the expert's task-local classes; likelihoods are in
    (0, 1].
    """
    h, _ = hidden_forward(net, batch)
    logits = h @ net.classifier_W + net.classifier_b
    K, _, _ = _potentials(h, net.prob_layer, net.clamp)
    P, _, _, _ = _combine(K, net.likelihood_variant)
    return logits, P


def batch_likelihoods(net, batch):
    """Per-sample task likelihood of a raw batch under this expert."""
    h, _ = hidden_forward(net, batch)
    K, _, _ = _potentials(h, net.prob_layer, net.clamp)
    P, _, _, _ = _combine(K, net.likelihood_variant)
    return P


# ---------------------------------------------------------------------------
# joint loss and hand-derived gradients


def joint_loss(net, batch, labels, lam, classifier_weight=1.0, likelihood_sign=-1.0):
    """Joint training objective and its gradients.

    With the default likelihood_sign=-1 the loss is

        classifier_weight * mean(cross-entropy) - lam * mean(log P)

    which maximises the task likelihood P.  likelihood_sign=+1 flips the
    likelihood term to -lam * mean(log(1 - P)), maximising the
    probability that samples do NOT belong to this task; replay uses it
    on out-task exemplars (with classifier_weight=0 when no labels
    apply).  The complement form is self-limiting: its pull vanishes as
    P approaches 0, unlike a raw log P penalty which grows without
    bound.  Gradients cover every trainable array including the kernels.
    """
    X = check_matrix(batch)
    B = X.shape[0]
    h, caches = hidden_forward(net, X)
    prob = net.prob_layer

    grads = {name: np.zeros_like(p) for name, p in net.parameters()}
    delta_h = np.zeros_like(h)
    loss = 0.0

    if classifier_weight != 0.0:
        y = check_labels(labels, n_classes=net.n_classes, name="labels")
        if y.shape[0] != B:
            raise ValueError("labels and batch disagree on sample count")
        logits = h @ net.classifier_W + net.classifier_b
        ce = logsumexp_rows(logits) - logits[np.arange(B), y]
        loss += classifier_weight * float(np.mean(ce))
        dlogits = softmax_rows(logits)
        dlogits[np.arange(B), y] -= 1.0
        dlogits *= classifier_weight / B
        grads["classifier.W"] += h.T @ dlogits
        grads["classifier.b"] += dlogits.sum(axis=0)
        delta_h += dlogits @ net.classifier_W.T

    if lam != 0.0:
        K, diffs, active = _potentials(h, prob, net.clamp)
        P, S, M, T = _combine(K, net.likelihood_variant)
        argmax = np.argmax(K, axis=1)
        cscale = 1.0 if net.likelihood_variant == "unit" else float(prob.n)
        is_max = np.zeros_like(K)
        is_max[np.arange(B), argmax] = 1.0
        if likelihood_sign < 0:
            loss += -lam * float(np.mean(np.log(P)))
            # d log P / dK_i = 1/S - (1 - m_i * c) / T, where m_i marks
            # the max kernel and c is the variant's complement scale.
            dlogQ_dK = 1.0 / S[:, None] - (1.0 - is_max * cscale) / T[:, None]
        else:
            # 1 - P = c * (1 - M) / T, so
            # d log(1-P) / dK_i = -m_i / (1 - M) - (1 - m_i * c) / T.
            one_minus_M = np.maximum(1.0 - M, 1e-12)
            loss += -lam * float(np.mean(np.log(cscale * one_minus_M / T)))
            dlogQ_dK = -is_max / one_minus_M[:, None] - (1.0 - is_max * cscale) / T[:, None]
        coeff = (-lam / B) * dlogQ_dK * K * active
        inv_cov = 1.0 / prob.cov_diag
        grads["prob.kernels"] += np.einsum("bn,bnh->nh", coeff, diffs) * inv_cov
        delta_h += -np.einsum("bn,bnh->bh", coeff, diffs) * inv_cov

    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        h_in, a = caches[i]
        _, dact = _activation(layer.activation)
        delta_a = delta_h * dact(a)
        grads[f"hidden{i}.W"] += h_in.T @ delta_a
        grads[f"hidden{i}.b"] += delta_a.sum(axis=0)
        delta_h = delta_a @ layer.W.T

    return loss, grads


# ---------------------------------------------------------------------------
# optimisation


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params}
        self.v = {name: np.zeros_like(p) for name, p in params}

    def step(self, params, grads):
        self.t += 1
        for name, p in params:
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1**self.t)
            vhat = self.v[name] / (1 - self.b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, p in params:
            p -= self.lr * grads[name]


def make_optimizer(config, params):
    if config.optimizer == "adam":
        return _Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    return _Sgd(config.learning_rate)


def _init_kernels(net, first_batch, labels, seed):
    """Place kernels at per-class mean hidden activations of a warm-up batch.

    With fewer kernels than classes every kernel anchors to the batch
    mean (a general representation of the whole task); extra kernels
    beyond the class count anchor to individual warm-up samples, so an
    over-provisioned layer tracks single sample patterns rather than
    class centres.  Classes absent from the warm-up batch fall back to
    the batch-wide mean.
    """
    h, _ = hidden_forward(net, first_batch)
    y = check_labels(labels, n_classes=net.n_classes)
    rng = make_rng(seed, 1)
    overall = h.mean(axis=0)
    n = net.prob_layer.n
    C = net.n_classes
    kernels = np.empty((n, h.shape[1]))
    for i in range(n):
        if n < C:
            kernels[i] = overall
        elif i >= C:
            kernels[i] = h[rng.integers(0, h.shape[0])]
        else:
            mask = y == i
            kernels[i] = h[mask].mean(axis=0) if np.any(mask) else overall
    net.prob_layer.kernels = kernels


def train_epochs(net, X, y, config, batch_hook=None):
    """Train an expert on one task's data; deterministic given the seed.

    Labels are task-local class indices.  Kernels are initialised from
    the first batch if the layer is still at its zero placeholder.  The
    report tracks per-epoch mean loss and the mean task likelihood of the
    training data measured after each epoch (epoch 0 = after kernel
    placement, before any update).

    `batch_hook(epoch, rng) -> (X_epoch, y_epoch)` lets callers re-draw
    augmented data each epoch; the default trains on X as given.
    """
    X = check_matrix(X)
    y = check_labels(y, n_classes=net.n_classes)
    if X.shape[0] == 0:
        raise ValueError("training data is empty")
    params = net.parameters()
    opt = make_optimizer(config, params)

    def epoch_data(epoch):
        if batch_hook is None:
            return X, y
        return batch_hook(epoch, make_rng(config.seed, 2, epoch))

    Xe, ye = epoch_data(0)
    order = make_rng(config.seed, 3, 0).permutation(Xe.shape[0])
    first = order[: config.batch_size]
    if not np.any(net.prob_layer.kernels):
        _init_kernels(net, Xe[first], ye[first], config.seed)

    loss_curve = []
    likelihood_curve = [float(np.mean(batch_likelihoods(net, X)))]
    for epoch in range(config.epochs):
        if epoch > 0:
            Xe, ye = epoch_data(epoch)
            order = make_rng(config.seed, 3, epoch).permutation(Xe.shape[0])
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = joint_loss(net, Xe[idx], ye[idx], config.lam)
            opt.step(params, grads)
            losses.append(loss)
        if not net.all_finite():
            raise DivergenceError(
                f"non-finite parameter after epoch {epoch} "
                f"(lr={config.learning_rate}, lam={config.lam})"
            )
        loss_curve.append(float(np.mean(losses)))
        likelihood_curve.append(float(np.mean(batch_likelihoods(net, X))))

    logits, _ = forward(net, X)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return TrainingReport(
        loss_curve=loss_curve,
        likelihood_curve=likelihood_curve,
        train_accuracy=acc,
        mean_task_likelihood=likelihood_curve[-1],
    )


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def to_dict(net):
    return {
        "format_version": CHECKPOINT_VERSION,
        "rng_algorithm": RNG_ALGORITHM,
        "seed": net.seed,
        "task_id": net.task_id,
        "class_map": list(net.class_map),
        "architecture": {
            "input_dim": net.input_dim,
            "hidden_widths": [l.W.shape[1] for l in net.layers],
            "activations": [l.activation for l in net.layers],
            "n_classes": net.n_classes,
            "n_kernels": net.prob_layer.n,
        },
        "covariance": net.prob_layer.cov_diag.tolist(),
        "clamp": net.clamp,
        "likelihood_variant": net.likelihood_variant,
        "params": {
            "hidden": [{"W": l.W.tolist(), "b": l.b.tolist()} for l in net.layers],
            "classifier": {"W": net.classifier_W.tolist(), "b": net.classifier_b.tolist()},
            "kernels": net.prob_layer.kernels.tolist(),
        },
    }


def from_dict(d):
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
    arch = d["architecture"]
    layers = [
        Layer(
            W=np.asarray(p["W"], dtype=np.float64),
            b=np.asarray(p["b"], dtype=np.float64),
            activation=act,
        )
        for p, act in zip(d["params"]["hidden"], arch["activations"])
    ]
    prob = ProbLayer(
        kernels=np.asarray(d["params"]["kernels"], dtype=np.float64),
        cov_diag=np.asarray(d["covariance"], dtype=np.float64),
    )
    return ExpertNetwork(
        layers=layers,
        classifier_W=np.asarray(d["params"]["classifier"]["W"], dtype=np.float64),
        classifier_b=np.asarray(d["params"]["classifier"]["b"], dtype=np.float64),
        prob_layer=prob,
        task_id=int(d["task_id"]),
        class_map=[int(c) for c in d["class_map"]],
        clamp=float(d["clamp"]),
        likelihood_variant=d["likelihood_variant"],
        seed=int(d["seed"]),
    )


def save(net, path):
    with open(path, "w") as f:
        json.dump(to_dict(net), f)


def load(path):
    with open(path) as f:
        return from_dict(json.load(f))
