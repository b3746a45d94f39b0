"""Multi-view input transformations applied identically at train and test.

A view set holds an ordered list of view functions.  Sample-wise views
normalise each sample on its own; feature-wise views (centralise,
normalise, whitening) are fit per task so every expert owns the
statistics of exactly the data it was trained on; geometric views
(rotate, shift, flip, shear) perturb image-shaped inputs by
nearest-neighbour resampling with zero fill outside the frame.

Non-image data cannot be meaningfully rotated or whitened pixel-wise, so
for vector inputs the view set degenerates to a single identity view.
"""

from dataclasses import dataclass, field

import numpy as np

from .validation import check_matrix

VIEW_KINDS = (
    "identity",
    "sample_centralise",
    "sample_std_normalise",
    "feature_centralise",
    "feature_normalise",
    "rotate",
    "shift",
    "flip",
    "shear",
    "zca",
)

FEATURE_KINDS = frozenset({"feature_centralise", "feature_normalise", "zca"})
GEOMETRIC_KINDS = frozenset({"rotate", "shift", "flip", "shear"})

DEFAULT_ROTATE_DEGREES = 270.0
DEFAULT_SHIFT_FRACTION = 0.1
DEFAULT_SHEAR_INTENSITY = 0.2
DEFAULT_ZCA_EPSILON = 1e-2
FLIP_AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class ViewSpec:
    kind: str
    max_degrees: float = DEFAULT_ROTATE_DEGREES
    shift_fraction: float = DEFAULT_SHIFT_FRACTION
    axes: tuple = FLIP_AXES
    shear_intensity: float = DEFAULT_SHEAR_INTENSITY
    zca_epsilon: float = DEFAULT_ZCA_EPSILON
    seed: int = 0

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise ValueError(f"unknown view kind '{self.kind}'")
        if not 0.0 <= self.max_degrees < 360.0:
            raise ValueError("max_degrees must lie in [0, 360)")
        if not 0.0 <= self.shift_fraction < 1.0:
            raise ValueError("shift_fraction must lie in [0, 1)")
        if self.zca_epsilon <= 0.0:
            raise ValueError("zca_epsilon must be > 0")
        if not self.axes or any(a not in FLIP_AXES for a in self.axes):
            raise ValueError(f"axes must be a non-empty subset of {FLIP_AXES}")

    @property
    def is_stochastic(self):
        if self.kind in ("rotate", "shift", "shear"):
            return True
        return self.kind == "flip" and len(self.axes) > 1

    def to_dict(self):
        return {
            "kind": self.kind,
            "max_degrees": self.max_degrees,
            "shift_fraction": self.shift_fraction,
            "axes": list(self.axes),
            "shear_intensity": self.shear_intensity,
            "zca_epsilon": self.zca_epsilon,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d):
        return ViewSpec(
            kind=d["kind"],
            max_degrees=d["max_degrees"],
            shift_fraction=d["shift_fraction"],
            axes=tuple(d["axes"]),
            shear_intensity=d["shear_intensity"],
            zca_epsilon=d["zca_epsilon"],
            seed=d["seed"],
        )


@dataclass
class ViewSet:
    """Ordered views plus the image geometry they apply to.

    `image_shape` is (rows, cols) or (rows, cols, channels); None marks
    vector data, for which every configured view is inapplicable and the
    set degenerates to m=1 identity.
    """

    views: list = field(default_factory=list)
    inference_repeats: int = 10
    image_shape: tuple = None

    def __post_init__(self):
        if self.inference_repeats < 1:
            raise ValueError("inference_repeats must be >= 1")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if len(self.image_shape) not in (2, 3):
                raise ValueError("image_shape must be (rows, cols[, channels])")

    def effective_views(self):
        if self.image_shape is None or not self.views:
            return [ViewSpec("identity")]
        return list(self.views)

    @property
    def m(self):
        return len(self.effective_views())

    def needs_stats(self):
        return any(v.kind in FEATURE_KINDS for v in self.effective_views())

    def to_dict(self):
        return {
            "views": [v.to_dict() for v in self.views],
            "inference_repeats": self.inference_repeats,
            "image_shape": list(self.image_shape) if self.image_shape else None,
        }

    @staticmethod
    def from_dict(d):
        return ViewSet(
            views=[ViewSpec.from_dict(v) for v in d["views"]],
            inference_repeats=d["inference_repeats"],
            image_shape=tuple(d["image_shape"]) if d["image_shape"] else None,
        )


def default_view_set(
    image_shape,
    inference_repeats=10,
    seed=0,
    max_degrees=DEFAULT_ROTATE_DEGREES,
    shift_fraction=DEFAULT_SHIFT_FRACTION,
    shear_intensity=DEFAULT_SHEAR_INTENSITY,
    zca_epsilon=DEFAULT_ZCA_EPSILON,
    kinds=None,
):
    """The standard nine-view set (or a named subset of it)."""
    if kinds is None:
        kinds = [k for k in VIEW_KINDS if k != "identity"]
    views = [
        ViewSpec(
            kind=k,
            max_degrees=max_degrees,
            shift_fraction=shift_fraction,
            shear_intensity=shear_intensity,
            zca_epsilon=zca_epsilon,
            seed=seed,
        )
        for k in kinds
    ]
    return ViewSet(views=views, inference_repeats=inference_repeats, image_shape=image_shape)


def identity_view_set(image_shape=None, inference_repeats=1):
    """Single identity view: the no-augmentation path."""
    return ViewSet(views=[], inference_repeats=inference_repeats, image_shape=image_shape)


# ---------------------------------------------------------------------------
# feature statistics (per task, owned by one expert)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    zca_transform: np.ndarray
    zca_epsilon: float
    task_id: int = -1

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "zca_transform": self.zca_transform.tolist(),
            "zca_epsilon": self.zca_epsilon,
            "task_id": self.task_id,
        }

    @staticmethod
    def from_dict(d):
        return FeatureStats(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            zca_transform=np.asarray(d["zca_transform"], dtype=np.float64),
            zca_epsilon=float(d["zca_epsilon"]),
            task_id=int(d["task_id"]),
        )


def fit_feature_stats(task_data, epsilon=DEFAULT_ZCA_EPSILON, task_id=-1):
    """Per-feature mean/std and the whitening transform of one task's data.

    The whitening matrix is U diag(1/sqrt(eig + epsilon)) U^T from the
    eigendecomposition of the population covariance of the centred data;
    epsilon keeps it finite when features are constant or collinear.
    """
    X = check_matrix(task_data, "task_data", min_rows=2)
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    scale = 1.0 / np.sqrt(eigvals + epsilon)
    zca = (eigvecs * scale) @ eigvecs.T
    return FeatureStats(mean=mean, std=std, zca_transform=zca, zca_epsilon=float(epsilon), task_id=task_id)


# ---------------------------------------------------------------------------
# geometric primitives (nearest neighbour, zero fill)


def _snap(x):
    r = np.round(x)
    return np.where(np.abs(x - r) < 1e-12, r, x)


def _gather_pixels(images, src_rows, src_cols):
    """images (B, r, c[, ch]); per-sample integer source maps (B, r, c)."""
    b, r, c = images.shape[0], images.shape[1], images.shape[2]
    valid = (src_rows >= 0) & (src_rows < r) & (src_cols >= 0) & (src_cols < c)
    flat = np.clip(src_rows, 0, r - 1) * c + np.clip(src_cols, 0, c - 1)
    flat = flat.reshape(b, r * c)
    if images.ndim == 4:
        ch = images.shape[3]
        pix = images.reshape(b, r * c, ch)
        out = np.take_along_axis(pix, flat[:, :, None], axis=1)
        out = out * valid.reshape(b, r * c, 1)
        return out.reshape(images.shape)
    pix = images.reshape(b, r * c)
    out = np.take_along_axis(pix, flat, axis=1) * valid.reshape(b, r * c)
    return out.reshape(images.shape)


def _affine_sources(shape, cos_t, sin_t, shear, b):
    """Per-sample nearest source coordinates for rotation+shear about the centre."""
    r, c = shape[0], shape[1]
    cy, cx = (r - 1) / 2.0, (c - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(c, dtype=np.float64), np.arange(r, dtype=np.float64))
    dx = (jj - cx)[None, :, :]
    dy = (ii - cy)[None, :, :]
    cos_t = cos_t.reshape(b, 1, 1)
    sin_t = sin_t.reshape(b, 1, 1)
    shear = shear.reshape(b, 1, 1)
    # inverse map: undo shear (x only), then undo rotation
    ux = dx - shear * dy
    uy = dy
    sx = cos_t * ux + sin_t * uy + cx
    sy = -sin_t * ux + cos_t * uy + cy
    src_cols = np.rint(_snap(sx)).astype(np.int64)
    src_rows = np.rint(_snap(sy)).astype(np.int64)
    return src_rows, src_cols


def _as_images(batch, image_shape):
    b = batch.shape[0]
    return batch.reshape((b,) + tuple(image_shape))


def rotate_images(batch, image_shape, degrees):
    """Rotate each sample by its own angle (degrees, clockwise on screen)."""
    imgs = _as_images(batch, image_shape)
    theta = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    cos_t, sin_t = _snap(np.cos(theta)), _snap(np.sin(theta))
    sr, sc = _affine_sources(image_shape, cos_t, sin_t, np.zeros_like(cos_t), imgs.shape[0])
    return _gather_pixels(imgs, sr, sc).reshape(batch.shape)


def shear_images(batch, image_shape, intensities):
    imgs = _as_images(batch, image_shape)
    s = np.asarray(intensities, dtype=np.float64)
    ones = np.ones_like(s)
    sr, sc = _affine_sources(image_shape, ones, np.zeros_like(s), s, imgs.shape[0])
    return _gather_pixels(imgs, sr, sc).reshape(batch.shape)


def shift_images(batch, image_shape, row_shifts, col_shifts):
    imgs = _as_images(batch, image_shape)
    b, r, c = imgs.shape[0], image_shape[0], image_shape[1]
    jj, ii = np.meshgrid(np.arange(c), np.arange(r))
    sr = ii[None, :, :] - np.asarray(row_shifts).reshape(b, 1, 1)
    sc = jj[None, :, :] - np.asarray(col_shifts).reshape(b, 1, 1)
    return _gather_pixels(imgs, sr.astype(np.int64), sc.astype(np.int64)).reshape(batch.shape)


def flip_images(batch, image_shape, axis):
    imgs = _as_images(batch, image_shape)
    if axis == "horizontal":
        out = imgs[:, :, ::-1]
    elif axis == "vertical":
        out = imgs[:, ::-1, :]
    else:
        raise ValueError(f"unknown flip axis '{axis}'")
    return np.ascontiguousarray(out).reshape(batch.shape)


# ---------------------------------------------------------------------------
# view application


def apply_view(spec, stats, batch, rng=None, image_shape=None):
    """Apply one view to a batch (B, D); output has the same shape.

    Feature-wise kinds require `stats`; geometric kinds require
    `image_shape`; stochastic kinds require `rng` and draw fresh
    parameters per sample.
    """
    X = check_matrix(batch)
    kind = spec.kind
    if kind == "identity":
        return X.copy()
    if kind == "sample_centralise":
        return X - X.mean(axis=1, keepdims=True)
    if kind == "sample_std_normalise":
        std = X.std(axis=1, keepdims=True)
        return np.where(std > 0, X / np.where(std > 0, std, 1.0), X)
    if kind in FEATURE_KINDS:
        if stats is None:
            raise ValueError(f"view '{kind}' requires fitted feature statistics")
        if kind == "feature_centralise":
            return X - stats.mean
        if kind == "feature_normalise":
            safe = np.where(stats.std > 0, stats.std, 1.0)
            return X / safe
        return (X - stats.mean) @ stats.zca_transform
    if kind in GEOMETRIC_KINDS:
        if image_shape is None:
            raise ValueError(f"view '{kind}' requires image-shaped data")
        b = X.shape[0]
        if kind == "flip":
            if len(spec.axes) == 1:
                return flip_images(X, image_shape, spec.axes[0])
            axis = spec.axes[rng.integers(0, len(spec.axes))]
            return flip_images(X, image_shape, axis)
        if rng is None:
            raise ValueError(f"view '{kind}' is stochastic and requires an rng")
        if kind == "rotate":
            degrees = rng.uniform(0.0, spec.max_degrees, size=b)
            return rotate_images(X, image_shape, degrees)
        if kind == "shift":
            r, c = image_shape[0], image_shape[1]
            dr = np.rint(rng.uniform(-1.0, 1.0, size=b) * spec.shift_fraction * r)
            dc = np.rint(rng.uniform(-1.0, 1.0, size=b) * spec.shift_fraction * c)
            return shift_images(X, image_shape, dr, dc)
        if kind == "shear":
            s = rng.uniform(-spec.shear_intensity, spec.shear_intensity, size=b)
            return shear_images(X, image_shape, s)
    raise ValueError(f"unhandled view kind '{kind}'")


def augment_batch(view_set, stats, batch, rng):
    """Apply every effective view once; returns a list of m batches.

    Views are applied in order, consuming the rng only for stochastic
    draws, so equal seeds give bit-identical output.
    """
    X = check_matrix(batch)
    if X.shape[0] == 0:
        raise ValueError("batch is empty")
    out = []
    for spec in view_set.effective_views():
        out.append(apply_view(spec, stats, X, rng=rng, image_shape=view_set.image_shape))
    return out


def inference_variants(view_set, stats, batch, rng):
    """Per-view batch variants for inference averaging.

    Deterministic views yield a single variant; stochastic views are
    re-drawn `inference_repeats` times.  Returns a list of (view_index,
    variants) pairs where variants is a list of arrays shaped like batch.
    """
    X = check_matrix(batch)
    out = []
    for vi, spec in enumerate(view_set.effective_views()):
        reps = view_set.inference_repeats if spec.is_stochastic else 1
        variants = [
            apply_view(spec, stats, X, rng=rng, image_shape=view_set.image_shape)
            for _ in range(reps)
        ]
        out.append((vi, variants))
    return out
