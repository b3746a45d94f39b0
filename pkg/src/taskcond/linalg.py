"""Dense float64 array primitives and seeded random number generation.

Matrices are plain numpy float64 arrays in row-major (C) order: rows are
samples, columns are features.  Everything downstream assumes 64-bit
floats so that finite-difference gradient checks have headroom.
"""

import numpy as np

# Generator family recorded in checkpoints. Changing it would silently
# break replay of old experiments, so it is pinned by name here.
RNG_ALGORITHM = "pcg64"


def make_rng(seed, *key):
    """Deterministic generator for `seed`, optionally sub-keyed.

    Extra integer key parts derive independent streams (per epoch, per
    view, per block...) that are stable across runs and platforms.
    """
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def as_matrix(a):
    """Coerce to a 2-D float64 C-order array, validating finiteness."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a, b):
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"dimension mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def logsumexp(v):
    """log(sum(exp(v))) computed with a max shift so large inputs cannot overflow."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = np.max(v)
    return float(m + np.log(np.sum(np.exp(v - m))))


def stable_softmax(v):
    """Softmax of a vector, shift-invariant and overflow-safe.

    Entries are strictly inside (0, 1) and sum to 1 up to float64
    round-off for any finite input.
    """
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def softmax_rows(m):
    """Row-wise stable softmax of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - np.max(m, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def logsumexp_rows(m):
    """Row-wise logsumexp of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    mx = np.max(m, axis=1)
    return mx + np.log(np.sum(np.exp(m - mx[:, None]), axis=1))
