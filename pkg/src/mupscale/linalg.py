"""Duplication / partition operators and seeded Gaussian sampling.

All arrays are float64 numpy arrays. The storage layout for duplication is
contiguous-block: ``dup_vec([a, b], 2) == [a, a, b, b]``, i.e. ``v ⊗ 1_k``.
Under that layout the strided partition ``v[i-1::k]`` recovers the original
vector, which is the convention the infinite-width module uses.
"""

import numpy as np

from .exceptions import InvalidMultiplierError, InvalidParameterError, ShapeMismatchError


def _check_multiplier(k, name="k"):
    if int(k) != k or k < 1:
        raise InvalidMultiplierError(f"{name} must be a positive integer, got {k!r}")
    return int(k)


def as_vec(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatchError(f"expected a vector, got shape {v.shape}")
    return v


def as_mat(W):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got shape {W.shape}")
    return W


def dup_vec(v, k):
    """Return ``v ⊗ 1_k``: each coordinate repeated in a contiguous block of k."""
    k = _check_multiplier(k)
    return np.repeat(as_vec(v), k)


def dup_mat(W, k_out, k_in, scale=1.0):
    """Return ``scale * (W ⊗ 1_{k_out} 1_{k_in}^T)``.

    Entry (i, j) of ``W`` becomes a constant ``k_out x k_in`` block.
    """
    k_out = _check_multiplier(k_out, "k_out")
    k_in = _check_multiplier(k_in, "k_in")
    W = as_mat(W)
    out = np.repeat(np.repeat(W, k_out, axis=0), k_in, axis=1)
    if scale != 1.0:
        out *= scale
    return out


def partition_vec(v, k, i, mode="stride"):
    """Return the i-th (1-based) of k sub-vectors of ``v``.

    ``mode="stride"`` gives ``(v_i, v_{i+k}, ...)``; this inverts ``dup_vec``.
    ``mode="block"`` gives the i-th contiguous chunk of length ``len(v) / k``.
    """
    k = _check_multiplier(k)
    v = as_vec(v)
    if v.size % k:
        raise ShapeMismatchError(f"length {v.size} is not divisible by k={k}")
    if not 1 <= i <= k:
        raise InvalidParameterError(f"partition index {i} outside [1, {k}]")
    if mode == "stride":
        return v[i - 1 :: k].copy()
    if mode == "block":
        m = v.size // k
        return v[(i - 1) * m : i * m].copy()
    raise InvalidParameterError(f"unknown partition mode {mode!r}")


def partition_mat(W, k_out, k_in, i, j):
    """Strided sub-matrix (i, j), 1-based; inverts ``dup_mat`` up to its scale."""
    k_out = _check_multiplier(k_out, "k_out")
    k_in = _check_multiplier(k_in, "k_in")
    W = as_mat(W)
    if W.shape[0] % k_out or W.shape[1] % k_in:
        raise ShapeMismatchError(f"shape {W.shape} not divisible by ({k_out}, {k_in})")
    if not (1 <= i <= k_out and 1 <= j <= k_in):
        raise InvalidParameterError(f"partition index ({i}, {j}) out of range")
    return W[i - 1 :: k_out, j - 1 :: k_in].copy()


def max_partition_spread(W, k_out, k_in):
    """Largest entrywise difference between any two strided partitions of ``W``.

    Zero exactly when ``W`` is a block duplicate, so this measures how far
    training (or noise) has broken the widening symmetry.
    """
    W = as_mat(W)
    blocks = np.stack(
        [partition_mat(W, k_out, k_in, i, j) for i in range(1, k_out + 1) for j in range(1, k_in + 1)]
    )
    return float(np.max(blocks.max(axis=0) - blocks.min(axis=0)))


def make_rng(seed, *stream):
    """Counter-based (Philox) generator for ``seed``, optionally on a child stream.

    ``make_rng(seed, 3, 1)`` is a deterministic, independent stream derived
    from ``seed`` with spawn key ``(3, 1)``; use distinct keys for data order,
    initialization and noise so one can be varied without perturbing the rest.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def gauss_mat(rng, rows, cols, std):
    """i.i.d. N(0, std^2) matrix of shape (rows, cols)."""
    if not np.isfinite(std) or std < 0:
        raise InvalidParameterError(f"std must be finite and >= 0, got {std!r}")
    # draw even when std == 0 so the stream position never depends on std
    out = rng.standard_normal((rows, cols))
    if std == 0:
        return np.zeros((rows, cols))
    out *= std
    return out


def gauss_vec(rng, n, std):
    return gauss_mat(rng, 1, n, std)[0]


# spawn keys for the independent RNG streams of one run
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_NOISE = 2
STREAM_ORDER = 3
