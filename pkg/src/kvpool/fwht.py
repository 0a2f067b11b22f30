"""Fast Walsh-Hadamard transform along the last axis.

The Sylvester-ordered Hadamard matrix satisfies H @ H = d * I, so the
normalized map x -> H x / sqrt(d) is orthogonal and its own inverse.
``rotate_forward`` and ``rotate_inverse`` both apply it; they exist as
separate names so call sites read as encode/decode.

The butterfly runs in O(d log d) and vectorizes over leading axes, so a
whole ``[batch, heads, tokens, d]`` block rotates in one call.
"""

from __future__ import annotations

import numpy as np


def hadamard_order(d: int) -> int:
    """Validate a transform length. Returns ``d`` if it is a power of two."""
    if d < 1 or d & (d - 1):
        raise ValueError(f"transform length must be a power of two, got {d}")
    return d


def fwht_inplace(vec: np.ndarray) -> None:
    """Unnormalized Walsh-Hadamard transform of the last axis, in place.

    Applying it twice multiplies the input by ``d``.
    """
    d = hadamard_order(vec.shape[-1])
    buf = vec if vec.flags.c_contiguous else np.ascontiguousarray(vec)
    half = 1
    while half < d:
        view = buf.reshape(buf.shape[:-1] + (d // (2 * half), 2, half))
        lo = view[..., 0, :]
        hi = view[..., 1, :]
        diff = lo - hi
        lo += hi
        view[..., 1, :] = diff
        half *= 2
    if buf is not vec:
        vec[...] = buf


def _rotate(vec: np.ndarray) -> np.ndarray:
    d = hadamard_order(np.shape(vec)[-1])
    arr = np.asarray(vec)
    dt = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    out = np.array(arr, dtype=dt, order="C", copy=True)
    fwht_inplace(out)
    out /= dt.type(np.sqrt(d))
    return out


def rotate_forward(vec: np.ndarray) -> np.ndarray:
    """Orthogonal rotation H x / sqrt(d); preserves Euclidean norm."""
    return _rotate(vec)


def rotate_inverse(vec: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`rotate_forward` (the rotation is an involution)."""
    return _rotate(vec)
