"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them exactly
(same arithmetic order, same tie rules) so both backends give bit-identical
results.
"""

import numpy as np


def nearest_neighbors(src, tgt, src_mask, tgt_mask):
    """Brute-force nearest target for every source point.

    Returns ``(index, sq_dist)``. Masked-out source rows get index -1 and
    distance 0. Ties resolve to the lowest target index.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    tgt = np.ascontiguousarray(tgt, dtype=np.float64)
    src_mask = np.asarray(src_mask, dtype=bool)
    tgt_mask = np.asarray(tgt_mask, dtype=bool)
    diff = src[:, None, :] - tgt[None, :, :]
    sq = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
    sq = sq + diff[..., 2] * diff[..., 2]
    sq = np.where(tgt_mask[None, :], sq, np.inf)
    index = np.argmin(sq, axis=1).astype(np.int64)
    best = sq[np.arange(len(src)), index]
    index[~src_mask] = -1
    best = np.where(src_mask, best, 0.0)
    return index, best


def max_argmax(x):
    """Reduce a contiguous (A, K, B) array over its middle axis.

    Returns the maxima (A, B) and the first index attaining them.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    idx = np.argmax(x, axis=1)
    vals = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return vals, idx.astype(np.int64)


def scatter_argmax(grad, idx, k):
    """Adjoint of :func:`max_argmax`: route (A, B) gradients to (A, K, B)."""
    a, b = grad.shape
    out = np.zeros((a, k, b), dtype=np.float64)
    np.put_along_axis(out, idx[:, None, :], grad[:, None, :], axis=1)
    return out
