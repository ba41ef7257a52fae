"""Inner-loop kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``DCTADAMW_DISABLE_NUMBA`` is unset (or ``0``). Both paths are
always importable as ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so they can be
benchmarked and cross-checked against each other.
"""
import os
from types import SimpleNamespace

import numpy as np

ENV_FLAG = "DCTADAMW_DISABLE_NUMBA"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_axis_scores(S, p, axis):
    # axis=0: one score per column, axis=1: one score per row
    if p == 1:
        return np.abs(S).sum(axis=axis)
    return np.square(S).sum(axis=axis)


def _np_rank_top(scores, r):
    # descending score, ties by ascending index (mergesort is stable)
    order = np.argsort(-scores, kind="mergesort")
    return order[:r].astype(np.int64)


def _np_match_matrix(prev, crt):
    return (prev[:, None] == crt[None, :]).astype(np.float64)


def _np_reindex_cols(x, prev, crt):
    """Return x @ R for the 0/1 index-match matrix R (columns = subspace axis)."""
    out = np.zeros((x.shape[0], crt.shape[0]), dtype=x.dtype)
    pos = {int(k): a for a, k in enumerate(prev)}
    for b, k in enumerate(crt):
        a = pos.get(int(k))
        if a is not None:
            out[:, b] = x[:, a]
    return out


def _np_quantize_groups(flat, group_size):
    n = flat.shape[0]
    n_groups = -(-n // group_size)
    pad = n_groups * group_size - n
    padded = np.concatenate([flat, np.repeat(flat[-1:], pad)]) if pad else flat
    blocks = padded.reshape(n_groups, group_size)
    lo = blocks.min(axis=1)
    hi = blocks.max(axis=1)
    span = hi - lo
    degenerate = span == 0.0
    safe = np.where(degenerate, 1.0, span)
    y = (blocks - lo[:, None]) * 255.0 / safe[:, None]
    codes = np.clip(np.floor(y + 0.5), 0, 255)
    codes[degenerate] = 0
    scales = np.where(degenerate, 1.0, span / 255.0)
    return codes.astype(np.uint8).reshape(-1)[:n], scales, lo


def _np_dequantize_groups(codes, scales, zeros, group_size):
    n = codes.shape[0]
    gid = np.arange(n) // group_size
    return zeros[gid] + scales[gid] * codes.astype(np.float64)


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    axis_scores=_np_axis_scores,
    rank_top=_np_rank_top,
    match_matrix=_np_match_matrix,
    reindex_cols=_np_reindex_cols,
    quantize_groups=_np_quantize_groups,
    dequantize_groups=_np_dequantize_groups,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def axis_scores(S, p, axis):
        n, m = S.shape
        if axis == 0:
            out = np.zeros(m)
            for i in range(n):
                for j in range(m):
                    x = S[i, j]
                    out[j] += abs(x) if p == 1 else x * x
        else:
            out = np.zeros(n)
            for i in range(n):
                acc = 0.0
                for j in range(m):
                    x = S[i, j]
                    acc += abs(x) if p == 1 else x * x
                out[i] = acc
        return out

    @njit(cache=True)
    def rank_top(scores, r):
        order = np.argsort(-scores, kind="mergesort")
        return order[:r].astype(np.int64)

    @njit(cache=True)
    def match_matrix(prev, crt):
        r1 = prev.shape[0]
        r2 = crt.shape[0]
        out = np.zeros((r1, r2))
        for a in range(r1):
            for b in range(r2):
                if prev[a] == crt[b]:
                    out[a, b] = 1.0
        return out

    @njit(cache=True)
    def reindex_cols(x, prev, crt):
        rows = x.shape[0]
        out = np.zeros((rows, crt.shape[0]), dtype=x.dtype)
        for b in range(crt.shape[0]):
            for a in range(prev.shape[0]):
                if prev[a] == crt[b]:
                    for i in range(rows):
                        out[i, b] = x[i, a]
                    break
        return out

    @njit(cache=True)
    def quantize_groups(flat, group_size):
        n = flat.shape[0]
        n_groups = (n + group_size - 1) // group_size
        codes = np.zeros(n, dtype=np.uint8)
        scales = np.ones(n_groups)
        zeros = np.zeros(n_groups)
        for g in range(n_groups):
            start = g * group_size
            stop = min(start + group_size, n)
            lo = flat[start]
            hi = flat[start]
            for k in range(start, stop):
                x = flat[k]
                if x < lo:
                    lo = x
                if x > hi:
                    hi = x
            zeros[g] = lo
            span = hi - lo
            if span == 0.0:
                continue
            scales[g] = span / 255.0
            for k in range(start, stop):
                y = np.floor((flat[k] - lo) * 255.0 / span + 0.5)
                if y < 0.0:
                    y = 0.0
                elif y > 255.0:
                    y = 255.0
                codes[k] = np.uint8(y)
        return codes, scales, zeros

    @njit(cache=True)
    def dequantize_groups(codes, scales, zeros, group_size):
        n = codes.shape[0]
        out = np.empty(n)
        for k in range(n):
            g = k // group_size
            out[k] = zeros[g] + scales[g] * np.float64(codes[k])
        return out

    return SimpleNamespace(
        name="numba",
        axis_scores=axis_scores,
        rank_top=rank_top,
        match_matrix=match_matrix,
        reindex_cols=reindex_cols,
        quantize_groups=quantize_groups,
        dequantize_groups=dequantize_groups,
    )


try:
    NUMBA_KERNELS = _build_numba()
except ImportError:  # numba is an optional extra
    NUMBA_KERNELS = None


def _numba_disabled():
    return os.environ.get(ENV_FLAG, "0").strip().lower() not in ("", "0", "false", "no")


def active():
    """Kernel namespace selected by the environment at call time."""
    if NUMBA_KERNELS is None or _numba_disabled():
        return NUMPY_KERNELS
    return NUMBA_KERNELS
