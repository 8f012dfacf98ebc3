"""Hot inner loops used by the autograd engine.

Every kernel has a numba ``@njit`` version and a pure-numpy version with
identical semantics. The numba path is used when numba imports and the
environment variable ``LATTE_NUMBA`` is not set to ``0``; both paths are
always importable so they can be compared against each other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("LATTE_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def fold1d_numpy(gcols: np.ndarray, length: int, dilation: int) -> np.ndarray:
    """Scatter-add unfolded columns back onto a 1-D signal.

    ``gcols`` has shape (B, T_out, C, k); the result has shape (B, C, length)
    and is the adjoint of ``sliding_window_view(x, span, axis=2)[..., ::dilation]``.
    """
    b, t_out, c, k = gcols.shape
    out = np.zeros((b, c, length), dtype=gcols.dtype)
    for j in range(k):
        start = j * dilation
        out[:, :, start : start + t_out] += gcols[:, :, :, j].transpose(0, 2, 1)
    return out


def fold2d_numpy(gcols: np.ndarray, height: int, width: int) -> np.ndarray:
    """Adjoint of a stride-1 2-D unfold; ``gcols`` is (B, H_out, W_out, C, kh, kw)."""
    b, h_out, w_out, c, kh, kw = gcols.shape
    out = np.zeros((b, c, height, width), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + h_out, j : j + w_out] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def window_argmax_numpy(
    scores: np.ndarray, k: int, stride: int, padding: int, dilation: int
) -> np.ndarray:
    """Per-window argmax over the last axis of ``scores`` (N, L).

    Padding cells score ``-inf`` and are never selected unless the whole
    window is padding, which callers reject beforehand. Ties resolve to the
    earliest position. Returned indices refer to the unpadded sequence.
    """
    n, length = scores.shape
    padded = np.full((n, length + 2 * padding), -np.inf, dtype=np.float64)
    padded[:, padding : padding + length] = scores
    span = dilation * (k - 1) + 1
    windows = np.lib.stride_tricks.sliding_window_view(padded, span, axis=1)
    windows = windows[:, ::stride, ::dilation]
    local = np.argmax(windows, axis=2)
    starts = np.arange(windows.shape[1]) * stride
    return (starts[None, :] + local * dilation - padding).astype(np.int64)


def gather_rows_backward_numpy(grad: np.ndarray, index: np.ndarray, length: int) -> np.ndarray:
    """Adjoint of ``take_along_axis(x, index[..., None], axis=1)`` for x of shape (N, length, D)."""
    n, m, d = grad.shape
    out = np.zeros((n, length, d), dtype=grad.dtype)
    rows = np.repeat(np.arange(n), m)
    np.add.at(out, (rows, index.reshape(-1)), grad.reshape(n * m, d))
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def fold1d_numba(gcols, length, dilation):
        b, t_out, c, k = gcols.shape
        out = np.zeros((b, c, length), dtype=gcols.dtype)
        for bi in range(b):
            for t in range(t_out):
                for ci in range(c):
                    for j in range(k):
                        out[bi, ci, t + j * dilation] += gcols[bi, t, ci, j]
        return out

    @numba.njit(cache=True)
    def fold2d_numba(gcols, height, width):
        b, h_out, w_out, c, kh, kw = gcols.shape
        out = np.zeros((b, c, height, width), dtype=gcols.dtype)
        for bi in range(b):
            for y in range(h_out):
                for x in range(w_out):
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[bi, ci, y + i, x + j] += gcols[bi, y, x, ci, i, j]
        return out

    @numba.njit(cache=True)
    def window_argmax_numba(scores, k, stride, padding, dilation):
        n, length = scores.shape
        span = dilation * (k - 1) + 1
        n_out = (length + 2 * padding - span) // stride + 1
        out = np.empty((n, n_out), dtype=np.int64)
        for r in range(n):
            for o in range(n_out):
                best = -np.inf
                best_pos = -1
                for j in range(k):
                    pos = o * stride + j * dilation - padding
                    if pos < 0 or pos >= length:
                        continue
                    s = scores[r, pos]
                    if best_pos < 0 or s > best:
                        best = s
                        best_pos = pos
                out[r, o] = best_pos
        return out

    @numba.njit(cache=True)
    def gather_rows_backward_numba(grad, index, length):
        n, m, d = grad.shape
        out = np.zeros((n, length, d), dtype=grad.dtype)
        for r in range(n):
            for o in range(m):
                src = index[r, o]
                for c in range(d):
                    out[r, src, c] += grad[r, o, c]
        return out


if NUMBA_ENABLED:
    fold1d = fold1d_numba
    fold2d = fold2d_numba
    window_argmax = window_argmax_numba
    gather_rows_backward = gather_rows_backward_numba
else:
    fold1d = fold1d_numpy
    fold2d = fold2d_numpy
    window_argmax = window_argmax_numpy
    gather_rows_backward = gather_rows_backward_numpy
