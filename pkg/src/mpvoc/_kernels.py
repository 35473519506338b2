"""Hot inner loops with numba and pure-numpy implementations.

The numba path is used when numba imports cleanly and ``MPVOC_NUMBA`` is not
set to ``0``. Both paths are deterministic; they agree to rounding error, not
bit-for-bit, so a run must stay on one path to be reproducible.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested():
    flag = os.environ.get("MPVOC_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and _numba_requested()


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def overlap_add_np(frames, hop):
    """Sum frames of shape (B, T, N) at stride ``hop`` into (B, N + (T-1)*hop)."""
    n_batch, n_frames, n = frames.shape
    out = np.zeros((n_batch, n + (n_frames - 1) * hop), dtype=frames.dtype)
    for t in range(n_frames):
        out[:, t * hop:t * hop + n] += frames[:, t]
    return out


def depthwise_conv1d_np(x, w, pad):
    """Per-channel correlation: out[b,c,t] = sum_k w[c,k] * xpad[b,c,t+k]."""
    k = w.shape[1]
    length = x.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, k - 1 - pad)))
    out = np.zeros_like(x)
    for j in range(k):
        out += w[None, :, j, None] * xp[:, :, j:j + length]
    return out


def depthwise_conv1d_grad_np(x, w, g, pad):
    """Gradients of ``depthwise_conv1d`` w.r.t. input and kernel."""
    k = w.shape[1]
    length = x.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, k - 1 - pad)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        gw[:, j] = np.einsum("bct,bct->c", g, xp[:, :, j:j + length])
        gxp[:, :, j:j + length] += w[None, :, j, None] * g
    return gxp[:, :, pad:pad + length], gw


def nccf_np(frames, lag_min, lag_max):
    """Normalized cross-correlation per frame for lags in [lag_min, lag_max].

    Each frame of length ``L`` is split into a fixed reference window
    ``x[0:L-lag_max]`` and a lagged window of the same length.
    """
    n = frames.shape[1] - lag_max
    ref = frames[:, :n]
    lagged = sliding_window_view(frames, n, axis=1)[:, lag_min:lag_max + 1]
    num = np.einsum("fn,fln->fl", ref, lagged)
    e_ref = np.einsum("fn,fn->f", ref, ref)
    e_lag = np.einsum("fln,fln->fl", lagged, lagged)
    den = np.sqrt(e_ref[:, None] * e_lag)
    out = np.zeros_like(num)
    ok = den > 1e-12
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def overlap_add_nb(frames, hop):
        n_batch, n_frames, n = frames.shape
        out = np.zeros((n_batch, n + (n_frames - 1) * hop), dtype=frames.dtype)
        for b in range(n_batch):
            for t in range(n_frames):
                start = t * hop
                for i in range(n):
                    out[b, start + i] += frames[b, t, i]
        return out

    @_jit
    def depthwise_conv1d_nb(x, w, pad):
        n_batch, n_ch, length = x.shape
        k = w.shape[1]
        out = np.zeros_like(x)
        for b in range(n_batch):
            for c in range(n_ch):
                for j in range(k):
                    wj = w[c, j]
                    shift = j - pad
                    lo = max(0, -shift)
                    hi = min(length, length - shift)
                    for t in range(lo, hi):
                        out[b, c, t] += wj * x[b, c, t + shift]
        return out

    @_jit
    def depthwise_conv1d_grad_nb(x, w, g, pad):
        n_batch, n_ch, length = x.shape
        k = w.shape[1]
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        for b in range(n_batch):
            for c in range(n_ch):
                for j in range(k):
                    wj = w[c, j]
                    shift = j - pad
                    lo = max(0, -shift)
                    hi = min(length, length - shift)
                    acc = 0.0
                    for t in range(lo, hi):
                        acc += g[b, c, t] * x[b, c, t + shift]
                        gx[b, c, t + shift] += wj * g[b, c, t]
                    gw[c, j] += acc
        return gx, gw

    @_jit
    def nccf_nb(frames, lag_min, lag_max):
        n_frames, width = frames.shape
        n = width - lag_max
        n_lags = lag_max - lag_min + 1
        out = np.zeros((n_frames, n_lags))
        for f in range(n_frames):
            x = frames[f]
            ref = x[:n]
            e_ref = 0.0
            for i in range(n):
                e_ref += x[i] * x[i]
            # energy of the lagged window, slid one sample per lag
            e_lag = 0.0
            for i in range(n):
                e_lag += x[lag_min + i] * x[lag_min + i]
            for li in range(n_lags):
                lag = lag_min + li
                if li > 0:
                    old = x[lag - 1]
                    new = x[lag + n - 1]
                    e_lag += new * new - old * old
                    if e_lag < 0.0:
                        e_lag = 0.0
                num = np.dot(ref, x[lag:lag + n])
                den = np.sqrt(e_ref * e_lag)
                if den > 1e-12:
                    out[f, li] = num / den
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def overlap_add(frames, hop):
    frames = np.ascontiguousarray(frames)
    if USE_NUMBA:
        return overlap_add_nb(frames, int(hop))
    return overlap_add_np(frames, hop)


def depthwise_conv1d(x, w, pad):
    if USE_NUMBA:
        return depthwise_conv1d_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), int(pad))
    return depthwise_conv1d_np(x, w, pad)


def depthwise_conv1d_grad(x, w, g, pad):
    if USE_NUMBA:
        return depthwise_conv1d_grad_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(g), int(pad)
        )
    return depthwise_conv1d_grad_np(x, w, g, pad)


def nccf(frames, lag_min, lag_max):
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if USE_NUMBA:
        return nccf_nb(frames, int(lag_min), int(lag_max))
    return nccf_np(frames, lag_min, lag_max)
