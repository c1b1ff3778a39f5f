"""Hot inner loops, each in two flavours.

``*_jit`` functions are compiled with numba; ``*_np`` functions are the
pure-numpy reference path. The unsuffixed names dispatch to one or the other
depending on :mod:`ecglite._accel`. Both paths must agree to rounding.

Array conventions: signals are ``(rows, n)``; network activations are
``(batch, channels, length)``; conv weights are ``(kernel, in_ch, out_ch)``.
"""
import numpy as np

from ._accel import JIT_OPTS, USE_NUMBA, njit


# --- IIR second-order sections (direct form II transposed) -----------------

def sosfilt_np(sos, x, zi):
    """Filter each row of ``x`` through the cascade. ``zi`` is (sections, rows, 2)."""
    y = np.array(x, dtype=np.float64, copy=True)
    z = np.array(zi, dtype=np.float64, copy=True)
    for s in range(sos.shape[0]):
        b0, b1, b2, _, a1, a2 = sos[s]
        z1, z2 = z[s, :, 0], z[s, :, 1]
        for t in range(y.shape[1]):
            xt = y[:, t].copy()
            yt = b0 * xt + z1
            z1 = b1 * xt - a1 * yt + z2
            z2 = b2 * xt - a2 * yt
            y[:, t] = yt
        z[s, :, 0], z[s, :, 1] = z1, z2
    return y


@njit(**JIT_OPTS)
def sosfilt_jit(sos, x, zi):
    rows, n = x.shape
    y = x.astype(np.float64).copy()
    for s in range(sos.shape[0]):
        b0, b1, b2 = sos[s, 0], sos[s, 1], sos[s, 2]
        a1, a2 = sos[s, 4], sos[s, 5]
        for r in range(rows):
            z1 = zi[s, r, 0]
            z2 = zi[s, r, 1]
            for t in range(n):
                xt = y[r, t]
                yt = b0 * xt + z1
                z1 = b1 * xt - a1 * yt + z2
                z2 = b2 * xt - a2 * yt
                y[r, t] = yt
    return y


# --- conv1d, "same" padding, stride 1, cross-correlation -------------------

def _pad_same(x, k):
    p = (k - 1) // 2
    return np.pad(x, ((0, 0), (0, 0), (p, p)))


def conv1d_forward_np(x, w, b):
    k = w.shape[0]
    xp = _pad_same(x, k)
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, L, k)
    # (B, C, L, k) x (k, C, O) -> (B, L, O)
    y = np.tensordot(cols, w, axes=([1, 3], [1, 0]))
    return np.ascontiguousarray(y.transpose(0, 2, 1)) + b[None, :, None]


def conv1d_backward_np(x, w, dy):
    """Return (dx, dw, db)."""
    k = w.shape[0]
    p = (k - 1) // 2
    xp = _pad_same(x, k)
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, L, k)
    dw = np.tensordot(cols, dy, axes=([0, 2], [0, 2]))  # (C, k, O)
    dw = np.ascontiguousarray(dw.transpose(1, 0, 2))
    db = dy.sum(axis=(0, 2))
    # dx[c, l] = sum_{o, j} dy[o, l + p - j] * w[j, c, o]
    dyp = np.pad(dy, ((0, 0), (0, 0), (k - 1 - p, p)))
    dcols = np.lib.stride_tricks.sliding_window_view(dyp, k, axis=2)  # (B, O, L, k)
    dx = np.tensordot(dcols, w[::-1], axes=([1, 3], [2, 0]))  # (B, L, C)
    return np.ascontiguousarray(dx.transpose(0, 2, 1)), dw, db


# reassociation inside the dot-product loops lets LLVM vectorize them
_CONV_OPTS = dict(JIT_OPTS, fastmath=True, error_model="numpy")


@njit(**_CONV_OPTS)
def conv1d_forward_jit(x, w, b):
    B, C, L = x.shape
    k, _, O = w.shape
    p = (k - 1) // 2
    xp = np.zeros((B, C, L + k - 1), dtype=x.dtype)
    xp[:, :, p : p + L] = x
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))  # (O, C, k)
    y = np.empty((B, O, L), dtype=x.dtype)
    acc = np.empty(L, dtype=x.dtype)
    for n in range(B):
        for o in range(O):
            acc[:] = b[o]
            for c in range(C):
                xr = xp[n, c]
                for j in range(k):
                    wj = wt[o, c, j]
                    for t in range(L):
                        acc[t] += wj * xr[t + j]
            y[n, o] = acc
    return y


@njit(**_CONV_OPTS)
def conv1d_backward_jit(x, w, dy):
    B, C, L = x.shape
    k, _, O = w.shape
    p = (k - 1) // 2
    xp = np.zeros((B, C, L + k - 1), dtype=x.dtype)
    xp[:, :, p : p + L] = x
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))  # (O, C, k)
    dwt = np.zeros((O, C, k), dtype=x.dtype)
    dxp = np.zeros((B, C, L + k - 1), dtype=x.dtype)
    db = np.zeros(O, dtype=x.dtype)
    for n in range(B):
        for o in range(O):
            g = dy[n, o]
            s = 0.0
            for t in range(L):
                s += g[t]
            db[o] += s
            for c in range(C):
                xr = xp[n, c]
                dr = dxp[n, c]
                for j in range(k):
                    wj = wt[o, c, j]
                    acc = 0.0
                    for t in range(L):
                        acc += g[t] * xr[t + j]
                    dwt[o, c, j] += acc
                    for t in range(L):
                        dr[t + j] += wj * g[t]
    dx = np.ascontiguousarray(dxp[:, :, p : p + L])
    dw = np.ascontiguousarray(dwt.transpose(2, 1, 0))
    return dx, dw, db


# --- max pooling, window 2 ---------------------------------------------------

def maxpool2_forward_np(x):
    """Return (y, idx); idx is 0/1 within each window, first index wins ties."""
    half = x.shape[2] // 2
    pairs = x[:, :, : 2 * half].reshape(x.shape[0], x.shape[1], half, 2)
    idx = (pairs[..., 1] > pairs[..., 0]).astype(np.int8)
    y = np.where(idx == 1, pairs[..., 1], pairs[..., 0])
    return y, idx


def maxpool2_backward_np(dy, idx, length):
    B, C, half = dy.shape
    dx = np.zeros((B, C, length), dtype=dy.dtype)
    dx[:, :, 0 : 2 * half : 2] = np.where(idx == 0, dy, 0.0)
    dx[:, :, 1 : 2 * half : 2] = np.where(idx == 1, dy, 0.0)
    return dx


@njit(**JIT_OPTS)
def maxpool2_forward_jit(x):
    B, C, L = x.shape
    half = L // 2
    y = np.empty((B, C, half), dtype=x.dtype)
    idx = np.empty((B, C, half), dtype=np.int8)
    for n in range(B):
        for c in range(C):
            for t in range(half):
                a = x[n, c, 2 * t]
                b = x[n, c, 2 * t + 1]
                if b > a:
                    y[n, c, t] = b
                    idx[n, c, t] = 1
                else:
                    y[n, c, t] = a
                    idx[n, c, t] = 0
    return y, idx


@njit(**JIT_OPTS)
def maxpool2_backward_jit(dy, idx, length):
    B, C, half = dy.shape
    dx = np.zeros((B, C, length), dtype=dy.dtype)
    for n in range(B):
        for c in range(C):
            for t in range(half):
                dx[n, c, 2 * t + idx[n, c, t]] = dy[n, c, t]
    return dx


if USE_NUMBA:
    sosfilt = sosfilt_jit
    conv1d_forward = conv1d_forward_jit
    conv1d_backward = conv1d_backward_jit
    maxpool2_forward = maxpool2_forward_jit
    maxpool2_backward = maxpool2_backward_jit
else:
    sosfilt = sosfilt_np
    conv1d_forward = conv1d_forward_np
    conv1d_backward = conv1d_backward_np
    maxpool2_forward = maxpool2_forward_np
    maxpool2_backward = maxpool2_backward_np
