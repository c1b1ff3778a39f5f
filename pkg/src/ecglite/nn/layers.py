"""Layer primitives with explicit forward and backward passes.

Activations are ``(batch, channels, length)`` arrays. Each ``*_backward``
takes the upstream gradient plus whatever its forward returned as cache.
"""
import numpy as np

from .. import kernels
from ..errors import BatchTooSmall, ShapeError

BCE_CLIP = 1e-7


# --- convolution -------------------------------------------------------------

def conv1d_forward(x, w, b):
    """Stride-1 cross-correlation with zero "same" padding."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and weights, got {x.shape} and {w.shape}")
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel must be odd, got {k}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d input has {x.shape[1]} channels, weights expect {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({c_out},)")
    x = np.ascontiguousarray(x)
    return kernels.conv1d_forward(x, np.ascontiguousarray(w, dtype=x.dtype),
                                  np.ascontiguousarray(b, dtype=x.dtype))


def conv1d_backward(dy, x, w):
    """Return (dx, dw, db)."""
    return kernels.conv1d_backward(np.ascontiguousarray(x), np.ascontiguousarray(w),
                                   np.ascontiguousarray(dy))


# --- batch normalization ----------------------------------------------------------

def moving_rate(momentum, step):
    """Blend factor for the moving statistics at 1-based update ``step``.

    ``1 - momentum`` is the plain exponential average. With ``step`` the rate
    is bias-corrected, ``(1 - m) / (1 - m**step)``, so the first update copies
    the batch statistics and the initial values carry no weight.
    """
    if step is None:
        return 1.0 - momentum
    return (1.0 - momentum) / (1.0 - momentum ** step)


def batchnorm_forward(x, gamma, beta, moving_mean, moving_var, mode="train",
                      momentum=0.99, eps=1e-3, update_stats=True, step=None):
    """Per-channel normalization over (batch, length).

    In train mode the moving statistics are updated in place unless
    ``update_stats`` is false (see :func:`moving_rate` for ``step``).
    Returns ``(y, cache)``; cache is None in eval mode.
    """
    if mode == "eval":
        inv = 1.0 / np.sqrt(moving_var + eps)
        scale = (gamma * inv)[None, :, None]
        shift = (beta - moving_mean * gamma * inv)[None, :, None]
        return (x * scale + shift).astype(x.dtype, copy=False), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[0] < 2:
        raise BatchTooSmall("batch normalization in train mode needs a batch of at least 2")

    mean = x.mean(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    if update_stats:
        rate = moving_rate(momentum, step)
        moving_mean += rate * (mean - moving_mean)
        moving_var += rate * (var - moving_var)
    return y, (xhat, inv_std, gamma)


def batchnorm_backward(dy, cache):
    """Return (dx, dgamma, dbeta) for a train-mode forward."""
    xhat, inv_std, gamma = cache
    n = dy.shape[0] * dy.shape[2]
    dbeta = dy.sum(axis=(0, 2))
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    dx = (inv_std / n)[None, :, None] * (
        n * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


# --- activations --------------------------------------------------------------------

def leaky_relu(x, alpha=0.3):
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_backward(dy, x, alpha=0.3):
    return np.where(x >= 0, dy, alpha * dy)


def sigmoid(z):
    """Logistic function, kept strictly inside (0, 1) for any finite input."""
    z = np.asarray(z, dtype=np.result_type(z, np.float32))
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    one = np.array(1.0, dtype=p.dtype)
    return np.clip(p, np.finfo(p.dtype).tiny, np.nextafter(one, 0)).astype(p.dtype)


# --- pooling ----------------------------------------------------------------------------

def maxpool1d_forward(x, pool=2):
    """Non-overlapping max over pairs; a trailing odd sample is dropped."""
    if pool != 2:
        raise ShapeError("only pool size 2 is supported")
    if x.shape[2] < 2:
        raise ShapeError(f"max-pool needs length >= 2, got {x.shape[2]}")
    return kernels.maxpool2_forward(np.ascontiguousarray(x))


def maxpool1d_backward(dy, idx, length):
    return kernels.maxpool2_backward(np.ascontiguousarray(dy), idx, length)


# --- dense ----------------------------------------------------------------------------------

def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shapes do not chain: x{x.shape} W{w.shape} b{b.shape}")
    # einsum (no BLAS) sums each row in the same order whatever the batch size;
    # BLAS picks kernels by row count and drifts by an ulp between batchings
    return np.einsum("nk,km->nm", x, w) + b


def dense_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# --- loss ---------------------------------------------------------------------------------------

def weighted_bce(p, y, weights):
    """Mean class-weighted binary cross-entropy.

    ``weights`` is a :class:`~ecglite.labels.ClassWeights`, a ``(w0, w1)``
    pair, or None for unit weights.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLIP, 1.0 - BCE_CLIP)
    y = np.asarray(y, dtype=np.float64)
    w = sample_weights(y, weights)
    return float(np.mean(-w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def bce_logit_grad(p, y, weights):
    """d(weighted_bce)/d(logit) = (p - y) * w_y / batch."""
    y = np.asarray(y, dtype=np.float64)
    return (np.asarray(p, dtype=np.float64) - y) * sample_weights(y, weights) / len(y)


def sample_weights(y, weights):
    if weights is None:
        return np.ones_like(y, dtype=np.float64)
    if hasattr(weights, "for_labels"):
        return weights.for_labels(y)
    w0, w1 = weights
    return np.where(y == 1, w1, w0)
