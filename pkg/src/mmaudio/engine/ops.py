"""NumPy layer primitives, NHWC layout.

Every forward function returns ``(out, cache)``; the matching backward takes
the upstream gradient and that cache. Dtypes are preserved, so float64 inputs
give float64 gradients for finite-difference checks.
"""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import InvalidInputError, InvalidShapeError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size, k, stride, padding):
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - k) // stride + 1
    raise InvalidShapeError(f"unknown padding mode {padding!r}")


def _pad_input(x, kh, kw, stride, padding):
    n, h, w, c = x.shape
    if padding == "same":
        ho, top, bottom = _same_pads(h, kh, stride)
        wo, left, right = _same_pads(w, kw, stride)
        x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        return x, ho, wo, (top, left)
    ho = conv_output_size(h, kh, stride, "valid")
    wo = conv_output_size(w, kw, stride, "valid")
    return x, ho, wo, (0, 0)


def _check_conv(x, w, b, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidShapeError("conv2d expects x (N,H,W,C) and w (kh,kw,Cin,Cout)")
    if x.shape[3] != w.shape[2]:
        raise InvalidShapeError(f"input has {x.shape[3]} channels, kernel expects {w.shape[2]}")
    if b is not None and b.shape != (w.shape[3],):
        raise InvalidShapeError(f"bias shape {b.shape} does not match {w.shape[3]} output channels")
    if stride < 1:
        raise InvalidShapeError("stride must be >= 1")
    if padding not in ("same", "valid"):
        raise InvalidShapeError(f"unknown padding mode {padding!r}")


def _im2col(xp, kh, kw, stride, ho, wo):
    # rows: (n, ho, wo); columns ordered (kh, kw, cin) to match w.reshape(-1, cout)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def conv2d_forward(x, w, b, stride=1, padding="same"):
    """Cross-correlation of x (N,H,W,Cin) with w (kh,kw,Cin,Cout)."""
    _check_conv(x, w, b, stride, padding)
    kh, kw, cin, cout = w.shape
    xp, ho, wo, _ = _pad_input(x, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidShapeError(f"kernel {kh}x{kw} does not fit input {x.shape[1]}x{x.shape[2]}")
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = cols.dot(w.reshape(-1, cout)).reshape(x.shape[0], ho, wo, cout)
    if b is not None:
        out += b
    return out, (x.shape, cols, w, stride, padding)


def conv2d_backward(grad_out, cache):
    x_shape, cols, w, stride, padding = cache
    n, h, wd, _ = x_shape
    kh, kw, cin, cout = w.shape
    if padding == "same":
        ho, top, bottom = _same_pads(h, kh, stride)
        wo, left, right = _same_pads(wd, kw, stride)
    else:
        ho, wo = conv_output_size(h, kh, stride, "valid"), conv_output_size(wd, kw, stride, "valid")
        top = bottom = left = right = 0
    if grad_out.shape != (n, ho, wo, cout):
        raise InvalidShapeError(f"grad_out shape {grad_out.shape} != {(n, ho, wo, cout)}")
    g2 = grad_out.reshape(-1, cout)
    grad_w = cols.T.dot(g2).reshape(w.shape)
    grad_cols = g2.dot(w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    grad_xp = np.zeros((n, h + top + bottom, wd + left + right, cin), dtype=grad_cols.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += grad_cols[:, :, :, i, j, :]
    grad_x = grad_xp[:, top:top + h, left:left + wd, :]
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_x, grad_w, grad_b


def _pool_slices(size, stride, ho, wo):
    for i in range(size):
        for j in range(size):
            yield (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                   slice(j, j + stride * (wo - 1) + 1, stride), slice(None))


def maxpool2d_forward(x, size=2, stride=2):
    """Floor-mode max pooling; ties resolve to the first element in scan order."""
    n, h, w, c = x.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidShapeError(f"pool window {size} does not fit input {h}x{w}")
    out = None
    for sl in _pool_slices(size, stride, ho, wo):
        out = x[sl].copy() if out is None else np.maximum(out, x[sl], out=out)
    return out, (x, out, size, stride)


def maxpool2d_backward(grad_out, cache):
    x, out, size, stride = cache
    _, ho, wo, _ = grad_out.shape
    grad_x = np.zeros(x.shape, dtype=grad_out.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for sl in _pool_slices(size, stride, ho, wo):
        hit = x[sl] == out
        hit &= ~taken
        grad_x[sl] += grad_out * hit
        taken |= hit
    return grad_x


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Per-channel normalization over every axis but the last.

    Returns ``(out, cache, (new_mean, new_var))``; running statistics are
    returned, never mutated.
    """
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if mode == "train":
        count = x2.shape[0]
        if x.shape[0] < 2:
            raise InvalidInputError("train-mode batchnorm needs a batch of at least 2")
        mean = x2.mean(axis=0)
        centered = x2 - mean
        var = np.einsum("ij,ij->j", centered, centered) / count
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = centered * inv_std
        unbiased = var * count / max(count - 1, 1)
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * unbiased
        out = (x_hat * gamma + beta).reshape(x.shape)
        return out, (x_hat, inv_std, gamma, "train"), (new_mean, new_var)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (x2 - running_mean) * inv_std
        out = (x_hat * gamma + beta).reshape(x.shape)
        return out, (x_hat, inv_std, gamma, "infer"), (running_mean, running_var)
    raise InvalidInputError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(grad_out, cache):
    x_hat, inv_std, gamma, mode = cache
    g2 = grad_out.reshape(x_hat.shape)
    grad_gamma = np.einsum("ij,ij->j", g2, x_hat)
    grad_beta = g2.sum(axis=0)
    if mode == "infer":
        return grad_out * (gamma * inv_std), grad_gamma, grad_beta
    count = x_hat.shape[0]
    grad_x = (gamma * inv_std / count) * (count * g2 - grad_beta - x_hat * grad_gamma)
    return grad_x.reshape(grad_out.shape), grad_gamma, grad_beta


def dense_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise InvalidShapeError(f"dense expects (N, {w.shape[0]}), got {x.shape}")
    return x.dot(w) + b, (x, w)


def dense_backward(grad_out, cache):
    x, w = cache
    return grad_out.dot(w.T), x.T.dot(grad_out), grad_out.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def sigmoid(x):
    # tanh form never overflows
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, y


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1.0 - y)


def dropout_forward(x, rate, mode="train", rng=None):
    """Inverted dropout: train mode scales kept units by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError("dropout rate must lie in [0, 1)")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise InvalidInputError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(grad_out, shape):
    return grad_out.reshape(shape)


def multilabel_bce(logits, targets):
    """Sigmoid cross-entropy averaged over categories, then over examples.

    Computed from logits so saturated sigmoids stay finite. Returns
    ``(loss, grad_logits)`` where the gradient is (p - y) / (m * batch).
    """
    logits = np.atleast_2d(logits)
    targets = np.atleast_2d(targets).astype(logits.dtype)
    if logits.shape != targets.shape:
        raise InvalidShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    n, m = logits.shape
    # -y*log(s(z)) - (1-y)*log(1-s(z)) = softplus(z) - y*z
    per_entry = np.maximum(logits, 0) + np.log1p(np.exp(-np.abs(logits))) - targets * logits
    loss = per_entry.mean()
    grad = (sigmoid(logits) - targets) / (m * n)
    return float(loss), grad


def bce_from_probabilities(p, y):
    """Direct evaluation of the per-category mean cross-entropy from probabilities."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1 - y) * np.log(1 - p)))


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy for integer labels; returns (loss, grad_logits)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def l2_penalty(params, lam, names=None):
    """``lam * sum(w**2)`` over the selected arrays, with gradients ``2*lam*w``."""
    if lam < 0:
        raise InvalidInputError("L2 coefficient must be non-negative")
    names = list(params) if names is None else list(names)
    value = 0.0
    grads = {}
    for name in names:
        w = params[name]
        value += lam * float(np.sum(np.square(w, dtype=np.float64)))
        grads[name] = 2.0 * lam * w
    return value, grads
