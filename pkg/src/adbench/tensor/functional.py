"""Layer primitives with hand-written backward passes."""
import math

import numpy as np

from . import kernels
from .tensor import Tensor, add, concat, exp, log, make_op, matmul, relu, sigmoid, tanh  # noqa: F401


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _check_ndim(x, ndim, what):
    if x.ndim != ndim:
        raise ShapeError(f"{what}: expected a {ndim}-D input, got shape {x.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. x: (N, C, H, W), weight: (F, C, kh, kw)."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(weight, 4, "conv2d kernel")
    N, C, H, W = x.shape
    F, Ck, kh, kw = weight.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input channel dimension C={C} does not match kernel C={Ck}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > H + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {H + 2 * padding}")
    if kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {W + 2 * padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)
    wmat = weight.data.reshape(F, -1)
    out = np.matmul(wmat, cols)  # (N, F, P)
    if bias is not None:
        out += bias.data.reshape(1, F, 1)
    out = out.reshape(N, F, Ho, Wo)

    def bw(g):
        g3 = g.reshape(N, F, Ho * Wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            gxp = kernels.col2im(np.ascontiguousarray(gcols), C, Hp, Wp, kh, kw, stride)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, inputs, bw)


def max_pool2d(x, kernel_size, stride=None, padding=0):
    _check_ndim(x, 4, "max_pool2d input")
    stride = stride or kernel_size
    N, C, H, W = x.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    Hp, Wp = xp.shape[2:]
    if kernel_size > min(Hp, Wp):
        raise ShapeError(f"max_pool2d: kernel {kernel_size} exceeds padded input {Hp}x{Wp}")
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(xp), kernel_size, stride)

    def bw(g):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), idx, Hp, Wp)
        return (gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp,)

    return make_op("max_pool2d", out, (x,), bw)


def avg_pool2d(x, kernel_size, stride=None, padding=0):
    """Average pool; padded zeros count toward the divisor."""
    _check_ndim(x, 4, "avg_pool2d input")
    stride = stride or kernel_size
    N, C, H, W = x.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[2:]
    if kernel_size > min(Hp, Wp):
        raise ShapeError(f"avg_pool2d: kernel {kernel_size} exceeds padded input {Hp}x{Wp}")
    k = kernel_size
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    out /= k * k

    def bw(g):
        gxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
        gs = g / (k * k)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gs
        return (gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp,)

    return make_op("avg_pool2d", out, (x,), bw)


def global_avg_pool2d(x):
    """(N, C, H, W) -> (N, C)."""
    _check_ndim(x, 4, "global_avg_pool2d input")
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    return make_op(
        "global_avg_pool2d", out, (x,),
        lambda g: (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).copy(),),
    )


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch norm over every axis except 1 (channels).

    In training mode the running buffers are updated in place with the
    unbiased batch variance; in eval mode they are used as fixed statistics.
    """
    C = x.shape[1]
    if gamma.shape != (C,):
        raise ShapeError(f"batch_norm: channel dimension {C} does not match gamma {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // C
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return make_op("batch_norm", out, (x, gamma, beta), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis."""
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ShapeError(f"layer_norm: feature dimension {d} does not match gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)

    def bw(g):
        red = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxhat = g * gamma.data
        gx = (inv / d) * (
            d * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return make_op("layer_norm", out, (x, gamma, beta), bw)


def dropout(x, p, training, rng):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (x,), bw)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input feature dimension {x.shape[-1]} != weight in-dimension {weight.shape[1]}")
    w = x.data @ weight.data.T
    if bias is not None:
        w = w + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("linear", w.astype(x.dtype, copy=False), inputs, bw)


def weighted_cross_entropy(logits, targets, weights):
    """sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i]."""
    _check_ndim(logits, 2, "weighted_cross_entropy logits")
    N, C = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (C,):
        raise ConfigError(f"expected {C} class weights, got shape {weights.shape}")
    if np.any(weights <= 0):
        raise ConfigError("class weights must all be > 0")
    if targets.shape != (N,) or np.any(targets < 0) or np.any(targets >= C):
        raise ConfigError(f"targets must be {N} class indices in [0, {C})")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("weighted_cross_entropy: non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    w = weights[targets].astype(logits.dtype)
    wsum = w.sum()
    loss = -(w * logp[np.arange(N), targets]).sum() / wsum

    def bw(g):
        p = np.exp(logp)
        p[np.arange(N), targets] -= 1.0
        return (g * p * (w / wsum)[:, None],)

    return make_op("weighted_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def scaled_dot_product_attention(q, k, v):
    """q, k, v: (N, H, L, dh). Returns (output, attention weights tensor)."""
    dh = q.shape[-1]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    return matmul(attn, v), attn


def multi_head_self_attention(tokens, wq, wk, wv, wo, bq, bk, bv, bo, heads):
    """Self-attention over (N, L, d) tokens with learned projections."""
    _check_ndim(tokens, 3, "multi_head_self_attention tokens")
    N, L, d = tokens.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"token dim {d} is not divisible by heads={heads}")
    dh = d // heads

    def split(t):
        return t.reshape(N, L, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(tokens, wq, bq))
    k = split(linear(tokens, wk, bk))
    v = split(linear(tokens, wv, bv))
    ctx, attn = scaled_dot_product_attention(q, k, v)
    merged = ctx.transpose(0, 2, 1, 3).reshape(N, L, d)
    return linear(merged, wo, bo), attn


def sinusoidal_encoding(length, dim, dtype=np.float32):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def add_positional_encoding(tokens):
    """Add fixed sinusoidal encodings to (N, L, d) tokens."""
    _, L, d = tokens.shape
    return add(tokens, Tensor(sinusoidal_encoding(L, d, tokens.dtype)))
