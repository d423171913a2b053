"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and same tie-breaking; used when the extension is not built
or when ``ADBENCH_PURE_PYTHON=1``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(x, kh, kw, stride):
    N, C = x.shape[:2]
    win = _windows(x, kh, kw, stride)
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Ho * Wo)
    return np.ascontiguousarray(cols)


def col2im(cols, C, Hp, Wp, kh, kw, stride):
    N = cols.shape[0]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    c6 = cols.reshape(N, C, kh, kw, Ho, Wo)
    out = np.zeros((N, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += c6[:, :, i, j]
    return out


def maxpool_forward(x, k, stride):
    N, C, Hp, Wp = x.shape
    win = _windows(x, k, k, stride)
    Ho, Wo = win.shape[2:4]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = (np.arange(Ho) * stride)[:, None] + di
    cols = (np.arange(Wo) * stride)[None, :] + dj
    return np.ascontiguousarray(out), (rows * Wp + cols).astype(np.int64)


def maxpool_backward(gout, idx, Hp, Wp):
    N, C = gout.shape[:2]
    out = np.zeros((N, C, Hp * Wp), dtype=gout.dtype)
    # np.add.at accumulates duplicates in index order, matching the compiled loop
    n_idx = np.arange(N)[:, None, None]
    c_idx = np.arange(C)[None, :, None]
    np.add.at(out, (n_idx, c_idx, idx.reshape(N, C, -1)), gout.reshape(N, C, -1))
    return out.reshape(N, C, Hp, Wp)
