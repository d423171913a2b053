# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im and max-pool kernels.

Loop order is fixed, so results are bit-reproducible run to run.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride):
    """(N, C, Hp, Wp) padded input -> (N, C*kh*kw, Ho*Wo) columns."""
    cdef Py_ssize_t n_, c_, i, j, oh, ow
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], Hp = x.shape[2], Wp = x.shape[3]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef real* dst
    cdef const real* src
    for n_ in range(N):
        dst = &o[n_, 0, 0]
        for c_ in range(C):
            for i in range(kh):
                for j in range(kw):
                    for oh in range(Ho):
                        src = &x[n_, c_, oh * stride + i, j]
                        if stride == 1:
                            for ow in range(Wo):
                                dst[ow] = src[ow]
                        else:
                            for ow in range(Wo):
                                dst[ow] = src[ow * stride]
                        dst += Wo
    return out


def col2im(real[:, :, ::1] cols, int C, int Hp, int Wp, int kh, int kw, int stride):
    """Adjoint of im2col: scatter-add columns back to (N, C, Hp, Wp)."""
    cdef Py_ssize_t n_, c_, i, j, oh, ow
    cdef Py_ssize_t N = cols.shape[0]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef real* dst
    cdef const real* src
    for n_ in range(N):
        src = &cols[n_, 0, 0]
        for c_ in range(C):
            for i in range(kh):
                for j in range(kw):
                    for oh in range(Ho):
                        dst = &o[n_, c_, oh * stride + i, j]
                        for ow in range(Wo):
                            dst[ow * stride] += src[ow]
                        src += Wo
    return out


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride):
    """Max pool over a padded input; returns (values, flat argmax into Hp*Wp).

    Ties resolve to the first maximum in row-major window order.
    """
    cdef Py_ssize_t n_, c_, i, j, oh, ow, h, w, best_idx
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], Hp = x.shape[2], Wp = x.shape[3]
    cdef Py_ssize_t Ho = (Hp - k) // stride + 1
    cdef Py_ssize_t Wo = (Wp - k) // stride + 1
    cdef real best, v
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, C, Ho, Wo), dtype=dtype)
    idx = np.empty((N, C, Ho, Wo), dtype=np.int64)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] ix = idx
    for n_ in range(N):
        for c_ in range(C):
            for oh in range(Ho):
                for ow in range(Wo):
                    h = oh * stride
                    w = ow * stride
                    best = x[n_, c_, h, w]
                    best_idx = h * Wp + w
                    for i in range(k):
                        for j in range(k):
                            v = x[n_, c_, h + i, w + j]
                            if v > best:
                                best = v
                                best_idx = (h + i) * Wp + (w + j)
                    o[n_, c_, oh, ow] = best
                    ix[n_, c_, oh, ow] = best_idx
    return out, idx


def maxpool_backward(real[:, :, :, ::1] gout, cnp.int64_t[:, :, :, ::1] idx, int Hp, int Wp):
    cdef Py_ssize_t n_, c_, oh, ow, flat
    cdef Py_ssize_t N = gout.shape[0], C = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    for n_ in range(N):
        for c_ in range(C):
            for oh in range(Ho):
                for ow in range(Wo):
                    flat = idx[n_, c_, oh, ow]
                    o[n_, c_, flat // Wp, flat % Wp] += gout[n_, c_, oh, ow]
    return out
