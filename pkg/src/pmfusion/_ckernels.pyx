# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p, Py_ssize_t d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad, int dil):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad, dil)
    cdef Py_ssize_t Wo = _out(W, kw, stride, pad, dil)
    cdef Py_ssize_t K = C * kh * kw
    out_arr = np.zeros((B * Ho * Wo, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, r, q, row, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    row = (b * Ho + oh) * Wo + ow
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            r = oh * stride - pad + i * dil
                            for j in range(kw):
                                q = ow * stride - pad + j * dil
                                if 0 <= r < H and 0 <= q < W:
                                    out[row, col] = x[b, c, r, q]
                                col += 1
    return out_arr


def col2im(double[:, ::1] cols, shape, int kh, int kw, int stride, int pad, int dil):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad, dil)
    cdef Py_ssize_t Wo = _out(W, kw, stride, pad, dil)
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, r, q, row, col
    # kernel offsets before output positions so each element sums in the same
    # order as the numpy fallback
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        col = (c * kh + i) * kw + j
                        for oh in range(Ho):
                            r = oh * stride - pad + i * dil
                            if r < 0 or r >= H:
                                continue
                            for ow in range(Wo):
                                q = ow * stride - pad + j * dil
                                if 0 <= q < W:
                                    row = (b * Ho + oh) * Wo + ow
                                    out[b, c, r, q] += cols[row, col]
    return out_arr


def maxpool2(double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // 2, Wo = W // 2
    out_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, h, w, r, q, br, bq
    cdef double best, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(Ho):
                    for w in range(Wo):
                        br = 2 * h
                        bq = 2 * w
                        best = x[b, c, br, bq]
                        for r in range(2 * h, 2 * h + 2):
                            for q in range(2 * w, 2 * w + 2):
                                v = x[b, c, r, q]
                                if v > best:
                                    best = v
                                    br = r
                                    bq = q
                        out[b, c, h, w] = best
                        idx[b, c, h, w] = ((b * C + c) * H + br) * W + bq
    return out_arr, idx_arr


def zbuffer(long long[::1] pix, double[::1] depth, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t n = pix.shape[0], i, p, cur
    out_arr = np.full(H * W, -1, dtype=np.int64)
    cdef long long[::1] out = out_arr
    with nogil:
        for i in range(n):
            p = pix[i]
            if p < 0:
                continue
            cur = out[p]
            # strict < keeps the lower index on equal depth
            if cur < 0 or depth[i] < depth[cur]:
                out[p] = i
    return out_arr
