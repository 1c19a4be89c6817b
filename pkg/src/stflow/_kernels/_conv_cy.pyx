# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv2d kernels: C im2col/col2im packing + BLAS dgemm.

Same contracts as ``conv_ref``: float64, batched NCHW, cross-correlation.
Output-dim validation happens in the Python wrapper layer before dispatch.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND_NAME = "compiled"


cdef void _rm_gemm_nn(double* a, double* b, double* c,
                      int m, int n, int k, double beta) noexcept nogil:
    # row-major C[m,n] = A[m,k] @ B[k,n] + beta*C via column-major dgemm
    cdef double alpha = 1.0
    dgemm("N", "N", &n, &m, &k, &alpha, b, &n, a, &k, &beta, c, &n)


cdef void _rm_gemm_nt(double* a, double* b, double* c,
                      int m, int n, int k, double beta) noexcept nogil:
    # row-major C[m,n] = A[m,k] @ B[n,k]^T + beta*C
    cdef double alpha = 1.0
    dgemm("T", "N", &n, &m, &k, &alpha, b, &k, a, &k, &beta, c, &n)


cdef void _rm_gemm_tn(double* a, double* b, double* c,
                      int m, int n, int k, double beta) noexcept nogil:
    # row-major C[m,n] = A[k,m]^T @ B[k,n] + beta*C
    cdef double alpha = 1.0
    dgemm("N", "T", &n, &m, &k, &alpha, b, &n, a, &m, &beta, c, &n)


cdef void _pack(const double* x, double* cols,
                int Ci, int H, int W, int kh, int kw,
                int Ho, int Wo, int padding, int stride) noexcept nogil:
    cdef int ci, i, j, oh, ow, ih, iw, row
    cdef const double* xc
    cdef double* dst
    for ci in range(Ci):
        xc = x + ci * H * W
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                dst = cols + row * Ho * Wo
                for oh in range(Ho):
                    ih = oh * stride + i - padding
                    if ih < 0 or ih >= H:
                        for ow in range(Wo):
                            dst[oh * Wo + ow] = 0.0
                        continue
                    for ow in range(Wo):
                        iw = ow * stride + j - padding
                        if iw < 0 or iw >= W:
                            dst[oh * Wo + ow] = 0.0
                        else:
                            dst[oh * Wo + ow] = xc[ih * W + iw]


cdef void _unpack_add(double* gx, const double* gcols,
                      int Ci, int H, int W, int kh, int kw,
                      int Ho, int Wo, int padding, int stride) noexcept nogil:
    cdef int ci, i, j, oh, ow, ih, iw, row
    cdef double* gxc
    cdef const double* src
    for ci in range(Ci):
        gxc = gx + ci * H * W
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                src = gcols + row * Ho * Wo
                for oh in range(Ho):
                    ih = oh * stride + i - padding
                    if ih < 0 or ih >= H:
                        continue
                    for ow in range(Wo):
                        iw = ow * stride + j - padding
                        if 0 <= iw < W:
                            gxc[ih * W + iw] += src[oh * Wo + ow]


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int padding, int stride):
    cdef int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = (H + 2 * padding - kh) // stride + 1
    cdef int Wo = (W + 2 * padding - kw) // stride + 1
    cdef int K = Ci * kh * kw, P = Ho * Wo
    out_arr = np.empty((N, Co, Ho, Wo))
    cols_arr = np.empty((K, P))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] cols = cols_arr
    cdef int n
    with nogil:
        for n in range(N):
            _pack(&x[n, 0, 0, 0], &cols[0, 0], Ci, H, W, kh, kw, Ho, Wo, padding, stride)
            _rm_gemm_nn(&w[0, 0, 0, 0], &cols[0, 0], &out[n, 0, 0, 0], Co, P, K, 0.0)
    return out_arr


def conv2d_grad_weight(double[:, :, :, ::1] gy, double[:, :, :, ::1] x,
                       w_shape, int padding, int stride):
    cdef int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Co = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef int Ho = gy.shape[2], Wo = gy.shape[3]
    cdef int K = Ci * kh * kw, P = Ho * Wo
    gw_arr = np.zeros((Co, Ci, kh, kw))
    cols_arr = np.empty((K, P))
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[:, ::1] cols = cols_arr
    cdef int n
    with nogil:
        for n in range(N):
            _pack(&x[n, 0, 0, 0], &cols[0, 0], Ci, H, W, kh, kw, Ho, Wo, padding, stride)
            _rm_gemm_nt(&gy[n, 0, 0, 0], &cols[0, 0], &gw[0, 0, 0, 0], Co, K, P, 1.0)
    return gw_arr


def conv2d_grad_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                      x_shape, int padding, int stride):
    cdef int N = x_shape[0], Ci = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = gy.shape[2], Wo = gy.shape[3]
    cdef int K = Ci * kh * kw, P = Ho * Wo
    gx_arr = np.zeros((N, Ci, H, W))
    gcols_arr = np.empty((K, P))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, ::1] gcols = gcols_arr
    cdef int n
    with nogil:
        for n in range(N):
            _rm_gemm_tn(&w[0, 0, 0, 0], &gy[n, 0, 0, 0], &gcols[0, 0], K, P, Co, 0.0)
            _unpack_add(&gx[n, 0, 0, 0], &gcols[0, 0], Ci, H, W, kh, kw, Ho, Wo, padding, stride)
    return gx_arr
