# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

All kernels use the ``(C, H, W, B)`` layout: a 2D convolution over axes 1 and 2
applied independently to each of the ``B`` trailing columns. Keeping the batch
axis innermost gives long contiguous inner loops for the 4D center-pivot
convolution, whose "other side" positions become the batch. At stride 1 a whole
output row ``(W, B)`` is one contiguous run.

The loop nest and the partial-sum layout of the dot kernel are fixed, so
results are bit-reproducible for a given input.
"""
import numpy as np

cdef extern from *:
    """
    #include <string.h>
    static inline void cv_axpy_f(Py_ssize_t n, float a, const float *restrict x, float *restrict y) {
        for (Py_ssize_t i = 0; i < n; i++) y[i] += a * x[i];
    }
    static inline void cv_axpy_d(Py_ssize_t n, double a, const double *restrict x, double *restrict y) {
        for (Py_ssize_t i = 0; i < n; i++) y[i] += a * x[i];
    }
    /* eight interleaved partial sums (one vector register), folded in a fixed order */
    typedef float cv_v8f __attribute__((vector_size(32)));
    typedef double cv_v4d __attribute__((vector_size(32)));
    static inline float cv_dot_f(Py_ssize_t n, const float *restrict x, const float *restrict y) {
        cv_v8f acc = {0, 0, 0, 0, 0, 0, 0, 0}, a, b;
        Py_ssize_t i = 0;
        for (; i + 8 <= n; i += 8) {
            memcpy(&a, x + i, sizeof a);
            memcpy(&b, y + i, sizeof b);
            acc += a * b;
        }
        float tail = 0;
        for (; i < n; i++) tail += x[i] * y[i];
        return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail;
    }
    static inline double cv_dot_d(Py_ssize_t n, const double *restrict x, const double *restrict y) {
        cv_v4d acc = {0, 0, 0, 0}, a, b;
        Py_ssize_t i = 0;
        for (; i + 4 <= n; i += 4) {
            memcpy(&a, x + i, sizeof a);
            memcpy(&b, y + i, sizeof b);
            acc += a * b;
        }
        double tail = 0;
        for (; i < n; i++) tail += x[i] * y[i];
        return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
    }
    """
    void cv_axpy_f(Py_ssize_t n, float a, const float* x, float* y) nogil
    void cv_axpy_d(Py_ssize_t n, double a, const double* x, double* y) nogil
    float cv_dot_f(Py_ssize_t n, const float* x, const float* y) nogil
    double cv_dot_d(Py_ssize_t n, const double* x, const double* y) nogil

ctypedef fused real:
    float
    double


cdef inline void _axpy(Py_ssize_t n, real a, real* x, real* y) noexcept nogil:
    if real is float:
        cv_axpy_f(n, a, x, y)
    else:
        cv_axpy_d(n, a, x, y)


cdef inline real _dot(Py_ssize_t n, real* x, real* y) noexcept nogil:
    if real is float:
        return cv_dot_f(n, x, y)
    else:
        return cv_dot_d(n, x, y)


def _pad(x, int pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d_forward(x, w, int stride, int pad):
    """y[co, oh, ow, b] = sum_{ci, i, j} w[co, ci, i, j] * xpad[ci, oh*s+i, ow*s+j, b]."""
    xp = _pad(x, pad)
    cdef Py_ssize_t hp = xp.shape[1], wp = xp.shape[2], nb = xp.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1, wo = (wp - kw) // stride + 1
    y = np.zeros((cout, ho, wo, nb), dtype=x.dtype)
    wc = np.ascontiguousarray(w, dtype=x.dtype)
    if x.dtype == np.float32:
        _fwd[float](xp, wc, y, stride)
    else:
        _fwd[double](xp, wc, y, stride)
    return y


cdef void _fwd(real[:, :, :, ::1] xp, real[:, :, :, ::1] w, real[:, :, :, ::1] y,
               int stride) noexcept nogil:
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = y.shape[1], wo = y.shape[2], nb = y.shape[3]
    cdef Py_ssize_t co, ci, i, j, oh, ow
    cdef real wv
    for co in range(cout):
        for oh in range(ho):
            for ci in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[co, ci, i, j]
                        if stride == 1:
                            _axpy(wo * nb, wv, &xp[ci, oh + i, j, 0], &y[co, oh, 0, 0])
                        else:
                            for ow in range(wo):
                                _axpy(nb, wv, &xp[ci, oh * stride + i, ow * stride + j, 0],
                                      &y[co, oh, ow, 0])


def conv2d_backward_input(gy, w, int h, int wdt, int stride, int pad):
    """Gradient of ``conv2d_forward`` wrt its input, shape ``(cin, h, wdt, B)``."""
    cdef Py_ssize_t cin = w.shape[1], nb = gy.shape[3]
    gxp = np.zeros((cin, h + 2 * pad, wdt + 2 * pad, nb), dtype=gy.dtype)
    gyc = np.ascontiguousarray(gy)
    wc = np.ascontiguousarray(w, dtype=gy.dtype)
    if gy.dtype == np.float32:
        _bwd_in[float](gyc, wc, gxp, stride)
    else:
        _bwd_in[double](gyc, wc, gxp, stride)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wdt, :])


cdef void _bwd_in(real[:, :, :, ::1] gy, real[:, :, :, ::1] w, real[:, :, :, ::1] gxp,
                  int stride) noexcept nogil:
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2], nb = gy.shape[3]
    cdef Py_ssize_t co, ci, i, j, oh, ow
    cdef real wv
    for ci in range(cin):
        for co in range(cout):
            for i in range(kh):
                for j in range(kw):
                    wv = w[co, ci, i, j]
                    for oh in range(ho):
                        if stride == 1:
                            _axpy(wo * nb, wv, &gy[co, oh, 0, 0], &gxp[ci, oh + i, j, 0])
                        else:
                            for ow in range(wo):
                                _axpy(nb, wv, &gy[co, oh, ow, 0],
                                      &gxp[ci, oh * stride + i, ow * stride + j, 0])


def conv2d_backward_weight(x, gy, int kh, int kw, int stride, int pad):
    """Gradient of ``conv2d_forward`` wrt its kernel, shape ``(cout, cin, kh, kw)``."""
    xp = _pad(x, pad)
    gyc = np.ascontiguousarray(gy)
    gw = np.zeros((gy.shape[0], x.shape[0], kh, kw), dtype=x.dtype)
    if x.dtype == np.float32:
        _bwd_w[float](xp, gyc, gw, stride)
    else:
        _bwd_w[double](xp, gyc, gw, stride)
    return gw


cdef void _bwd_w(real[:, :, :, ::1] xp, real[:, :, :, ::1] gy, real[:, :, :, ::1] gw,
                 int stride) noexcept nogil:
    cdef Py_ssize_t cout = gw.shape[0], cin = gw.shape[1], kh = gw.shape[2], kw = gw.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2], nb = gy.shape[3]
    cdef Py_ssize_t co, ci, i, j, oh, ow
    cdef real acc
    for co in range(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = 0
                    for oh in range(ho):
                        if stride == 1:
                            acc += _dot(wo * nb, &gy[co, oh, 0, 0], &xp[ci, oh + i, j, 0])
                        else:
                            for ow in range(wo):
                                acc += _dot(nb, &gy[co, oh, ow, 0],
                                            &xp[ci, oh * stride + i, ow * stride + j, 0])
                    gw[co, ci, i, j] = acc
