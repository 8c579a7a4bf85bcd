# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3D convolution kernels.

Each kernel walks the output one z-plane at a time: the receptive fields of
that plane are gathered into a small column buffer that stays in cache and
handed to BLAS ``dgemm``.  The numpy fallback materialises the columns for
the whole batch at once, which is what makes it memory bound.

``conv_forward`` correlates a padded input with the kernel,
``conv_backward_input`` scatters an output gradient back through the kernel
(also the transposed-conv forward) and ``conv_backward_weight`` correlates
the two.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def _check_extent(op, dims, out, k, stride):
    for d, o in zip(dims, out):
        if o < 1 or (o - 1) * stride + k > d:
            raise ValueError(f"{op}: output {out} with kernel {k} stride {stride} "
                             f"does not fit input {dims}")


cdef void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                const double* a, int lda, const double* b, int ldb,
                double beta, double* c, int ldc) noexcept nogil:
    # row-major C = op(A) @ op(B), expressed as the column-major C^T = op(B)^T op(A)^T
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    dgemm(&cb, &ca, &n, &m, &k, &alpha, <double*>b, &ldb, <double*>a, &lda,
          &beta, c, &ldc)


cdef void _gather_plane(const double* x, double* cols, Py_ssize_t ci, Py_ssize_t xvol,
                        Py_ssize_t hp, Py_ssize_t wp, int k, int stride, Py_ssize_t i,
                        Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t c, a, bb, cc, j, l
    cdef const double* src
    cdef const double* row
    cdef double* dst = cols
    for c in range(ci):
        src = x + c * xvol
        for a in range(k):
            for bb in range(k):
                for cc in range(k):
                    for j in range(ho):
                        row = src + ((a + i * stride) * hp + bb + j * stride) * wp + cc
                        if stride == 1:
                            for l in range(wo):
                                dst[l] = row[l]
                        else:
                            for l in range(wo):
                                dst[l] = row[l * stride]
                        dst += wo


cdef void _scatter_plane(const double* cols, double* x, Py_ssize_t ci, Py_ssize_t xvol,
                         Py_ssize_t hp, Py_ssize_t wp, int k, int stride, Py_ssize_t i,
                         Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t c, a, bb, cc, j, l
    cdef double* dst
    cdef double* row
    cdef const double* src = cols
    for c in range(ci):
        dst = x + c * xvol
        for a in range(k):
            for bb in range(k):
                for cc in range(k):
                    for j in range(ho):
                        row = dst + ((a + i * stride) * hp + bb + j * stride) * wp + cc
                        if stride == 1:
                            for l in range(wo):
                                row[l] += src[l]
                        else:
                            for l in range(wo):
                                row[l * stride] += src[l]
                        src += wo


def _conv_forward(xpad_in, w_in, int stride, Py_ssize_t do, Py_ssize_t ho, Py_ssize_t wo):
    cdef cnp.ndarray[double, ndim=5, mode="c"] x = np.ascontiguousarray(xpad_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=5, mode="c"] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], hp = x.shape[3], wp = x.shape[4]
    cdef Py_ssize_t co = w.shape[0]
    cdef int k = <int>w.shape[2]
    cdef Py_ssize_t kdim = ci * k * k * k, plane = ho * wo, ovol = do * ho * wo
    cdef Py_ssize_t xvol = x.shape[2] * hp * wp
    cdef cnp.ndarray[double, ndim=5, mode="c"] out = np.empty((n, co, do, ho, wo), dtype=np.float64)
    cdef const double* xp = &x[0, 0, 0, 0, 0]
    cdef const double* wptr = &w[0, 0, 0, 0, 0]
    cdef double* op = &out[0, 0, 0, 0, 0]
    cdef double* cols = <double*>malloc(kdim * plane * sizeof(double))
    cdef Py_ssize_t b, i
    if cols == NULL:
        raise MemoryError()
    with nogil:
        for b in range(n):
            for i in range(do):
                _gather_plane(xp + b * ci * xvol, cols, ci, xvol, hp, wp, k, stride, i, ho, wo)
                _gemm(False, False, <int>co, <int>plane, <int>kdim, 1.0,
                      wptr, <int>kdim, cols, <int>plane, 0.0,
                      op + b * co * ovol + i * plane, <int>ovol)
    free(cols)
    return out


def _conv_backward_input(g_in, w_in, int stride, Py_ssize_t dp, Py_ssize_t hp, Py_ssize_t wp):
    cdef cnp.ndarray[double, ndim=5, mode="c"] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=5, mode="c"] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], co = g.shape[1]
    cdef Py_ssize_t do = g.shape[2], ho = g.shape[3], wo = g.shape[4]
    cdef Py_ssize_t ci = w.shape[1]
    cdef int k = <int>w.shape[2]
    cdef Py_ssize_t kdim = ci * k * k * k, plane = ho * wo, gvol = do * ho * wo
    cdef Py_ssize_t xvol = dp * hp * wp
    cdef cnp.ndarray[double, ndim=5, mode="c"] out = np.zeros((n, ci, dp, hp, wp), dtype=np.float64)
    cdef const double* gp = &g[0, 0, 0, 0, 0]
    cdef const double* wptr = &w[0, 0, 0, 0, 0]
    cdef double* xp = &out[0, 0, 0, 0, 0]
    cdef double* cols = <double*>malloc(kdim * plane * sizeof(double))
    cdef Py_ssize_t b, i
    if cols == NULL:
        raise MemoryError()
    with nogil:
        for b in range(n):
            for i in range(do):
                _gemm(True, False, <int>kdim, <int>plane, <int>co, 1.0,
                      wptr, <int>kdim, gp + b * co * gvol + i * plane, <int>gvol, 0.0,
                      cols, <int>plane)
                _scatter_plane(cols, xp + b * ci * xvol, ci, xvol, hp, wp, k, stride, i, ho, wo)
    free(cols)
    return out


def _conv_backward_weight(g_in, xpad_in, int k, int stride):
    cdef cnp.ndarray[double, ndim=5, mode="c"] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=5, mode="c"] x = np.ascontiguousarray(xpad_in, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], co = g.shape[1]
    cdef Py_ssize_t do = g.shape[2], ho = g.shape[3], wo = g.shape[4]
    cdef Py_ssize_t ci = x.shape[1], hp = x.shape[3], wp = x.shape[4]
    cdef Py_ssize_t kdim = ci * k * k * k, plane = ho * wo, gvol = do * ho * wo
    cdef Py_ssize_t xvol = x.shape[2] * hp * wp
    cdef cnp.ndarray[double, ndim=5, mode="c"] dw = np.zeros((co, ci, k, k, k), dtype=np.float64)
    cdef const double* gp = &g[0, 0, 0, 0, 0]
    cdef const double* xp = &x[0, 0, 0, 0, 0]
    cdef double* wptr = &dw[0, 0, 0, 0, 0]
    cdef double* cols = <double*>malloc(kdim * plane * sizeof(double))
    cdef Py_ssize_t b, i
    if cols == NULL:
        raise MemoryError()
    with nogil:
        for b in range(n):
            for i in range(do):
                _gather_plane(xp + b * ci * xvol, cols, ci, xvol, hp, wp, k, stride, i, ho, wo)
                _gemm(False, True, <int>co, <int>kdim, <int>plane, 1.0,
                      gp + b * co * gvol + i * plane, <int>gvol, cols, <int>plane, 1.0,
                      wptr, <int>kdim)
    free(cols)
    return dw


# ----------------------------------------------------------------------------
# checked entry points: the loops above trust their geometry

def conv_forward(xpad, w, int stride, Py_ssize_t do, Py_ssize_t ho, Py_ssize_t wo):
    if np.ndim(xpad) != 5 or np.ndim(w) != 5 or np.shape(w)[1] != np.shape(xpad)[1]:
        raise ValueError(f"conv_forward: weight {np.shape(w)} does not match input {np.shape(xpad)}")
    _check_extent("conv_forward", np.shape(xpad)[2:], (do, ho, wo), np.shape(w)[2], stride)
    return _conv_forward(xpad, w, stride, do, ho, wo)


def conv_backward_input(g, w, int stride, Py_ssize_t dp, Py_ssize_t hp, Py_ssize_t wp):
    if np.ndim(g) != 5 or np.ndim(w) != 5 or np.shape(w)[0] != np.shape(g)[1]:
        raise ValueError(f"conv_backward_input: weight {np.shape(w)} does not match gradient {np.shape(g)}")
    _check_extent("conv_backward_input", (dp, hp, wp), np.shape(g)[2:], np.shape(w)[2], stride)
    return _conv_backward_input(g, w, stride, dp, hp, wp)


def conv_backward_weight(g, xpad, int k, int stride):
    if np.ndim(g) != 5 or np.ndim(xpad) != 5 or np.shape(g)[0] != np.shape(xpad)[0]:
        raise ValueError(f"conv_backward_weight: batch of {np.shape(g)} and {np.shape(xpad)} differ")
    _check_extent("conv_backward_weight", np.shape(xpad)[2:], np.shape(g)[2:], k, stride)
    return _conv_backward_weight(g, xpad, k, stride)
