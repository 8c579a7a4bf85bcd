"""Pure numpy convolution kernels (im2col + matrix multiply).

Same signatures as the compiled ``_kernels`` module.
"""
import numpy as np


def im2col3d(xpad, k, stride, do, ho, wo):
    n, c = xpad.shape[:2]
    cols = np.empty((n, c, k, k, k, do, ho, wo), dtype=np.float64)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                cols[:, :, a, b, cc] = xpad[:, :,
                                            a:a + stride * do:stride,
                                            b:b + stride * ho:stride,
                                            cc:cc + stride * wo:stride]
    return cols.reshape(n, c * k ** 3, do * ho * wo)


def col2im3d(cols, c, dp, hp, wp, k, stride, do, ho, wo):
    n = cols.shape[0]
    cols = cols.reshape(n, c, k, k, k, do, ho, wo)
    out = np.zeros((n, c, dp, hp, wp), dtype=np.float64)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                out[:, :,
                    a:a + stride * do:stride,
                    b:b + stride * ho:stride,
                    cc:cc + stride * wo:stride] += cols[:, :, a, b, cc]
    return out


def conv_forward(xpad, w, stride, do, ho, wo):
    k = w.shape[2]
    cols = im2col3d(xpad, k, stride, do, ho, wo)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    return out.reshape(xpad.shape[0], w.shape[0], do, ho, wo)


def conv_backward_input(g, w, stride, dp, hp, wp):
    n, co = g.shape[:2]
    ci, k = w.shape[1], w.shape[2]
    do, ho, wo = g.shape[2:]
    cols = np.matmul(w.reshape(co, -1).T, g.reshape(n, co, -1))
    return col2im3d(cols, ci, dp, hp, wp, k, stride, do, ho, wo)


def conv_backward_weight(g, xpad, k, stride):
    n, co = g.shape[:2]
    ci = xpad.shape[1]
    do, ho, wo = g.shape[2:]
    cols = im2col3d(xpad, k, stride, do, ho, wo)
    dw = np.matmul(g.reshape(n, co, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, ci, k, k, k)
