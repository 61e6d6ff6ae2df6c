# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled int8 convolution kernels with int32 accumulation.

Same signatures and bit-identical results as ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport rint

cnp.import_array()

BACKEND = "cython"


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t s) nogil:
    # first output index whose input tap o*s - pad + k is >= 0
    cdef Py_ssize_t d = pad - k
    if d <= 0:
        return 0
    return (d + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t size, Py_ssize_t pad, Py_ssize_t k, Py_ssize_t s,
                           Py_ssize_t n_out) nogil:
    # one past the last output index whose input tap is < size
    cdef Py_ssize_t d = size - 1 + pad - k
    if d < 0:
        return 0
    d = d // s + 1
    return d if d < n_out else n_out


def conv2d_int8(cnp.int8_t[:, :, :, ::1] x, int x_zp, cnp.int8_t[:, :, :, ::1] w, bias,
                multiplier, int out_zp, int qmin, int qmax, stride, padding, int groups):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], cpg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (wd + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t opg = co // groups
    cdef cnp.int32_t[::1] b
    cdef bint has_bias = bias is not None
    if has_bias:
        b = np.ascontiguousarray(bias, dtype=np.int32)
    cdef double[::1] m = np.ascontiguousarray(multiplier, dtype=np.float64).reshape(-1)
    cdef bint per_channel = m.shape[0] > 1
    out_arr = np.empty((n, co, ho, wo), dtype=np.int8)
    cdef cnp.int8_t[:, :, :, ::1] out = out_arr
    acc_arr = np.empty((ho, wo), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] acc = acc_arr
    cdef Py_ssize_t i, o, g, ci, cin, ky, kx, oh, ow, ih, ow0, ow1
    cdef int wv, init
    cdef double mult, v
    for i in range(n):
        for o in range(co):
            g = o // opg
            init = b[o] if has_bias else 0
            for oh in range(ho):
                for ow in range(wo):
                    acc[oh, ow] = init
            for ci in range(cpg):
                cin = g * cpg + ci
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[o, ci, ky, kx]
                        if wv == 0:
                            continue
                        ow0 = _lo(pw, kx, sw)
                        ow1 = _hi(wd, pw, kx, sw, wo)
                        for oh in range(_lo(ph, ky, sh), _hi(h, ph, ky, sh, ho)):
                            ih = oh * sh - ph + ky
                            for ow in range(ow0, ow1):
                                acc[oh, ow] += wv * (<int>x[i, cin, ih, ow * sw - pw + kx] - x_zp)
            mult = m[o] if per_channel else m[0]
            for oh in range(ho):
                for ow in range(wo):
                    v = rint(acc[oh, ow] * mult) + out_zp
                    if v < qmin:
                        v = qmin
                    elif v > qmax:
                        v = qmax
                    out[i, o, oh, ow] = <cnp.int8_t>v
    return out_arr


def conv2d_input_grad_int(cnp.int8_t[:, :, :, ::1] g, cnp.int8_t[:, :, :, ::1] w, in_hw,
                          stride, padding, int groups):
    cdef Py_ssize_t n = g.shape[0], co = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cpg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h = in_hw[0], wd = in_hw[1]
    cdef int sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1]
    cdef Py_ssize_t opg = co // groups
    cdef Py_ssize_t c = cpg * groups
    out_arr = np.zeros((n, c, h, wd), dtype=np.int32)
    cdef cnp.int32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, o, gi, ci, cin, ky, kx, oh, ow, ih, ow0, ow1
    cdef int wv
    for i in range(n):
        for o in range(co):
            gi = o // opg
            for ci in range(cpg):
                cin = gi * cpg + ci
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[o, ci, ky, kx]
                        if wv == 0:
                            continue
                        ow0 = _lo(pw, kx, sw)
                        ow1 = _hi(wd, pw, kx, sw, wo)
                        for oh in range(_lo(ph, ky, sh), _hi(h, ph, ky, sh, ho)):
                            ih = oh * sh - ph + ky
                            for ow in range(ow0, ow1):
                                out[i, cin, ih, ow * sw - pw + kx] += wv * <int>g[i, o, oh, ow]
    return out_arr


def conv2d_weight_grad_int(cnp.int8_t[:, :, :, ::1] g, cnp.int8_t[:, :, :, ::1] x, int x_zp,
                           kernel, stride, padding, int groups, channels=None):
    cdef Py_ssize_t n = g.shape[0], co = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = kernel[0], kw = kernel[1]
    cdef int sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1]
    cdef Py_ssize_t cpg = c // groups
    cdef Py_ssize_t opg = co // groups
    if channels is None:
        sel_arr = np.arange(co, dtype=np.intp)
    else:
        sel_arr = np.ascontiguousarray(channels, dtype=np.intp)
    cdef Py_ssize_t[::1] sel = sel_arr
    cdef Py_ssize_t ns = sel.shape[0]
    out_arr = np.zeros((ns, cpg, kh, kw), dtype=np.int32)
    cdef cnp.int32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, s, o, gi, ci, cin, ky, kx, oh, ow, ih, ow0, ow1
    cdef int acc
    for s in range(ns):
        o = sel[s]
        gi = o // opg
        for ci in range(cpg):
            cin = gi * cpg + ci
            for ky in range(kh):
                for kx in range(kw):
                    acc = 0
                    ow0 = _lo(pw, kx, sw)
                    ow1 = _hi(wd, pw, kx, sw, wo)
                    for i in range(n):
                        for oh in range(_lo(ph, ky, sh), _hi(h, ph, ky, sh, ho)):
                            ih = oh * sh - ph + ky
                            for ow in range(ow0, ow1):
                                acc += <int>g[i, o, oh, ow] * (<int>x[i, cin, ih, ow * sw - pw + kx]
                                                               - x_zp)
                    out[s, ci, ky, kx] = acc
    return out_arr
