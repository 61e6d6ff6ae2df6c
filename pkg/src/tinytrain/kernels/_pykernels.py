"""Numpy implementation of the integer convolution kernels.

Integer results are computed in float64, which is exact as long as every
partial sum stays below 2**53; the int8 x int8 accumulations used here stay
far below that, so the output matches the compiled kernels bit for bit.
The float entry points double as the shadow-model kernels.
"""
import numpy as np

BACKEND = "python"


def _pad(x, padding, value=0.0):
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_float(x, w, bias, stride, padding, groups):
    """Grouped 2-D convolution, NCHW / OIHW, computed in the dtype of ``x``."""
    n, c, h, wd = x.shape
    co, cpg, kh, kw = w.shape
    sh, sw = stride
    ho = out_size(h, kh, sh, padding[0])
    wo = out_size(wd, kw, sw, padding[1])
    xp = _pad(x, padding)
    # windows: (N, C, Ho, Wo, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    opg = co // groups
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,Co
        out = out.transpose(0, 3, 1, 2)
    else:
        win = win.reshape(n, groups, cpg, ho, wo, kh, kw)
        wg = w.reshape(groups, opg, cpg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True)
        out = out.reshape(n, co, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, co, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_input_grad_float(g, w, in_hw, stride, padding, groups):
    n, co, ho, wo = g.shape
    _, cpg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    h, wd = in_hw
    c = cpg * groups
    opg = co // groups
    gx = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    gg = g.reshape(n, groups, opg, ho, wo)
    wg = w.reshape(groups, opg, cpg, kh, kw)
    for i in range(kh):
        for j in range(kw):
            part = np.einsum("ngohw,goc->ngchw", gg, wg[:, :, :, i, j], optimize=True)
            gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                part.reshape(n, c, ho, wo)
            )
    return np.ascontiguousarray(gx[:, :, ph : ph + h, pw : pw + wd])


def conv2d_weight_grad_float(g, x, kernel, stride, padding, groups, channels=None):
    n, co, ho, wo = g.shape
    c = x.shape[1]
    kh, kw = kernel
    sh, sw = stride
    cpg = c // groups
    opg = co // groups
    xp = _pad(x, padding)
    out = np.zeros((co, cpg, kh, kw), dtype=np.result_type(g.dtype, x.dtype))
    gg = g.reshape(n, groups, opg, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            xs = xs.reshape(n, groups, cpg, ho, wo)
            part = np.einsum("ngohw,ngchw->goc", gg, xs, optimize=True)
            out[:, :, i, j] = part.reshape(co, cpg)
    if channels is not None:
        out = out[np.asarray(channels, dtype=np.intp)]
    return np.ascontiguousarray(out)


def conv2d_int8(x, x_zp, w, bias, multiplier, out_zp, qmin, qmax, stride, padding, groups):
    xf = x.astype(np.float64) - float(x_zp)
    acc = conv2d_float(xf, w.astype(np.float64), None, stride, padding, groups)
    if bias is not None:
        acc += bias.astype(np.float64).reshape(1, -1, 1, 1)
    return requantize(acc, multiplier, out_zp, qmin, qmax)


def requantize(acc, multiplier, out_zp, qmin, qmax):
    """``clip(rint(acc * m[c]) + zp)`` with one float64 multiply per element."""
    m = np.asarray(multiplier, dtype=np.float64).reshape(1, -1, *([1] * (acc.ndim - 2)))
    y = np.rint(acc * m) + out_zp
    return np.clip(y, qmin, qmax).astype(np.int8)


def conv2d_input_grad_int(g, w, in_hw, stride, padding, groups):
    out = conv2d_input_grad_float(g.astype(np.float64), w.astype(np.float64), in_hw,
                                  stride, padding, groups)
    return out.astype(np.int32)


def conv2d_weight_grad_int(g, x, x_zp, kernel, stride, padding, groups, channels=None):
    xf = x.astype(np.float64) - float(x_zp)
    out = conv2d_weight_grad_float(g.astype(np.float64), xf, kernel, stride, padding,
                                   groups, channels)
    return out.astype(np.int32)
