"""Integer convolution kernels.

The compiled Cython core is used when it imports; otherwise the numpy
implementation is selected. Set ``TINYTRAIN_KERNELS=python`` to force the
fallback. Float kernels (shadow model, fp32 head) always come from numpy.

Dense 1x1 convolutions are matrix products that numpy hands to BLAS, which
beats the compiled loops; those calls stay on numpy even when the extension
is present. Both backends are bit-identical, so dispatch never changes results.
"""
import os

from . import _pykernels as python_backend
from ._pykernels import (  # noqa: F401
    conv2d_float,
    conv2d_input_grad_float,
    conv2d_weight_grad_float,
    out_size,
    requantize,
)

compiled_backend = None
if os.environ.get("TINYTRAIN_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = _active.BACKEND



def _impl(kh, kw, groups):
    if compiled_backend is None or (groups == 1 and kh == 1 and kw == 1):
        return python_backend
    return compiled_backend


def conv2d_int8(x, x_zp, w, bias, multiplier, out_zp, qmin, qmax, stride, padding, groups):
    return _impl(w.shape[2], w.shape[3], groups).conv2d_int8(
        x, x_zp, w, bias, multiplier, out_zp, qmin, qmax, stride, padding, groups)


def conv2d_input_grad_int(g, w, in_hw, stride, padding, groups):
    return _impl(w.shape[2], w.shape[3], groups).conv2d_input_grad_int(
        g, w, in_hw, stride, padding, groups)


def conv2d_weight_grad_int(g, x, x_zp, kernel, stride, padding, groups, channels=None):
    return _impl(kernel[0], kernel[1], groups).conv2d_weight_grad_int(
        g, x, x_zp, kernel, stride, padding, groups, channels)
