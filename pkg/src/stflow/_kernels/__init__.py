"""Conv2d kernel backend selection.

The compiled Cython extension is preferred; the numpy im2col fallback is
used when the extension was not built or when ``STFLOW_BACKEND=numpy`` is
set. ``BACKEND`` names the active implementation.
"""

import os

from . import conv_ref
from .conv_ref import _out_dims

BACKEND = "numpy"
_impl = conv_ref

if os.environ.get("STFLOW_BACKEND", "").lower() not in ("numpy", "python"):
    try:
        from . import _conv_cy

        _impl = _conv_cy
        BACKEND = "compiled"
    except ImportError:
        pass


def conv2d_forward(x, w, padding, stride):
    # validate here so both backends share the error contract
    _out_dims(x.shape[2], x.shape[3], w.shape[2], w.shape[3], padding, stride)
    return _impl.conv2d_forward(x, w, padding, stride)


def conv2d_grad_weight(gy, x, w_shape, padding, stride):
    return _impl.conv2d_grad_weight(gy, x, w_shape, padding, stride)


def conv2d_grad_input(gy, w, x_shape, padding, stride):
    return _impl.conv2d_grad_input(gy, w, x_shape, padding, stride)
