"""Dense N-D float64 tensors with a tape-based reverse-mode engine.

The op set is exactly what the flow, the conditioner and the training loop
need: elementwise arithmetic and activations, channel concat/split,
conv2d, per-pixel channel mixing, squeeze/unsqueeze, average pooling and
reductions. Ops record onto a thread-local tape in execution order;
``backward`` replays the tape reversed, accumulating gradients additively
into every tensor that requires them. Non-finite results raise instead of
propagating.
"""

import struct
import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels

LOG_2PI = float(np.log(2.0 * np.pi))

# toggled off only by benchmarks; every op validates finiteness by default
FINITE_CHECKS = True


class NumericsError(ArithmeticError):
    """A forward op produced NaN/Inf or was called outside its domain."""


class _Rec:
    """One recorded op: its output tensors and a backward closure."""

    __slots__ = ("outs", "bwd", "spent")

    def __init__(self, outs, bwd):
        self.outs = outs
        self.bwd = bwd
        self.spent = False


class Graph:
    """Ops in execution order for one thread's current forward pass."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []


_state = threading.local()


def _graph():
    g = getattr(_state, "graph", None)
    if g is None:
        g = Graph()
        _state.graph = g
    return g


def _recording():
    return getattr(_state, "enabled", True)


def reset_graph():
    """Drop any recorded ops (start of a fresh training step)."""
    _state.graph = Graph()


@contextmanager
def no_grad():
    prev = getattr(_state, "enabled", True)
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr, what):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{what} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_rec")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._rec = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, requires_grad=True):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _result(data, inputs, bwd, what):
    _check_finite(data, what)
    req = _recording() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        rec = _Rec((out,), bwd)
        out._rec = rec
        _graph().entries.append(rec)
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Replay the tape in reverse; leaves end up holding d(loss)/d(leaf)."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward expects a scalar Tensor loss")
    rec = loss._rec
    if rec is None:
        raise ValueError("loss is not attached to a recorded graph "
                         "(backward called twice without a new forward pass?)")
    if rec.spent:
        raise ValueError("backward called twice without a new forward pass")
    g = _graph()
    loss.grad = np.ones_like(loss.data)
    for r in reversed(g.entries):
        if r.spent:
            continue
        r.spent = True
        gouts = [o.grad for o in r.outs]
        if all(gg is None for gg in gouts):
            continue
        r.bwd(gouts)
        for o in r.outs:
            o.grad = None  # non-leaf grads are discarded
    g.entries.clear()


# --- broadcasting (trailing-dims only) ------------------------------------

def _check_trailing(a_shape, b_shape):
    if len(b_shape) > len(a_shape):
        raise ValueError(f"operand shape {b_shape} has higher rank than {a_shape}")
    for da, db in zip(a_shape[len(a_shape) - len(b_shape):], b_shape):
        if db != da and db != 1:
            raise ValueError(f"shape {b_shape} not broadcastable over trailing dims of {a_shape}")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b, what):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        data = fwd(a.data, b)

        def bwd(gouts, a=a, b=b):
            _acc(a, bwd_a(gouts[0], a.data, b))

        return _result(data, (a,), bwd, what)
    b = as_tensor(b)
    _check_trailing(a.shape, b.shape)
    data = fwd(a.data, b.data)

    def bwd(gouts, a=a, b=b):
        gy = gouts[0]
        _acc(a, bwd_a(gy, a.data, b.data))
        _acc(b, _unbroadcast(bwd_b(gy, a.data, b.data), b.shape))

    return _result(data, (a, b), bwd, what)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div")


# --- unary ops -------------------------------------------------------------

def _unary(a, fwd, bwd_fn, what):
    a = as_tensor(a)
    data = fwd(a.data)

    def bwd(gouts, a=a, data=data):
        _acc(a, bwd_fn(gouts[0], a.data, data))

    return _result(data, (a,), bwd, what)


def neg(a):
    return _unary(a, lambda x: -x, lambda g, x, y: -g, "neg")


def exp(a):
    return _unary(a, np.exp, lambda g, x, y: g * y, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericsError("log of non-positive value")
    return _unary(a, np.log, lambda g, x, y: g / x, "log")


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y), "tanh")


def _sigmoid(x):
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return _unary(a, _sigmoid, lambda g, x, y: g * y * (1.0 - y), "sigmoid")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0.0), "relu")


# --- reductions ------------------------------------------------------------

def tsum(a, axes=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(gouts, a=a, axes=axes, keepdims=keepdims):
        g = gouts[0]
        if axes is not None and not keepdims:
            ax = (axes,) if isinstance(axes, int) else axes
            g = np.expand_dims(g, ax)
        _acc(a, np.broadcast_to(g, a.shape).copy())

    return _result(data, (a,), bwd, "sum")


def tmean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    if axes is None:
        count = a.size
    else:
        ax = (axes,) if isinstance(axes, int) else axes
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axes, keepdims), 1.0 / count)


# --- shape ops -------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(gouts, a=a):
        _acc(a, gouts[0].reshape(a.shape))

    return _result(data, (a,), bwd, "reshape")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(gouts, tensors=tensors, sizes=sizes, axis=axis):
        pieces = np.split(gouts[0], np.cumsum(sizes)[:-1], axis=axis)
        for t, p in zip(tensors, pieces):
            _acc(t, p)

    return _result(data, tuple(tensors), bwd, "concat")


def split(a, at, axis):
    """Split at index ``at`` along ``axis``; inverse of concat."""
    a = as_tensor(a)
    n = a.shape[axis]
    if not 0 < at < n:
        raise ValueError(f"split point {at} does not divide axis of size {n}")
    d0, d1 = np.split(a.data, [at], axis=axis)
    _check_finite(a.data, "split")
    req = _recording() and a.requires_grad
    o0 = Tensor(d0, requires_grad=req)
    o1 = Tensor(d1, requires_grad=req)
    if req:
        def bwd(gouts, a=a, at=at, axis=axis, o0=o0, o1=o1):
            g0, g1 = gouts
            if g0 is None:
                g0 = np.zeros_like(o0.data)
            if g1 is None:
                g1 = np.zeros_like(o1.data)
            _acc(a, np.concatenate([g0, g1], axis=axis))

        rec = _Rec((o0, o1), bwd)
        o0._rec = rec
        o1._rec = rec
        _graph().entries.append(rec)
    return o0, o1


def squeeze2(a, fh=2, fw=2):
    """Space-to-depth: (..., C, H, W) -> (..., C*fh*fw, H/fh, W/fw).

    Block order per output channel group: row-major within the fh x fw
    block (top-left, top-right, bottom-left, bottom-right for 2x2).
    """
    a = as_tensor(a)
    *lead, C, H, W = a.shape
    if H % fh or W % fw:
        raise ValueError(f"squeeze: spatial dims {H}x{W} not divisible by {fh}x{fw}")
    data = _squeeze_data(a.data, fh, fw)

    def bwd(gouts, a=a, fh=fh, fw=fw):
        _acc(a, _unsqueeze_data(gouts[0], fh, fw))

    return _result(data, (a,), bwd, "squeeze")


def unsqueeze2(a, fh=2, fw=2):
    a = as_tensor(a)
    *lead, C, H, W = a.shape
    if C % (fh * fw):
        raise ValueError(f"unsqueeze: channel dim {C} not divisible by {fh * fw}")
    data = _unsqueeze_data(a.data, fh, fw)

    def bwd(gouts, a=a, fh=fh, fw=fw):
        _acc(a, _squeeze_data(gouts[0], fh, fw))

    return _result(data, (a,), bwd, "unsqueeze")


def _squeeze_data(x, fh, fw):
    *lead, C, H, W = x.shape
    x = x.reshape(*lead, C, H // fh, fh, W // fw, fw)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 4, nd + 1, nd + 3)
    return np.ascontiguousarray(x.transpose(perm)).reshape(
        *lead, C * fh * fw, H // fh, W // fw)


def _unsqueeze_data(y, fh, fw):
    *lead, C4, Ho, Wo = y.shape
    C = C4 // (fh * fw)
    y = y.reshape(*lead, C, fh, fw, Ho, Wo)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 3, nd + 1, nd + 4, nd + 2)
    return np.ascontiguousarray(y.transpose(perm)).reshape(*lead, C, Ho * fh, Wo * fw)


def avg_pool(a, fh, fw):
    """Average pooling by integer factors over the last two dims."""
    a = as_tensor(a)
    *lead, C, H, W = a.shape
    if H % fh or W % fw:
        raise ValueError(f"avg_pool: spatial dims {H}x{W} not divisible by {fh}x{fw}")
    Ho, Wo = H // fh, W // fw
    data = a.data.reshape(*lead, C, Ho, fh, Wo, fw).mean(axis=(-3, -1))

    def bwd(gouts, a=a, fh=fh, fw=fw):
        g = gouts[0] / (fh * fw)
        g = np.broadcast_to(g[..., :, None, :, None],
                            g.shape[:-2] + (g.shape[-2], fh, g.shape[-1], fw))
        _acc(a, g.reshape(a.shape))

    return _result(data, (a,), bwd, "avg_pool")


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    data = a.data @ b.data

    def bwd(gouts, a=a, b=b):
        g = gouts[0]
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _result(data, (a, b), bwd, "matmul")


def channel_mix(x, w):
    """Apply w[C_out, C_in] to the channel dim at every pixel of (N,C,H,W)."""
    x, w = as_tensor(x), as_tensor(w)
    data = np.einsum("oc,nchw->nohw", w.data, x.data)

    def bwd(gouts, x=x, w=w):
        g = gouts[0]
        _acc(w, np.einsum("nohw,nchw->oc", g, x.data))
        _acc(x, np.einsum("oc,nohw->nchw", w.data, g))

    return _result(data, (x, w), bwd, "channel_mix")


def conv2d(x, w, b=None, padding=0, stride=1):
    """Cross-correlation of (N,Ci,H,W) with (Co,Ci,kh,kw) plus bias (Co,).

    Odd kernels only; a 3-D input is treated as a single frame.
    Dispatches to the active kernel backend.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim == 3:
        y = conv2d(reshape(x, (1, *x.shape)), w, b, padding, stride)
        return reshape(y, y.shape[1:])
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError("conv2d kernels must have odd spatial dims")
    if padding < 0:
        raise ValueError("conv2d padding must be >= 0")
    if x.ndim != 4:
        raise ValueError("conv2d expects (N,C,H,W) input")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    data = _kernels.conv2d_forward(xd, wd, padding, stride)
    if b is not None:
        b = as_tensor(b)
        data = data + b.data.reshape(-1, 1, 1)
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def bwd(gouts, x=x, w=w, b=b, xd=xd, wd=wd, padding=padding, stride=stride):
        g = np.ascontiguousarray(gouts[0])
        _acc(x, _kernels.conv2d_grad_input(g, wd, xd.shape, padding, stride))
        _acc(w, _kernels.conv2d_grad_weight(g, xd, wd.shape, padding, stride))
        if b is not None:
            _acc(b, g.sum(axis=(0, 2, 3)))

    return _result(data, inputs, bwd, "conv2d")


# --- verification oracle ----------------------------------------------------

def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x, element by element."""
    x = as_tensor(x)
    grad = np.zeros_like(x.data)
    with no_grad():
        for idx in np.ndindex(x.data.shape):
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = f(x)
            fp = fp.item() if isinstance(fp, Tensor) else float(fp)
            x.data[idx] = orig - eps
            fm = f(x)
            fm = fm.item() if isinstance(fm, Tensor) else float(fm)
            x.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericsError("finite_diff_grad: f non-finite at perturbed point")
            grad[idx] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


# --- serialization ----------------------------------------------------------

_DTYPE_TAGS = {0: np.float32, 1: np.float64}


def write_array(fh, arr, dtype=np.float64):
    """Little-endian: u8 dtype tag (0=f32, 1=f64), u32 rank, u32 dims, raw values."""
    tag = 0 if np.dtype(dtype) == np.float32 else 1
    fh.write(struct.pack("<BI", tag, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def read_array(fh):
    head = fh.read(5)
    if len(head) != 5:
        raise ValueError("truncated tensor header")
    tag, rank = struct.unpack("<BI", head)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dims = []
    for _ in range(rank):
        dims.append(struct.unpack("<I", fh.read(4))[0])
    count = int(np.prod(dims)) if dims else 1
    dt = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(dims)
