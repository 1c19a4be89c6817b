"""Recurrent conditioning tower: a gated convolutional network drives a
ConvLSTM cell whose hidden map summarizes all frames seen so far.

The cell state update is

    (g, i, f, o) = GatedConvNet([x_prev, h_prev])
    c = sigmoid(g) * sigmoid(i) + c_prev * sigmoid(f)
    h = tanh(c) * sigmoid(o)

with every gate squashed through a sigmoid, including the write value g.
All gate maps keep the input's spatial resolution; downscaled copies of h
for coarser flow scales come from average pooling.
"""

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor, param


def concat_relu(x):
    """Channel-doubling nonlinearity [relu(x), relu(-x)]; loses no sign
    information, unlike plain ReLU."""
    return nd.concat([nd.relu(x), nd.relu(nd.neg(x))], axis=1)


class GatedConvLayer:
    """conv3x3 -> concat ReLU -> conv3x3 -> value * sigmoid(gate), with a
    residual connection (channel counts always match here).

    Zero head weights make the block an identity at init.
    """

    def __init__(self, ch, rng, residual=True):
        self.ch = ch
        self.residual = residual
        self.w1 = param(rng.normal(scale=1.0 / np.sqrt(ch * 9), size=(ch, ch, 3, 3)))
        self.b1 = param(np.zeros(ch))
        self.w2 = param(np.zeros((2 * ch, 2 * ch, 3, 3)))
        self.b2 = param(np.zeros(2 * ch))

    def __call__(self, x):
        a = nd.conv2d(x, self.w1, self.b1, padding=1)
        a = concat_relu(a)
        a = nd.conv2d(a, self.w2, self.b2, padding=1)
        value, gate = nd.split(a, self.ch, axis=1)
        out = nd.mul(value, nd.sigmoid(gate))
        if self.residual:
            out = nd.add(x, out)
        return out

    def named_params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class GatedConvNet:
    """Conv stem, a stack of gated layers, and a linear conv head."""

    def __init__(self, in_ch, hidden, out_ch, n_layers, rng, residual=True):
        self.stem_w = param(rng.normal(scale=1.0 / np.sqrt(in_ch * 9),
                                       size=(hidden, in_ch, 3, 3)))
        self.stem_b = param(np.zeros(hidden))
        self.layers = [GatedConvLayer(hidden, rng, residual) for _ in range(n_layers)]
        self.head_w = param(np.zeros((out_ch, hidden, 3, 3)))
        self.head_b = param(np.zeros(out_ch))

    def __call__(self, x):
        y = nd.conv2d(x, self.stem_w, self.stem_b, padding=1)
        for layer in self.layers:
            y = layer(y)
        return nd.conv2d(y, self.head_w, self.head_b, padding=1)

    def named_params(self):
        out = {"stem.w": self.stem_w, "stem.b": self.stem_b,
               "head.w": self.head_w, "head.b": self.head_b}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named_params().items():
                out[f"layer{i}.{k}"] = v
        return out


class MemoryState:
    """ConvLSTM state after absorbing ``step`` frames; h is the map the
    flow conditions on."""

    __slots__ = ("h", "c", "step")

    def __init__(self, h, c, step):
        self.h = h
        self.c = c
        self.step = step


class ConvLSTM:
    """Single-cell convolutional LSTM over grid frames."""

    def __init__(self, x_ch, ch, net_hidden, n_layers, rng, residual=True):
        self.x_ch = x_ch
        self.ch = ch
        self.net = GatedConvNet(x_ch + ch, net_hidden, 4 * ch, n_layers, rng, residual)

    def init_state(self, n, height, width):
        shape = (n, self.ch, height, width)
        return MemoryState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)), 0)

    def step(self, x_prev, state):
        if x_prev.shape[1] != self.x_ch:
            raise ValueError(f"expected {self.x_ch} input channels, got {x_prev.shape[1]}")
        gates = self.net(nd.concat([x_prev, state.h], axis=1))
        g, rest = nd.split(gates, self.ch, axis=1)
        i, rest = nd.split(rest, self.ch, axis=1)
        f, o = nd.split(rest, self.ch, axis=1)
        c = nd.add(nd.mul(nd.sigmoid(g), nd.sigmoid(i)),
                   nd.mul(state.c, nd.sigmoid(f)))
        h = nd.mul(nd.tanh(c), nd.sigmoid(o))
        return MemoryState(h, c, state.step + 1)

    def encode(self, frames, state=None):
        """Absorb frames in order. frames: iterable of (N, C, H, W) Tensors."""
        frames = list(frames)
        if not frames:
            raise ValueError("encode needs at least one frame")
        if state is None:
            n, _, height, width = frames[0].shape
            state = self.init_state(n, height, width)
        for x in frames:
            state = self.step(x, state)
        return state

    def named_params(self):
        return {f"net.{k}": v for k, v in self.net.named_params().items()}


def pool_to(h, height, width):
    """Average-pool h down to (height, width); dims must divide evenly."""
    _, _, hh, hw = h.shape
    if hh % height or hw % width:
        raise ValueError(f"cannot pool {hh}x{hw} state to {height}x{width}")
    fh, fw = hh // height, hw // width
    if fh == 1 and fw == 1:
        return h
    return nd.avg_pool(h, fh, fw)
