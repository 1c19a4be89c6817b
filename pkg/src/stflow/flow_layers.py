"""Invertible layers: conditional affine coupling, LU-parametrized 1x1
convolution, activation normalization, squeeze, and the conditional
split/final Gaussian priors.

Every layer exposes a data-to-latent ``forward`` returning its exact
log-determinant contribution (per batch example, in nats) and an exact
``inverse``. Priors return log-probabilities and support temperature-scaled
sampling from a caller-supplied generator.
"""

import numpy as np
import scipy.linalg

from . import ndtensor as nd
from .ndtensor import Tensor, param

# re-exported: squeeze is part of the invertible zoo
squeeze = nd.squeeze2
unsqueeze = nd.unsqueeze2


def gaussian_logprob(z, mu, log_sigma):
    """Sum over all elements of log N(z; mu, exp(log_sigma)^2), in nats."""
    return nd.tsum(_gauss_terms(z, mu, log_sigma))


def gaussian_logprob_batched(z, mu, log_sigma):
    """Per-example logprob: sums every axis except the leading batch axis."""
    t = _gauss_terms(z, mu, log_sigma)
    return nd.tsum(t, axes=tuple(range(1, t.ndim)))


def _gauss_terms(z, mu, log_sigma):
    z, mu, log_sigma = nd.as_tensor(z), nd.as_tensor(mu), nd.as_tensor(log_sigma)
    if z.shape != mu.shape or z.shape != log_sigma.shape:
        raise ValueError("gaussian_logprob expects equal shapes")
    d = nd.sub(z, mu)
    inv_var = nd.exp(nd.mul(log_sigma, -2.0))
    quad = nd.mul(nd.mul(nd.mul(d, d), inv_var), 0.5)
    const = Tensor(np.full(z.shape, -0.5 * nd.LOG_2PI))
    return nd.sub(nd.sub(const, log_sigma), quad)


def _expand(scalar, n):
    # per-example accumulator entry: same scalar for each batch element
    return nd.mul(Tensor(np.ones(n)), scalar)


class ConvNet:
    """3x3 conv -> ReLU -> 3x3 conv -> ReLU -> 1x1 head.

    The head is zero-initialized so enclosing layers start near identity.
    """

    def __init__(self, in_ch, hidden, out_ch, rng):
        self.w1 = param(rng.normal(scale=1.0 / np.sqrt(in_ch * 9), size=(hidden, in_ch, 3, 3)))
        self.b1 = param(np.zeros(hidden))
        self.w2 = param(rng.normal(scale=1.0 / np.sqrt(hidden * 9), size=(hidden, hidden, 3, 3)))
        self.b2 = param(np.zeros(hidden))
        self.w3 = param(np.zeros((out_ch, hidden, 1, 1)))
        self.b3 = param(np.zeros(out_ch))

    def __call__(self, x):
        y = nd.relu(nd.conv2d(x, self.w1, self.b1, padding=1))
        y = nd.relu(nd.conv2d(y, self.w2, self.b2, padding=1))
        return nd.conv2d(y, self.w3, self.b3, padding=0)

    def named_params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


class ActNorm:
    """Per-channel affine y = exp(log_s) * (x + b) with data-dependent init.

    First training batch sets (log_s, b) so the output has zero mean and
    unit variance per channel. logdet = H*W*sum(log_s).
    """

    def __init__(self, ch):
        self.ch = ch
        self.log_s = param(np.zeros(ch))
        self.b = param(np.zeros(ch))
        self.inited = False

    def forward(self, x, init=False):
        if init and not self.inited:
            self._init_from(x.data)
        n, _, H, W = x.shape
        s = nd.reshape(nd.exp(self.log_s), (self.ch, 1, 1))
        b = nd.reshape(self.b, (self.ch, 1, 1))
        y = nd.mul(nd.add(x, b), s)
        logdet = _expand(nd.mul(nd.tsum(self.log_s), float(H * W)), n)
        return y, logdet

    def inverse(self, y):
        s = np.exp(self.log_s.data).reshape(self.ch, 1, 1)
        b = self.b.data.reshape(self.ch, 1, 1)
        return Tensor(y.data / s - b)

    def _init_from(self, data):
        mean = data.mean(axis=(0, 2, 3))
        std = data.std(axis=(0, 2, 3))
        std = np.maximum(std, 1e-6)
        self.b.data[...] = -mean
        self.log_s.data[...] = -np.log(std)
        self.inited = True

    def named_params(self):
        return {"log_s": self.log_s, "b": self.b}

    def named_buffers(self):
        return {"inited": np.array([1.0 if self.inited else 0.0])}

    def load_buffer(self, name, arr):
        if name == "inited":
            self.inited = bool(arr.reshape(-1)[0])


class Inv1x1:
    """Invertible 1x1 convolution stored as P (fixed) * L * (U + diag(s)).

    log|det W| = sum(log_s) exactly; the inverse uses triangular solves,
    never an explicit matrix inverse.
    """

    def __init__(self, ch, rng):
        self.ch = ch
        q, _ = np.linalg.qr(rng.normal(size=(ch, ch)))
        p, l, u = scipy.linalg.lu(q)
        s = np.diag(u)
        self.perm = p  # fixed
        self.sign_s = np.sign(s)  # fixed
        self.lower = param(np.tril(l, -1))
        self.upper = param(np.triu(u, 1))
        self.log_s = param(np.log(np.abs(s)))
        self._lmask = np.tril(np.ones((ch, ch)), -1)
        self._umask = np.triu(np.ones((ch, ch)), 1)
        self._eye = np.eye(ch)

    def _weight(self):
        l_eff = nd.add(nd.mul(self.lower, Tensor(self._lmask)), Tensor(self._eye))
        diag = nd.mul(Tensor(self._eye), nd.mul(nd.exp(self.log_s), Tensor(self.sign_s)))
        u_eff = nd.add(nd.mul(self.upper, Tensor(self._umask)), diag)
        return nd.matmul(Tensor(self.perm), nd.matmul(l_eff, u_eff))

    def _weight_np(self):
        l_eff = self.lower.data * self._lmask + self._eye
        u_eff = self.upper.data * self._umask + self._eye * (
            self.sign_s * np.exp(self.log_s.data))
        return self.perm @ l_eff @ u_eff

    def forward(self, z):
        n, _, H, W = z.shape
        y = nd.channel_mix(z, self._weight())
        logdet = _expand(nd.mul(nd.tsum(self.log_s), float(H * W)), n)
        return y, logdet

    def inverse(self, y):
        n, c, H, W = y.shape
        flat = y.data.transpose(1, 0, 2, 3).reshape(c, -1)
        l_eff = self.lower.data * self._lmask + self._eye
        u_eff = self.upper.data * self._umask + self._eye * (
            self.sign_s * np.exp(self.log_s.data))
        t = self.perm.T @ flat
        t = scipy.linalg.solve_triangular(l_eff, t, lower=True, unit_diagonal=True)
        t = scipy.linalg.solve_triangular(u_eff, t, lower=False)
        return Tensor(t.reshape(c, n, H, W).transpose(1, 0, 2, 3))

    def named_params(self):
        return {"lower": self.lower, "upper": self.upper, "log_s": self.log_s}

    def named_buffers(self):
        return {"perm": self.perm, "sign_s": self.sign_s}

    def load_buffer(self, name, arr):
        if name == "perm":
            self.perm = arr.reshape(self.ch, self.ch)
        elif name == "sign_s":
            self.sign_s = arr.reshape(self.ch)


class Coupling:
    """Conditional affine coupling: y0 = s(z1,h)*z0 + t(z1,h), y1 = z1.

    s = sigmoid(raw_s + 2) keeps the scale bounded away from 0 and from
    blowing up; with the zero-initialized head the layer starts at
    s = sigmoid(2) ~ 0.8808, i.e. near identity.
    """

    def __init__(self, ch, cond_ch, hidden, rng):
        if ch < 2:
            raise ValueError("coupling needs at least 2 channels")
        self.ch = ch
        self.c0 = ch // 2
        self.net = ConvNet(ch - self.c0 + cond_ch, hidden, 2 * self.c0, rng)

    def _scale_shift(self, z1, h):
        if h.shape[2:] != z1.shape[2:]:
            raise ValueError(
                f"conditioning spatial dims {h.shape[2:]} do not match {z1.shape[2:]}")
        raw = self.net(nd.concat([z1, h], axis=1))
        raw_s, t = nd.split(raw, self.c0, axis=1)
        s = nd.sigmoid(nd.add(raw_s, 2.0))
        return s, t

    def forward(self, z, h):
        z0, z1 = nd.split(z, self.c0, axis=1)
        s, t = self._scale_shift(z1, h)
        y0 = nd.add(nd.mul(s, z0), t)
        logdet = nd.tsum(nd.log(s), axes=(1, 2, 3))
        return nd.concat([y0, z1], axis=1), logdet

    def inverse(self, y, h):
        y0, y1 = nd.split(y, self.c0, axis=1)
        s, t = self._scale_shift(y1, h)
        assert np.all(s.data > 0.0), "coupling scale underflow"
        z0 = nd.div(nd.sub(y0, t), s)
        return nd.concat([z0, y1], axis=1)

    def named_params(self):
        return {f"net.{k}": v for k, v in self.net.named_params().items()}


class SplitPrior:
    """Factor out half the channels under N(mu, sigma^2) with
    (mu, log_sigma) = net(z0, h); the other half continues through the flow.
    """

    def __init__(self, ch, cond_ch, hidden, rng):
        if ch % 2:
            raise ValueError("split prior needs an even channel count")
        self.ch = ch
        self.half = ch // 2
        self.net = ConvNet(self.half + cond_ch, hidden, ch, rng)

    def _moments(self, z0, h):
        out = self.net(nd.concat([z0, h], axis=1))
        return nd.split(out, self.half, axis=1)

    def forward(self, z, h):
        z0, z1 = nd.split(z, self.half, axis=1)
        mu, log_sigma = self._moments(z0, h)
        logprob = gaussian_logprob_batched(z1, mu, log_sigma)
        return z0, logprob, z1

    def inverse(self, z0, h, temperature, rng):
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        mu, log_sigma = self._moments(z0, h)
        eps = rng.standard_normal(mu.shape)
        z1 = mu.data + temperature * np.exp(log_sigma.data) * eps
        return nd.concat([z0, Tensor(z1)], axis=1)

    def named_params(self):
        return {f"net.{k}": v for k, v in self.net.named_params().items()}


class ConditionalPrior:
    """Gaussianize the final latent: p(z|h) = N(z; mu(h), sigma^2(h))."""

    def __init__(self, ch, cond_ch, hidden, rng):
        self.ch = ch
        self.net = ConvNet(cond_ch, hidden, 2 * ch, rng)

    def _moments(self, h):
        return nd.split(self.net(h), self.ch, axis=1)

    def logprob(self, z, h):
        mu, log_sigma = self._moments(h)
        return gaussian_logprob_batched(z, mu, log_sigma)

    def sample(self, h, temperature, rng):
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        mu, log_sigma = self._moments(h)
        eps = rng.standard_normal(mu.shape)
        return Tensor(mu.data + temperature * np.exp(log_sigma.data) * eps)

    def named_params(self):
        return {f"net.{k}": v for k, v in self.net.named_params().items()}


class FlowState:
    """Latent representation plus the running log-det and prior log-prob
    accumulators (per batch example, nats) and the factored-out latents."""

    def __init__(self, n):
        self.z = None
        self.logdet = Tensor(np.zeros(n))
        self.logprob = Tensor(np.zeros(n))
        self.factored = []  # (scale index, latent Tensor)

    def add_logdet(self, ld):
        self.logdet = nd.add(self.logdet, ld)

    def add_logprob(self, lp):
        self.logprob = nd.add(self.logprob, lp)
