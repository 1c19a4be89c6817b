"""Adam with bias correction, stepwise learning-rate decay, optional
global-norm gradient clipping, and an exponential moving average of the
parameters for evaluation and sampling.
"""

from contextlib import contextmanager

import numpy as np

from .ndtensor import NumericsError


class Adam:
    """Moment state is keyed by parameter name so it survives checkpoint
    round trips independent of construction order."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.99), eps=1e-8,
                 ema_decay=0.999, lr_decay=0.5, lr_decay_every=200000,
                 grad_clip=100.0):
        if not params:
            raise ValueError("no parameters to optimize")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if lr <= 0 or eps <= 0:
            raise ValueError("lr and eps must be positive")
        self.params = dict(params)
        self.lr_base = lr
        self.betas = betas
        self.eps = eps
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.grad_clip = grad_clip
        self.ema_decay = ema_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.ema = {k: p.data.copy() for k, p in self.params.items()}

    def lr_at(self, step):
        """Learning rate in effect after ``step`` completed updates."""
        return self.lr_base * self.lr_decay ** (step // self.lr_decay_every)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """One parameter update from the accumulated gradients; parameters
        with no gradient this step are left untouched (their moments decay)."""
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient in {name}; step aborted")
            grads[name] = g
        if self.grad_clip and self.grad_clip > 0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.grad_clip:
                scale = self.grad_clip / total
                grads = {k: g * scale for k, g in grads.items()}
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        d = self.ema_decay
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.ema[name] *= d
            self.ema[name] += (1.0 - d) * p.data
        return lr

    # ---- checkpoint plumbing ----

    def state(self):
        moments = {k: (self.m[k], self.v[k]) for k in self.params}
        return self.step_count, moments, self.ema

    def load_state(self, step_count, moments, ema):
        for k in self.params:
            if k not in moments:
                raise ValueError(f"optimizer state missing {k}")
            m, v = moments[k]
            if m.shape != self.m[k].shape or v.shape != self.v[k].shape:
                raise ValueError(f"optimizer moment shape mismatch for {k}")
            self.m[k][...] = m
            self.v[k][...] = v
        if ema:
            for k in self.params:
                if k not in ema:
                    raise ValueError(f"EMA shadow missing {k}")
                self.ema[k][...] = ema[k]
        self.step_count = step_count


@contextmanager
def swap_params(params, values):
    """Temporarily load ``values`` (e.g. the EMA shadow) into the live
    parameter tensors; restores the originals on exit."""
    saved = {k: p.data.copy() for k, p in params.items()}
    try:
        for k, p in params.items():
            p.data[...] = values[k]
        yield
    finally:
        for k, p in params.items():
            p.data[...] = saved[k]
