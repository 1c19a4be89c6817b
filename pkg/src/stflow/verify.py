"""Self-contained invariant checks: inverse round trips, the numeric
Jacobian oracle for the accumulated log-determinant, finite-difference
gradient agreement, grid quadrature of a two-pixel density, serialization
round trips, and metric identities.

Each check reports a measured error against its tolerance; run_verify
returns structured results so both the CLI and the test suite can consume
them. corrupt_inverse deliberately breaks one coupling inverse so the
round-trip check must fail (negative control for the harness itself).
"""

import io
import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .conditioner import MemoryState
from .model import ModelConfig, STFlow, bits_per_dim
from .metrics import psnr, rmse, ssim


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name}: {status} measured={self.measured:.3e} "
                f"tolerance={self.tolerance:.3e}")


def _tiny_model(height=8, width=8, levels=2, steps=2, seed=11):
    cfg = ModelConfig(in_channels=1, height=height, width=width, levels=levels,
                      flow_steps=steps, cond_channels=4, coupling_hidden=8,
                      gated_hidden=4, gated_layers=1)
    return STFlow(cfg, seed=seed)


def _perturb(model, rng, scale=0.05):
    # move off the zero-init saddle so every parameter influences the loss
    for p in model.named_params().values():
        p.data += scale * rng.standard_normal(p.data.shape)


def _memory(model, rng, n):
    cfg = model.config
    frames = [Tensor(rng.random((n, cfg.in_channels, cfg.height, cfg.width)))
              for _ in range(2)]
    with nd.no_grad():
        return model.encode_context(frames)


def check_roundtrip(corrupt_inverse=False):
    model = _tiny_model()
    rng = np.random.default_rng(0)
    _perturb(model, rng)
    if corrupt_inverse:
        coupling = model.scales[0].steps[0].coupling
        orig = coupling.inverse
        coupling.inverse = lambda y, h: Tensor(orig(y, h).data + 1e-3)
    mem = _memory(model, rng, 2)
    x = Tensor(rng.random((2, 1, 8, 8)))
    with nd.no_grad():
        _, state = model.forward_nll(x, mem)
    back = model.reconstruct(state, mem)
    err = float(np.abs(back.data - x.data).max())
    return CheckResult("roundtrip_full_model", err < 1e-8, err, 1e-8)


def numeric_logdet(model, x0, mem, eps=1e-5):
    """log|det J| of the data-to-latent map, assembled column by column
    from central differences; x0 is a single (C, H, W) example."""
    d = x0.size

    def flat_latent(x_flat):
        x = Tensor(x_flat.reshape((1,) + x0.shape))
        with nd.no_grad():
            _, state = model.forward_nll(x, mem)
        parts = [z1.data.reshape(-1) for _, z1 in state.factored]
        parts.append(state.z.data.reshape(-1))
        return np.concatenate(parts)

    base = x0.reshape(-1).astype(np.float64)
    jac = np.empty((d, d))
    for j in range(d):
        hi = base.copy()
        lo = base.copy()
        hi[j] += eps
        lo[j] -= eps
        jac[:, j] = (flat_latent(hi) - flat_latent(lo)) / (2 * eps)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0:
        raise ValueError("numeric Jacobian is singular")
    return logabs


def check_logdet():
    cfg = ModelConfig(in_channels=1, height=4, width=4, levels=1, flow_steps=2,
                      cond_channels=3, coupling_hidden=8, gated_hidden=4,
                      gated_layers=1)
    model = STFlow(cfg, seed=5)
    rng = np.random.default_rng(1)
    _perturb(model, rng)
    mem = _memory(model, rng, 1)
    x = rng.random((1, 1, 4, 4))
    with nd.no_grad():
        _, state = model.forward_nll(Tensor(x), mem)
    analytic = float(state.logdet.data[0])
    numeric = numeric_logdet(model, x[0], mem)
    err = abs(analytic - numeric)
    return CheckResult("logdet_vs_numeric_jacobian", err < 1e-4, err, 1e-4)


def check_gradients():
    cfg = ModelConfig(in_channels=1, height=4, width=4, levels=1, flow_steps=1,
                      cond_channels=2, coupling_hidden=3, gated_hidden=3,
                      gated_layers=0)
    model = STFlow(cfg, seed=3)
    rng = np.random.default_rng(2)
    _perturb(model, rng)
    params = model.named_params()
    total = model.param_count()
    if total > 5000:
        raise ValueError(f"gradient-check model too large: {total} params")
    ctx = [Tensor(rng.random((2, 1, 4, 4))) for _ in range(2)]
    x = Tensor(rng.random((2, 1, 4, 4)))

    def loss_value():
        mem = model.encode_context(ctx)
        nll, _ = model.forward_nll(x, mem)
        return nd.tmean(nll)

    loss = loss_value()
    nd.backward(loss)
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        # eps balances truncation against round-off: the smallest gradients
        # here are ~1e-6 while the loss is O(10), so 1e-5 steps drown in
        # float64 noise
        numeric = nd.finite_diff_grad(lambda _p: loss_value(), p, eps=1e-4).data
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = float((np.abs(analytic - numeric) / denom).max())
        worst = max(worst, rel)
    return CheckResult("gradient_vs_finite_difference", worst < 1e-4, worst, 1e-4)


def check_quadrature():
    cfg = ModelConfig(in_channels=1, height=1, width=2, levels=1, flow_steps=2,
                      cond_channels=2, coupling_hidden=4, gated_hidden=3,
                      gated_layers=1)
    model = STFlow(cfg, seed=9)
    rng = np.random.default_rng(4)
    _perturb(model, rng)
    mem1 = _memory(model, rng, 1)
    lo, hi, n = -9.0, 9.0, 301
    xs = np.linspace(lo, hi, n)
    cell = (xs[1] - xs[0]) ** 2
    grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    total = 0.0
    chunk = 4096
    with nd.no_grad():
        for i in range(0, grid.shape[0], chunk):
            pts = grid[i:i + chunk]
            x = Tensor(pts.reshape(-1, 1, 1, 2))
            mem = _broadcast_memory(mem1, pts.shape[0])
            nll, _ = model.forward_nll(x, mem)
            total += float(np.exp(-nll.data).sum()) * cell
    err = abs(total - 1.0)
    return CheckResult("density_quadrature", err < 0.01, err, 0.01)


def _broadcast_memory(mem, n):
    return MemoryState(Tensor(np.repeat(mem.h.data, n, axis=0)),
                       Tensor(np.repeat(mem.c.data, n, axis=0)), mem.step)


def check_serialization():
    rng = np.random.default_rng(6)
    worst = 0.0
    for shape in ((3,), (2, 4), (2, 3, 4, 5)):
        a = rng.standard_normal(shape)
        buf = io.BytesIO()
        nd.write_array(buf, a)
        buf.seek(0)
        b = nd.read_array(buf)
        if not np.array_equal(a, b):
            worst = max(worst, float(np.abs(a - b).max()) or 1.0)
    return CheckResult("tensor_serialization_roundtrip", worst == 0.0, worst, 0.0)


def check_metrics():
    errs = [
        abs(rmse(np.zeros(2), np.array([3.0, 4.0])) - math.sqrt(12.5)),
        abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.1), 1.0) - 20.0),
        abs(ssim(np.ones((8, 8)), np.ones((8, 8)), 1.0) - 1.0),
        abs(bits_per_dim(1000.0, 256) - 1000.0 / (256 * math.log(2))),
    ]
    worst = max(errs)
    return CheckResult("metric_identities", worst < 1e-9, worst, 1e-9)


def run_verify(corrupt_inverse=False):
    return [
        check_roundtrip(corrupt_inverse=corrupt_inverse),
        check_logdet(),
        check_gradients(),
        check_quadrature(),
        check_serialization(),
        check_metrics(),
    ]
