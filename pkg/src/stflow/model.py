"""Multi-scale conditional flow over grid frames, conditioned on a ConvLSTM
memory of the past, with exact likelihoods in both directions.

Scale layout, data to latent: squeeze -> K x (actnorm, 1x1 conv, coupling)
-> split prior, repeated per level; the last level ends in a conditional
Gaussian prior instead of a split. Sampling runs the exact inverse.

Checkpoints use a sectioned binary layout (magic "STFLOWCK") holding the
config text, all named arrays, optimizer state, the EMA shadow, and the
step/seed counters needed for bit-identical resumption.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .flow_layers import (ActNorm, ConditionalPrior, Coupling, FlowState,
                          Inv1x1, SplitPrior, squeeze, unsqueeze)
from .conditioner import ConvLSTM, pool_to

LN2 = float(np.log(2.0))

CKPT_MAGIC = b"STFLOWCK"
CKPT_VERSION = 1


def bits_per_dim(nll_nats, n_dims):
    """Convert a total negative log-likelihood in nats to bits per dimension."""
    if n_dims <= 0:
        raise ValueError("n_dims must be positive")
    return float(nll_nats) / (n_dims * LN2)


@dataclass
class ModelConfig:
    in_channels: int = 1
    height: int = 16
    width: int = 16
    levels: int = 2
    flow_steps: int = 2
    cond_channels: int = 32
    coupling_hidden: int = 48
    gated_hidden: int = 32
    gated_layers: int = 1
    actnorm: bool = True
    gated_residual: bool = True
    cond_adapter: str = "pool"

    def validate(self):
        for name in ("in_channels", "height", "width", "levels", "flow_steps",
                     "cond_channels", "coupling_hidden", "gated_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gated_layers < 0:
            raise ValueError("gated_layers must be >= 0")
        if self.cond_adapter not in ("pool", "conv"):
            raise ValueError("cond_adapter must be 'pool' or 'conv'")
        self.scale_plan()

    def scale_plan(self):
        """Per-scale (squeeze factors, post-squeeze dims); raises if the
        input cannot be squeezed at every level."""
        c, h, w = self.in_channels, self.height, self.width
        plan = []
        for level in range(self.levels):
            fh = 2 if (h > 1 and h % 2 == 0) else 1
            fw = 2 if (w > 1 and w % 2 == 0) else 1
            if fh * fw == 1:
                raise ValueError(
                    f"{self.in_channels}x{self.height}x{self.width} input does not "
                    f"support {self.levels} scales: height and width must be "
                    f"divisible by 2^levels")
            c, h, w = c * fh * fw, h // fh, w // fw
            plan.append(((fh, fw), (c, h, w)))
            if level < self.levels - 1:
                if c % 2:
                    raise ValueError(f"cannot split an odd channel count ({c})")
                c //= 2
        return plan


class _FlowStep:
    """One actnorm / 1x1 conv / coupling block inside a scale."""

    def __init__(self, ch, cond_ch, hidden, use_actnorm, rng, name):
        self.name = name
        self.actnorm = ActNorm(ch) if use_actnorm else None
        self.inv1x1 = Inv1x1(ch, rng)
        self.coupling = Coupling(ch, cond_ch, hidden, rng)

    def forward(self, z, h, state, init_actnorm):
        if self.actnorm is not None:
            with _layer_context(f"{self.name}.actnorm"):
                z, ld = self.actnorm.forward(z, init=init_actnorm)
            state.add_logdet(ld)
        with _layer_context(f"{self.name}.inv1x1"):
            z, ld = self.inv1x1.forward(z)
        state.add_logdet(ld)
        with _layer_context(f"{self.name}.coupling"):
            z, ld = self.coupling.forward(z, h)
        state.add_logdet(ld)
        return z

    def inverse(self, y, h):
        with _layer_context(f"{self.name}.coupling"):
            y = self.coupling.inverse(y, h)
        with _layer_context(f"{self.name}.inv1x1"):
            y = self.inv1x1.inverse(y)
        if self.actnorm is not None:
            with _layer_context(f"{self.name}.actnorm"):
                y = self.actnorm.inverse(y)
        return y

    def modules(self):
        out = {"inv1x1": self.inv1x1, "coupling": self.coupling}
        if self.actnorm is not None:
            out["actnorm"] = self.actnorm
        return out


class _layer_context:
    """Re-raise numeric failures with the offending layer's name attached."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, nd.NumericsError):
            raise nd.NumericsError(f"{exc} [layer {self.name}]") from None
        return False


@dataclass
class _Scale:
    factors: tuple
    dims: tuple  # (C, H, W) after squeeze
    steps: list = field(default_factory=list)
    split_prior: object = None
    final_prior: object = None


class STFlow:
    """The full conditional flow plus its recurrent conditioner."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.cond_channels
        self.conditioner = ConvLSTM(config.in_channels, ch, config.gated_hidden,
                                    config.gated_layers, rng,
                                    residual=config.gated_residual)
        self.adapters = []
        if config.cond_adapter == "conv":
            for (fh, fw), _dims in config.scale_plan():
                if (fh, fw) != (2, 2):
                    raise ValueError("conv adapter requires 2x2 squeeze factors "
                                     "at every scale; use cond_adapter=pool")
                self.adapters.append({
                    "w": nd.param(rng.normal(scale=1.0 / np.sqrt(ch * 9),
                                             size=(ch, ch, 3, 3))),
                    "b": nd.param(np.zeros(ch)),
                })
        self.scales = []
        plan = config.scale_plan()
        for level, (factors, dims) in enumerate(plan):
            c = dims[0]
            scale = _Scale(factors=factors, dims=dims)
            for k in range(config.flow_steps):
                scale.steps.append(_FlowStep(
                    c, ch, config.coupling_hidden, config.actnorm, rng,
                    name=f"scale{level}.step{k}"))
            if level < config.levels - 1:
                scale.split_prior = SplitPrior(c, ch, config.coupling_hidden, rng)
            else:
                scale.final_prior = ConditionalPrior(c, ch, config.coupling_hidden, rng)
            self.scales.append(scale)

    # ---- parameter registry ----

    def named_params(self):
        out = {}
        for k, v in self.conditioner.named_params().items():
            out[f"cond.{k}"] = v
        for i, ad in enumerate(self.adapters):
            out[f"adapter{i}.w"] = ad["w"]
            out[f"adapter{i}.b"] = ad["b"]
        for level, scale in enumerate(self.scales):
            for k, step in enumerate(scale.steps):
                for mod_name, mod in step.modules().items():
                    for pname, p in mod.named_params().items():
                        out[f"scale{level}.step{k}.{mod_name}.{pname}"] = p
            prior = scale.split_prior or scale.final_prior
            for pname, p in prior.named_params().items():
                out[f"scale{level}.prior.{pname}"] = p
        return out

    def named_buffers(self):
        out = {}
        for level, scale in enumerate(self.scales):
            for k, step in enumerate(scale.steps):
                for mod_name, mod in step.modules().items():
                    if hasattr(mod, "named_buffers"):
                        for bname, b in mod.named_buffers().items():
                            out[f"scale{level}.step{k}.{mod_name}.{bname}"] = b
        return out

    def param_count(self):
        return sum(p.size for p in self.named_params().values())

    def state_arrays(self):
        arrays = {k: p.data for k, p in self.named_params().items()}
        arrays.update(self.named_buffers())
        return arrays

    def load_state_arrays(self, arrays):
        params = self.named_params()
        buffer_owners = self._buffer_owners()
        known = set(params) | set(buffer_owners)
        missing = known - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint is missing arrays: {sorted(missing)[:3]}")
        for name, arr in arrays.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise CheckpointError(
                        f"shape mismatch for {name}: "
                        f"{arr.shape} vs {params[name].data.shape}")
                params[name].data[...] = arr
            elif name in buffer_owners:
                owner, leaf = buffer_owners[name]
                owner.load_buffer(leaf, arr)
            else:
                raise CheckpointError(f"unknown array in checkpoint: {name}")

    def _buffer_owners(self):
        out = {}
        for level, scale in enumerate(self.scales):
            for k, step in enumerate(scale.steps):
                for mod_name, mod in step.modules().items():
                    if hasattr(mod, "named_buffers"):
                        for bname in mod.named_buffers():
                            out[f"scale{level}.step{k}.{mod_name}.{bname}"] = (mod, bname)
        return out

    # ---- conditioning ----

    def encode_context(self, frames, state=None):
        return self.conditioner.encode(frames, state)

    def _cond_maps(self, h):
        """Conditioning map for each scale, at that scale's resolution."""
        maps = []
        if self.config.cond_adapter == "conv":
            # odd-kernel convs cannot stride-2 an even grid to an integral
            # size, so the learnable adapter pools then mixes
            cur = h
            for ad in self.adapters:
                cur = nd.avg_pool(cur, 2, 2)
                cur = nd.conv2d(cur, ad["w"], ad["b"], padding=1)
                maps.append(cur)
        else:
            for scale in self.scales:
                _, sh, sw = scale.dims
                maps.append(pool_to(h, sh, sw))
        return maps

    # ---- likelihood / inverse paths ----

    def forward_nll(self, x, mem, init_actnorm=False):
        """Exact per-example negative log-likelihood (nats) and the full
        latent state. x: (N, C, H, W)."""
        x = nd.as_tensor(x)
        self._check_input(x)
        n = x.shape[0]
        conds = self._cond_maps(mem.h)
        state = FlowState(n)
        z = x
        for level, scale in enumerate(self.scales):
            z = squeeze(z, *scale.factors)
            h = conds[level]
            for step in scale.steps:
                z = step.forward(z, h, state, init_actnorm)
            if scale.split_prior is not None:
                with _layer_context(f"scale{level}.prior"):
                    z, lp, z1 = scale.split_prior.forward(z, h)
                state.add_logprob(lp)
                state.factored.append((level, z1))
            else:
                with _layer_context(f"scale{level}.prior"):
                    lp = scale.final_prior.logprob(z, h)
                state.add_logprob(lp)
        state.z = z
        nll = nd.neg(nd.add(state.logprob, state.logdet))
        return nll, state

    def reconstruct(self, state, mem):
        """Invert a forward pass exactly from its recorded latents."""
        factored = dict(state.factored)
        with nd.no_grad():
            conds = self._cond_maps(mem.h)
            z = state.z
            for level in reversed(range(len(self.scales))):
                scale = self.scales[level]
                h = conds[level]
                if scale.split_prior is not None:
                    z = nd.concat([z, factored[level]], axis=1)
                for step in reversed(scale.steps):
                    z = step.inverse(z, h)
                z = unsqueeze(z, *scale.factors)
            return z

    def sample(self, mem, temperature=1.0, rng=None):
        """Draw one frame per batch element from p(x | memory)."""
        if rng is None:
            rng = np.random.default_rng()
        with nd.no_grad():
            conds = self._cond_maps(mem.h)
            z = None
            for level in reversed(range(len(self.scales))):
                scale = self.scales[level]
                h = conds[level]
                with _layer_context(f"scale{level}.prior"):
                    if scale.final_prior is not None:
                        z = scale.final_prior.sample(h, temperature, rng)
                    else:
                        z = scale.split_prior.inverse(z, h, temperature, rng)
                for step in reversed(scale.steps):
                    z = step.inverse(z, h)
                z = unsqueeze(z, *scale.factors)
            return z

    def rollout(self, context, steps, trajectories=1, temperature=1.0, rng=None):
        """Autoregressive ensemble forecast.

        context: (T, C, H, W) array of normalized frames, oldest first.
        Returns (trajectories, steps, C, H, W); each trajectory feeds its
        own samples back into its own memory.
        """
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if trajectories < 1:
            raise ValueError("trajectories must be >= 1")
        context = np.asarray(context, dtype=np.float64)
        if context.ndim != 4:
            raise ValueError("context must be (T, C, H, W)")
        if rng is None:
            rng = np.random.default_rng()
        m = trajectories
        with nd.no_grad():
            frames = [Tensor(np.repeat(f[None], m, axis=0)) for f in context]
            mem = self.conditioner.encode(frames)
            outs = []
            for _ in range(steps):
                x = self.sample(mem, temperature, rng)
                outs.append(x.data.copy())
                mem = self.conditioner.step(x, mem)
        return np.stack(outs, axis=1)

    def nll_dims(self):
        """Number of dimensions a per-frame NLL covers (C*H*W)."""
        c = self.config
        return c.in_channels * c.height * c.width

    def _check_input(self, x):
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.height, c.width):
            raise ValueError(
                f"expected (N, {c.in_channels}, {c.height}, {c.width}) input, "
                f"got {x.shape}")


# ---- checkpoint io ----

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config_text: str
    arrays: dict
    opt_step: int
    opt_moments: dict  # name -> (m, v); empty if absent
    ema: dict          # name -> array; empty if absent
    step: int
    seed: int


def _write_named(buf, arrays):
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"name too long: {name}")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        nd.write_array(buf, np.asarray(arrays[name], dtype=np.float64))


def _read_exact(buf, n, what):
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def _read_named(buf, what):
    (count,) = struct.unpack("<I", _read_exact(buf, 4, what))
    if count > 1_000_000:
        raise CheckpointError(f"implausible entry count in {what}: {count}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(buf, 2, what))
        name = _read_exact(buf, nlen, what).decode("utf-8")
        try:
            out[name] = nd.read_array(buf)
        except ValueError as e:
            raise CheckpointError(f"bad array for {name} in {what}: {e}") from None
    return out


def save_checkpoint(path, config_text, arrays, opt_step=0, opt_moments=None,
                    ema=None, step=0, seed=0):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cb = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cb)))
    buf.write(cb)
    _write_named(buf, arrays)
    if opt_moments:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", opt_step))
        _write_named(buf, {f"{k}.m": m for k, (m, v) in opt_moments.items()})
        _write_named(buf, {f"{k}.v": v for k, (m, v) in opt_moments.items()})
    else:
        buf.write(struct.pack("<B", 0))
    if ema:
        buf.write(struct.pack("<B", 1))
        _write_named(buf, ema)
    else:
        buf.write(struct.pack("<B", 0))
    buf.write(struct.pack("<Q", step))
    buf.write(struct.pack("<Q", seed))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    magic = _read_exact(buf, 8, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version > CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", _read_exact(buf, 4, "config length"))
    config_text = _read_exact(buf, clen, "config").decode("utf-8")
    arrays = _read_named(buf, "parameter table")
    (has_opt,) = struct.unpack("<B", _read_exact(buf, 1, "optimizer flag"))
    opt_step = 0
    opt_moments = {}
    if has_opt:
        (opt_step,) = struct.unpack("<Q", _read_exact(buf, 8, "optimizer step"))
        ms = _read_named(buf, "optimizer m table")
        vs = _read_named(buf, "optimizer v table")
        for k in ms:
            base = k[:-2]
            vkey = f"{base}.v"
            if vkey not in vs:
                raise CheckpointError(f"optimizer state missing {vkey}")
            opt_moments[base] = (ms[k], vs[vkey])
    (has_ema,) = struct.unpack("<B", _read_exact(buf, 1, "ema flag"))
    ema = _read_named(buf, "ema table") if has_ema else {}
    step_b = buf.read(8)
    seed_b = buf.read(8)
    if len(step_b) != 8 or len(seed_b) != 8:
        raise CheckpointError("truncated checkpoint while reading step/seed")
    (step,) = struct.unpack("<Q", step_b)
    (seed,) = struct.unpack("<Q", seed_b)
    return Checkpoint(version=version, config_text=config_text, arrays=arrays,
                      opt_step=opt_step, opt_moments=opt_moments, ema=ema,
                      step=step, seed=seed)
