"""Training loop: seeded batching, per-step logging in nats and bits per
dim, periodic EMA validation, and resumable checkpoints.

Determinism contract: every random draw at step t comes from a generator
keyed by (seed, stream, t), so a resumed run replays the exact batch and
update sequence of an uninterrupted one, and logs contain no wall-clock
state. Log lines:

    step=N lr=R nll=X bpd=Y      (training, after update N)
    step=N val_bpd=Z             (validation, EMA parameters)

The lr column reports the rate in effect after N completed updates.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .config import ConfigError, serialize_config
from .data import load_grid, make_windows, normalize, normalize_fit, split_temporal
from .model import LN2, STFlow, load_checkpoint, save_checkpoint
from .optim import Adam, swap_params


@dataclass
class TrainResult:
    steps_run: int
    initial_val_bpd: float
    final_val_bpd: float
    log_path: str
    checkpoint_path: str


def _batch_tensors(frames, starts, context):
    ctx = np.stack([frames[s:s + context] for s in starts])  # (B, ctx, C, H, W)
    tgt = np.stack([frames[s + context] for s in starts])
    return [nd.Tensor(ctx[:, j]) for j in range(context)], nd.Tensor(tgt)


def _val_bpd(model, params, ema, frames, starts, context, batch, dims):
    """Mean validation bpd under the EMA parameters (live parameters when
    ema is None); deterministic."""
    if len(starts) == 0:
        return math.nan
    if ema is None:
        ema = {k: p.data for k, p in params.items()}
    total = 0.0
    count = 0
    with swap_params(params, ema):
        with nd.no_grad():
            for i in range(0, len(starts), batch):
                chunk = starts[i:i + batch]
                ctx_frames, target = _batch_tensors(frames, chunk, context)
                mem = model.encode_context(ctx_frames)
                nll, _ = model.forward_nll(target, mem)
                total += float(nll.data.sum())
                count += len(chunk)
    return total / count / (dims * LN2)


def train_loop(cfg, resume_path=None, echo=print):
    """Run (or resume) training per the config; returns a TrainResult."""
    seq = load_grid(cfg.data_path)
    t_frames, c, h, w = seq.frames.shape
    mc = cfg.model
    if (c, h, w) != (mc.in_channels, mc.height, mc.width):
        raise ConfigError(
            f"dataset is {c}x{h}x{w} but the model config expects "
            f"{mc.in_channels}x{mc.height}x{mc.width}")
    n_windows = t_frames - cfg.context
    if n_windows < 1:
        raise ValueError("dataset too short for the context window")
    train_starts, val_starts, _ = split_temporal(n_windows, cfg.fractions, cfg.seed)

    resume = None
    if resume_path is not None:
        resume = load_checkpoint(resume_path)

    if math.isnan(cfg.min_z) or math.isnan(cfg.max_z):
        normalize_fit(seq, train_starts, cfg.context)
        cfg.min_z, cfg.max_z = seq.meta.min_z, seq.meta.max_z
    else:
        seq.meta.min_z, seq.meta.max_z = cfg.min_z, cfg.max_z
    frames = normalize(seq.frames, seq.meta)

    model = STFlow(mc, seed=cfg.seed)
    params = model.named_params()
    start_step = 0
    if resume is not None:
        model.load_state_arrays(resume.arrays)
        start_step = resume.step

    def actnorm_init_pass():
        # data-dependent scale/shift init on one seeded batch; runs before
        # the EMA shadow snapshots the parameters
        rng = np.random.default_rng([cfg.seed, 3])
        starts = rng.choice(train_starts, size=min(cfg.batch, len(train_starts)),
                            replace=True)
        ctx_frames, target = _batch_tensors(frames, starts, cfg.context)
        with nd.no_grad():
            mem = model.encode_context(ctx_frames)
            model.forward_nll(target, mem, init_actnorm=True)

    if cfg.steps > 0:
        total_steps = cfg.steps
    else:
        total_steps = cfg.epochs * max(1, math.ceil(len(train_starts) / cfg.batch))
    if total_steps <= start_step and resume is not None:
        raise ValueError(f"checkpoint is already at step {start_step} of {total_steps}")

    os.makedirs(cfg.outdir, exist_ok=True)
    config_text = serialize_config(cfg)
    with open(os.path.join(cfg.outdir, "config.txt"), "w") as f:
        f.write(config_text)
    log_path = os.path.join(cfg.outdir, "train.log")
    dims = model.nll_dims()
    val_cap = val_starts[:cfg.val_windows]

    final_ckpt = os.path.join(cfg.outdir, "ckpt_final.stflowck")
    with open(log_path, "a") as logf:
        def emit(line):
            logf.write(line + "\n")
            if echo is not None:
                echo(line)

        emit(f"# run start_step={start_step} total_steps={total_steps} "
             f"seed={cfg.seed} params={model.param_count()}")
        if resume is None:
            # baseline before any data-driven parameter mutation
            initial_val = _val_bpd(model, params, None, frames, val_cap,
                                   cfg.context, cfg.batch, dims)
            if mc.actnorm:
                actnorm_init_pass()
            opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                       ema_decay=cfg.ema_decay, lr_decay=cfg.lr_decay,
                       lr_decay_every=cfg.lr_decay_every, grad_clip=cfg.grad_clip)
        else:
            opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                       ema_decay=cfg.ema_decay, lr_decay=cfg.lr_decay,
                       lr_decay_every=cfg.lr_decay_every, grad_clip=cfg.grad_clip)
            opt.load_state(resume.opt_step, resume.opt_moments, resume.ema)
            initial_val = _val_bpd(model, params, opt.ema, frames, val_cap,
                                   cfg.context, cfg.batch, dims)
        emit(f"step={start_step} val_bpd={initial_val!r}")

        def checkpoint_to(path, step):
            save_checkpoint(path, config_text, model.state_arrays(),
                            opt_step=opt.step_count,
                            opt_moments={k: (opt.m[k], opt.v[k]) for k in params},
                            ema=opt.ema, step=step, seed=cfg.seed)

        for t in range(start_step, total_steps):
            rng = np.random.default_rng([cfg.seed, 1, t])
            starts = rng.choice(train_starts, size=cfg.batch, replace=True)
            ctx_frames, target = _batch_tensors(frames, starts, cfg.context)
            mem = model.encode_context(ctx_frames)
            opt.zero_grad()
            nll, _ = model.forward_nll(target, mem)
            loss = nd.tmean(nll)
            nd.backward(loss)
            opt.step()
            step = t + 1
            mean_nats = float(loss.data)
            emit(f"step={step} lr={opt.lr_at(step)!r} nll={mean_nats!r} "
                 f"bpd={mean_nats / (dims * LN2)!r}")
            if cfg.val_every > 0 and (step % cfg.val_every == 0 or step == total_steps):
                vb = _val_bpd(model, params, opt.ema, frames, val_cap,
                              cfg.context, cfg.batch, dims)
                emit(f"step={step} val_bpd={vb!r}")
            if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0 \
                    and step != total_steps:
                checkpoint_to(os.path.join(cfg.outdir,
                                           f"ckpt_{step:07d}.stflowck"), step)
        checkpoint_to(final_ckpt, total_steps)
        final_val = _val_bpd(model, params, opt.ema, frames, val_cap,
                             cfg.context, cfg.batch, dims)
        emit(f"# run end step={total_steps} val_bpd={final_val!r}")

    return TrainResult(steps_run=total_steps - start_step,
                       initial_val_bpd=initial_val, final_val_bpd=final_val,
                       log_path=log_path, checkpoint_path=final_ckpt)
