"""Command-line surface: make-data, train, evaluate, rollout, sample,
verify.

Config flows defaults -> preset -> config file -> --section.key=value
overrides -> STFLOW_SEED. Exit codes: 0 success, 1 runtime failure,
2 usage or config error.
"""

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import ndtensor as nd
from .config import (ConfigError, RunConfig, apply_overrides, apply_preset,
                     parse_config, serialize_config)
from .data import (load_grid, normalize, normalize_fit, save_grid,
                   split_temporal, synth_advection, synth_stochastic, write_pgm)
from .metrics import RolloutReport, persistence_baseline, report_to_csv, rollout_report
from .model import CheckpointError, STFlow, load_checkpoint
from .train import train_loop
from .verify import run_verify

log = logging.getLogger(__name__)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser, subs = _build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = []
    for item in extra:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            overrides.append(item[2:])
        else:
            parser.error(f"unrecognized argument: {item}")
    try:
        return args.func(args, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, nd.NumericsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="stflow",
        description="Conditional multi-scale flow forecasting for grid "
                    "sequences. Unlisted --section.key=value flags override "
                    "config keys.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("make-data", help="generate a synthetic STGRID dataset")
    p.add_argument("--kind", choices=("advection", "stochastic"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--velocity", default="1,1", help="vx,vy pixels per step")
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = subs.add_parser("train", help="train a model from a config")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", help="named preset applied before the config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="do not echo log lines")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("evaluate", help="score a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="STGRID path (default: the training dataset)")
    p.add_argument("--outdir", help="where CSVs go (default: checkpoint config)")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("rollout", help="autoregressive forecast from a context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="STGRID path providing the context")
    p.add_argument("--start", type=int, default=0, help="context start frame")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_rollout)

    p = subs.add_parser("sample", help="draw next-frame samples from a context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("verify", help="run the invariant checks")
    p.add_argument("--corrupt-inverse", action="store_true",
                   help="negative control: break one inverse on purpose")
    p.set_defaults(func=cmd_verify)
    return parser, subs


def _env_seed(cfg):
    env = os.environ.get("STFLOW_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"STFLOW_SEED must be an integer, got {env!r}")
    return cfg


def cmd_make_data(args, overrides):
    if overrides:
        raise ConfigError(f"make-data takes no config overrides: {overrides}")
    seed = args.seed
    env = os.environ.get("STFLOW_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"STFLOW_SEED must be an integer, got {env!r}")
    if args.kind == "advection":
        parts = args.velocity.split(",")
        if len(parts) != 2:
            raise ConfigError(f"velocity must be vx,vy, got {args.velocity!r}")
        velocity = (float(parts[0]), float(parts[1]))
        seq = synth_advection(args.height, args.width, args.frames,
                              velocity=velocity, seed=seed, blobs=args.blobs)[0]
    else:
        seq = synth_stochastic(args.height, args.width, args.frames,
                               noise_scale=args.noise_scale, seed=seed,
                               blobs=args.blobs)[0]
    save_grid(args.out, seq)
    t, c, h, w = seq.frames.shape
    print(f"wrote {args.out}: T={t} C={c} H={h} W={w} "
          f"range [{seq.frames.min():.6g}, {seq.frames.max():.6g}]")
    return 0


def cmd_train(args, overrides):
    cfg = RunConfig()
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = parse_config(ck.config_text)
    if args.preset:
        apply_preset(cfg, args.preset)
    if args.config:
        with open(args.config) as f:
            cfg = parse_config(f.read(), base=cfg)
    apply_overrides(cfg, overrides)
    _env_seed(cfg)
    if not cfg.data_path:
        raise ConfigError("data.path is required (generate one with make-data)")
    cfg.model.validate()
    echo = None if args.quiet else print
    res = train_loop(cfg, resume_path=args.resume, echo=echo)
    print(f"trained {res.steps_run} steps; val bpd "
          f"{res.initial_val_bpd:.4f} -> {res.final_val_bpd:.4f}; "
          f"checkpoint {res.checkpoint_path}")
    return 0


def _load_model(ckpt_path, overrides, use_ema=True):
    ck = load_checkpoint(ckpt_path)
    cfg = parse_config(ck.config_text)
    apply_overrides(cfg, overrides)
    _env_seed(cfg)
    model = STFlow(cfg.model, seed=cfg.seed)
    model.load_state_arrays(ck.arrays)
    if use_ema and ck.ema:
        params = model.named_params()
        for name, value in ck.ema.items():
            if name in params:
                params[name].data[...] = value
    return cfg, model, ck


def _normalized_frames(cfg, data_path):
    seq = load_grid(data_path)
    if math.isnan(cfg.min_z) or math.isnan(cfg.max_z):
        log.warning("checkpoint carries no normalization range; refitting on "
                    "this dataset's training split")
        n_windows = seq.frames.shape[0] - cfg.context
        train_starts, _, _ = split_temporal(n_windows, cfg.fractions, cfg.seed)
        normalize_fit(seq, train_starts, cfg.context)
        cfg.min_z, cfg.max_z = seq.meta.min_z, seq.meta.max_z
    else:
        seq.meta.min_z, seq.meta.max_z = cfg.min_z, cfg.max_z
    return seq, normalize(seq.frames, seq.meta)


def cmd_evaluate(args, overrides):
    cfg, model, _ = _load_model(args.checkpoint, overrides)
    data_path = args.data or cfg.data_path
    if not data_path:
        raise ConfigError("no dataset: pass --data or set data.path")
    seq, frames = _normalized_frames(cfg, data_path)
    t_frames = frames.shape[0]
    ctx = cfg.context
    leads = sorted(set(cfg.leads))
    if not leads or leads[0] < 1:
        raise ConfigError("eval.leads must be positive integers")
    max_lead = leads[-1]
    n_windows = t_frames - ctx
    _, _, test_starts = split_temporal(n_windows, cfg.fractions, cfg.seed)
    usable = [s for s in test_starts if s + ctx + max_lead <= t_frames]
    if not usable:
        usable = [s for s in range(n_windows) if s + ctx + max_lead <= t_frames]
        if not usable:
            raise ValueError(f"no window leaves room for lead {max_lead}")
        log.warning("test split has no window with %d future frames; "
                    "evaluating on %d unsplit windows", max_lead, len(usable))
    usable = usable[:cfg.eval_windows]

    m = cfg.trajectories
    flow_acc = _MetricAccumulator(max_lead)
    pers_acc = _MetricAccumulator(max_lead)
    for s in usable:
        context = frames[s:s + ctx]
        targets = frames[s + ctx:s + ctx + max_lead]
        if cfg.oracle:
            rollouts = np.repeat(targets[None], m, axis=0)
        else:
            rollouts = model.rollout(context, max_lead, trajectories=m,
                                     temperature=cfg.temperature,
                                     rng=np.random.default_rng([cfg.seed, 2, int(s)]))
        flow_acc.add(rollout_report(rollouts, targets, seq.meta, ctx))
        pers = persistence_baseline(context, max_lead)
        pers_acc.add(rollout_report(pers[None], targets, seq.meta, ctx))

    flow_report = flow_acc.mean(ctx)
    pers_report = pers_acc.mean(ctx)
    outdir = args.outdir or cfg.outdir
    os.makedirs(outdir, exist_ok=True)
    flow_csv = os.path.join(outdir, "eval_flow.csv")
    pers_csv = os.path.join(outdir, "eval_persistence.csv")
    with open(flow_csv, "w") as f:
        f.write(report_to_csv(flow_report))
    with open(pers_csv, "w") as f:
        f.write(report_to_csv(pers_report))

    rng_txt = f"[{seq.meta.min_z:.6g}, {seq.meta.max_z:.6g}]"
    print(f"evaluated {len(usable)} windows, {m} trajectories, "
          f"temperature {cfg.temperature}")
    print(f"units {seq.meta.units}, normalization range {rng_txt}")
    print(f"context window {ctx}; leads beyond it extrapolate past the "
          f"training horizon")
    header = (f"{'lead':>4}  {'flow_rmse':>10}  {'pers_rmse':>10}  "
              f"{'flow_ssim':>9}  {'pers_ssim':>9}  {'flow_psnr':>9}  "
              f"{'pers_psnr':>9}  {'flow_std':>9}")
    print(header)
    for lead in leads:
        i = lead - 1
        print(f"{lead:>4}  {flow_report.rmse[i]:>10.6g}  {pers_report.rmse[i]:>10.6g}  "
              f"{flow_report.ssim[i]:>9.4g}  {pers_report.ssim[i]:>9.4g}  "
              f"{flow_report.psnr[i]:>9.4g}  {pers_report.psnr[i]:>9.4g}  "
              f"{flow_report.ens_std_mean[i]:>9.4g}")
    print(f"wrote {flow_csv} and {pers_csv}")
    return 0


class _MetricAccumulator:
    def __init__(self, steps):
        self.steps = steps
        self.reports = []

    def add(self, report):
        self.reports.append(report)

    def mean(self, context_len):
        def avg(attr):
            rows = np.array([getattr(r, attr) for r in self.reports])
            return list(rows.mean(axis=0))
        std_fields = np.mean([r.std_fields for r in self.reports], axis=0)
        return RolloutReport(rmse=avg("rmse"), ssim=avg("ssim"),
                             psnr=avg("psnr"), ens_std_mean=avg("ens_std_mean"),
                             std_fields=std_fields, context_len=context_len)


def cmd_rollout(args, overrides):
    cfg, model, _ = _load_model(args.checkpoint, overrides)
    data_path = args.data or cfg.data_path
    if not data_path:
        raise ConfigError("no dataset: pass --data or set data.path")
    seq, frames = _normalized_frames(cfg, data_path)
    ctx = cfg.context
    t_frames = frames.shape[0]
    if args.start < 0 or args.start + ctx > t_frames:
        raise ValueError(f"context start {args.start} leaves no {ctx} frames")
    steps = args.steps
    m = cfg.trajectories
    context = frames[args.start:args.start + ctx]
    rollouts = model.rollout(context, steps, trajectories=m,
                             temperature=cfg.temperature,
                             rng=np.random.default_rng([cfg.seed, 2, args.start]))
    outdir = args.outdir or os.path.join(cfg.outdir, "rollout")
    os.makedirs(outdir, exist_ok=True)
    lo, hi = seq.meta.min_z, seq.meta.max_z
    phys = rollouts * (hi - lo) + lo
    for k in range(m):
        traj_dir = os.path.join(outdir, f"traj{k:02d}")
        os.makedirs(traj_dir, exist_ok=True)
        for t in range(steps):
            write_pgm(os.path.join(traj_dir, f"step_{t + 1:03d}.pgm"),
                      phys[k, t, 0], lo, hi)
    std_dir = os.path.join(outdir, "std")
    os.makedirs(std_dir, exist_ok=True)
    std_fields = phys.std(axis=0)
    for t in range(steps):
        write_pgm(os.path.join(std_dir, f"step_{t + 1:03d}.pgm"),
                  std_fields[t, 0], 0.0, hi - lo)

    avail = t_frames - (args.start + ctx)
    scored = min(steps, avail)
    if scored < steps:
        log.warning("only %d future frames available; metrics truncated to "
                    "%d of %d leads", avail, scored, steps)
    if scored > 0:
        targets = frames[args.start + ctx:args.start + ctx + scored]
        report = rollout_report(rollouts[:, :scored], targets, seq.meta, ctx)
        csv_path = os.path.join(outdir, "rollout_metrics.csv")
        with open(csv_path, "w") as f:
            f.write(report_to_csv(report))
        print(f"wrote metrics for {scored} leads to {csv_path}")
    else:
        log.warning("no ground truth beyond the context; skipping metrics CSV")
    print(f"wrote {m} trajectories x {steps} steps (plus std fields) under {outdir}")
    return 0


def cmd_sample(args, overrides):
    cfg, model, _ = _load_model(args.checkpoint, overrides)
    data_path = args.data or cfg.data_path
    if not data_path:
        raise ConfigError("no dataset: pass --data or set data.path")
    seq, frames = _normalized_frames(cfg, data_path)
    ctx = cfg.context
    if args.start < 0 or args.start + ctx > frames.shape[0]:
        raise ValueError(f"context start {args.start} leaves no {ctx} frames")
    context = frames[args.start:args.start + ctx]
    rollouts = model.rollout(context, 1, trajectories=args.n,
                             temperature=cfg.temperature,
                             rng=np.random.default_rng([cfg.seed, 2, args.start]))
    outdir = args.outdir or os.path.join(cfg.outdir, "samples")
    os.makedirs(outdir, exist_ok=True)
    lo, hi = seq.meta.min_z, seq.meta.max_z
    for k in range(args.n):
        phys = rollouts[k, 0, 0] * (hi - lo) + lo
        write_pgm(os.path.join(outdir, f"sample_{k:02d}.pgm"), phys, lo, hi)
    print(f"wrote {args.n} next-frame samples (temperature {cfg.temperature}) "
          f"to {outdir}")
    return 0


def cmd_verify(args, overrides):
    if overrides:
        raise ConfigError(f"verify takes no config overrides: {overrides}")
    results = run_verify(corrupt_inverse=args.corrupt_inverse)
    failed = 0
    for r in results:
        print(r.line())
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
