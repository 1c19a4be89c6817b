"""Forecast evaluation: RMSE, PSNR, SSIM, per-lead rollout curves with
ensemble spread, and the persistence baseline.

All point metrics expect denormalized (physical-unit) fields so desk-scale
numbers share units with full-scale reports. CSV columns are
step, rmse, ssim, psnr, ens_std_mean, one row per lead time.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import denormalize


def _check_same_shape(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def rmse(pred, target):
    pred, target = _check_same_shape(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def psnr(pred, target, data_range):
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    pred, target = _check_same_shape(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def ssim(pred, target, data_range, window=7, k1=0.01, k2=0.03):
    """Mean structural similarity over uniform square windows.

    Accepts (H, W) or (C, H, W); channels are averaged. Uses the unbiased
    (n-1) variance convention inside each window.
    """
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    pred, target = _check_same_shape(pred, target)
    if pred.ndim == 2:
        pred = pred[None]
        target = target[None]
    if pred.ndim != 3:
        raise ValueError("ssim expects (H, W) or (C, H, W)")
    h, w = pred.shape[1:]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    cov_norm = n / (n - 1.0)
    vals = []
    for ch in range(pred.shape[0]):
        x = np.lib.stride_tricks.sliding_window_view(pred[ch], (window, window))
        y = np.lib.stride_tricks.sliding_window_view(target[ch], (window, window))
        ux = x.mean(axis=(-2, -1))
        uy = y.mean(axis=(-2, -1))
        uxx = (x * x).mean(axis=(-2, -1))
        uyy = (y * y).mean(axis=(-2, -1))
        uxy = (x * y).mean(axis=(-2, -1))
        vx = cov_norm * (uxx - ux * ux)
        vy = cov_norm * (uyy - uy * uy)
        vxy = cov_norm * (uxy - ux * uy)
        num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
        den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def persistence_baseline(context, steps):
    """Repeat the last context frame for every lead time."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 4 or context.shape[0] == 0:
        raise ValueError("context must be a non-empty (T, C, H, W) array")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.repeat(context[-1][None], steps, axis=0)


@dataclass
class RolloutReport:
    """Per-lead metric curves plus the per-pixel ensemble spread fields.

    context_len marks where training-horizon conditioning ends and
    extrapolation begins.
    """
    rmse: list
    ssim: list
    psnr: list
    ens_std_mean: list
    std_fields: np.ndarray  # (steps, C, H, W), physical units
    context_len: int

    def steps(self):
        return len(self.rmse)


def rollout_report(rollouts, targets, meta, context_len=2):
    """Score an ensemble rollout against ground truth.

    rollouts: (m, steps, C, H, W) normalized samples.
    targets: (steps, C, H, W) normalized ground truth.
    Point metrics use the ensemble mean; the spread is the per-pixel std
    across trajectories, all in physical units.
    """
    rollouts = np.asarray(rollouts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if rollouts.ndim != 5 or targets.ndim != 4:
        raise ValueError("rollouts must be (m, steps, C, H, W) and targets "
                         "(steps, C, H, W)")
    if rollouts.shape[1] != targets.shape[0]:
        raise ValueError(f"length mismatch: {rollouts.shape[1]} rollout steps "
                         f"vs {targets.shape[0]} target frames")
    if rollouts.shape[2:] != targets.shape[1:]:
        raise ValueError("field shape mismatch between rollouts and targets")
    data_range = meta.max_z - meta.min_z
    phys_roll = denormalize(rollouts, meta)
    phys_tgt = denormalize(targets, meta)
    point = phys_roll.mean(axis=0)
    spread = phys_roll.std(axis=0)
    r, s, p, e = [], [], [], []
    for t in range(targets.shape[0]):
        r.append(rmse(point[t], phys_tgt[t]))
        s.append(ssim(point[t], phys_tgt[t], data_range))
        p.append(psnr(point[t], phys_tgt[t], data_range))
        e.append(float(spread[t].mean()))
    return RolloutReport(rmse=r, ssim=s, psnr=p, ens_std_mean=e,
                         std_fields=spread, context_len=context_len)


def _fmt(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def report_to_csv(report):
    lines = ["step,rmse,ssim,psnr,ens_std_mean"]
    for i in range(report.steps()):
        lines.append(",".join([str(i + 1), _fmt(report.rmse[i]),
                               _fmt(report.ssim[i]), _fmt(report.psnr[i]),
                               _fmt(report.ens_std_mean[i])]))
    return "\n".join(lines) + "\n"
