"""Metric identities and hand values, persistence behavior on the synthetic
generators, and rollout report shape/CSV contracts."""

import math

import numpy as np
import pytest

from stflow.data import GridMeta, synth_advection
from stflow.metrics import (RolloutReport, persistence_baseline, psnr,
                            report_to_csv, rmse, rollout_report, ssim)


# --- rmse -------------------------------------------------------------------

def test_rmse_zero_iff_equal():
    x = np.random.default_rng(0).normal(size=(4, 4))
    assert rmse(x, x) == 0.0
    assert rmse(x, x + 1e-3) > 0.0


def test_rmse_constant_offset():
    x = np.random.default_rng(1).normal(size=(5, 5))
    assert abs(rmse(x + 2.0, x) - 2.0) < 1e-12


def test_rmse_hand_value():
    assert abs(rmse([0.0, 0.0], [3.0, 4.0]) - math.sqrt(12.5)) < 1e-12


def test_rmse_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    assert rmse(a, b) == rmse(b, a)


def test_rmse_triangle_inequality():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b, c = rng.normal(size=(3, 2, 2, 2))
        assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12


def test_rmse_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))


# --- psnr -------------------------------------------------------------------

def test_psnr_twenty_db():
    # mse 0.01 against range 1
    pred = np.zeros(100)
    target = np.full(100, 0.1)
    assert abs(psnr(pred, target, 1.0) - 20.0) < 1e-12


def test_psnr_perfect_is_infinite():
    x = np.ones((3, 3))
    assert psnr(x, x, 1.0) == math.inf


def test_psnr_halving_mse_adds_three_db():
    target = np.zeros(4)
    a = psnr(np.full(4, 0.2), target, 1.0)
    b = psnr(np.full(4, 0.2 / math.sqrt(2.0)), target, 1.0)
    assert abs((b - a) - 10.0 * math.log10(2.0)) < 1e-9
    assert abs((b - a) - 3.0103) < 1e-4


def test_psnr_decreases_as_rmse_grows():
    target = np.zeros(8)
    values = [psnr(np.full(8, eps), target, 1.0) for eps in (0.01, 0.1, 0.5)]
    assert values[0] > values[1] > values[2]


def test_psnr_requires_positive_range():
    with pytest.raises(ValueError):
        psnr(np.zeros(2), np.zeros(2), 0.0)


# --- ssim -------------------------------------------------------------------

def test_ssim_identity():
    x = np.random.default_rng(4).normal(size=(10, 10))
    assert ssim(x, x, data_range=float(x.max() - x.min())) == 1.0


def test_ssim_symmetric():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(9, 9)), rng.uniform(size=(9, 9))
    assert abs(ssim(a, b, 1.0) - ssim(b, a, 1.0)) < 1e-15


def test_ssim_equal_constants():
    a = np.full((8, 8), 0.4)
    assert ssim(a, a.copy(), 1.0) == 1.0


def test_ssim_inverted_image_below_one():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(12, 12))
    assert ssim(1.0 - x, x, 1.0) < 1.0


def test_ssim_degrades_with_noise():
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(16, 16))
    small = ssim(x + rng.normal(scale=0.01, size=x.shape), x, 1.0)
    large = ssim(x + rng.normal(scale=0.3, size=x.shape), x, 1.0)
    assert large < small < 1.0


def test_ssim_channel_input():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(2, 8, 8))
    assert ssim(x, x, 1.0) == 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)), 1.0)


def test_ssim_bounded():
    rng = np.random.default_rng(9)
    for _ in range(5):
        a, b = rng.uniform(size=(2, 9, 9))
        v = ssim(a, b, 1.0)
        assert -1.0 <= v <= 1.0


# --- persistence baseline ------------------------------------------------------

def test_persistence_shape():
    context = np.random.default_rng(10).normal(size=(3, 2, 4, 4))
    out = persistence_baseline(context, steps=5)
    assert out.shape == (5, 2, 4, 4)
    for t in range(5):
        assert np.array_equal(out[t], context[-1])


def test_persistence_on_static_field_is_exact():
    (seq,) = synth_advection(8, 8, 6, velocity=(0, 0), seed=11)
    pred = persistence_baseline(seq.frames[:2], steps=4)
    for t in range(4):
        assert rmse(pred[t], seq.frames[2 + t]) == 0.0


def test_persistence_error_grows_with_lead():
    # moving field: the stale frame drifts further from truth each step
    (seq,) = synth_advection(16, 16, 10, velocity=(1, 1), seed=12)
    pred = persistence_baseline(seq.frames[:2], steps=6)
    errs = [rmse(pred[t], seq.frames[2 + t]) for t in range(6)]
    assert all(b > a for a, b in zip(errs, errs[1:]))


def test_persistence_validation():
    with pytest.raises(ValueError):
        persistence_baseline(np.zeros((0, 1, 4, 4)), 3)
    with pytest.raises(ValueError):
        persistence_baseline(np.zeros((2, 1, 4, 4)), 0)


# --- rollout report ---------------------------------------------------------------

def unit_meta():
    return GridMeta(min_z=0.0, max_z=1.0)


def test_report_perfect_prediction():
    rng = np.random.default_rng(13)
    targets = rng.uniform(size=(3, 1, 8, 8))
    rollouts = np.repeat(targets[None], 4, axis=0)
    rep = rollout_report(rollouts, targets, unit_meta())
    assert rep.rmse == [0.0, 0.0, 0.0]
    assert rep.ssim == [1.0, 1.0, 1.0]
    assert all(p == math.inf for p in rep.psnr)
    assert rep.ens_std_mean == [0.0, 0.0, 0.0]
    assert np.all(rep.std_fields == 0.0)


def test_report_lengths_match_steps():
    rng = np.random.default_rng(14)
    targets = rng.uniform(size=(5, 1, 8, 8))
    rollouts = rng.uniform(size=(2, 5, 1, 8, 8))
    rep = rollout_report(rollouts, targets, unit_meta(), context_len=2)
    assert rep.steps() == 5
    assert len(rep.ssim) == len(rep.psnr) == len(rep.ens_std_mean) == 5
    assert rep.std_fields.shape == (5, 1, 8, 8)
    assert rep.context_len == 2


def test_report_spread_positive_for_distinct_trajectories():
    rng = np.random.default_rng(15)
    targets = rng.uniform(size=(2, 1, 8, 8))
    rollouts = rng.uniform(size=(4, 2, 1, 8, 8))
    rep = rollout_report(rollouts, targets, unit_meta())
    assert all(e > 0 for e in rep.ens_std_mean)


def test_report_metrics_in_physical_units():
    meta = GridMeta(min_z=250.0, max_z=300.0)
    targets = np.zeros((1, 1, 8, 8))
    rollouts = np.full((1, 1, 1, 8, 8), 0.1)  # 5 physical units high
    rep = rollout_report(rollouts, targets, meta)
    assert abs(rep.rmse[0] - 5.0) < 1e-9


def test_report_length_mismatch_rejected():
    with pytest.raises(ValueError, match="length mismatch"):
        rollout_report(np.zeros((1, 3, 1, 8, 8)), np.zeros((2, 1, 8, 8)),
                       unit_meta())


def test_report_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        rollout_report(np.zeros((1, 2, 1, 8, 8)), np.zeros((2, 1, 4, 4)),
                       unit_meta())


# --- CSV ---------------------------------------------------------------------------

def test_csv_layout():
    rep = RolloutReport(rmse=[1.5, 2.0], ssim=[0.9, 0.8],
                        psnr=[20.0, math.inf], ens_std_mean=[0.1, 0.2],
                        std_fields=np.zeros((2, 1, 4, 4)), context_len=2)
    text = report_to_csv(rep)
    lines = text.strip().split("\n")
    assert lines[0] == "step,rmse,ssim,psnr,ens_std_mean"
    assert lines[1] == "1,1.5,0.9,20.0,0.1"
    assert lines[2].startswith("2,2.0,0.8,inf,")
    assert len(lines) == 3


def test_csv_round_trips_float_precision():
    value = 0.1234567890123456789
    rep = RolloutReport(rmse=[value], ssim=[0.0], psnr=[0.0],
                        ens_std_mean=[0.0],
                        std_fields=np.zeros((1, 1, 4, 4)), context_len=2)
    text = report_to_csv(rep)
    parsed = float(text.strip().split("\n")[1].split(",")[1])
    assert parsed == float(value)
