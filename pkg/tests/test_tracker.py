import dataclasses
import math

import numpy as np
import pytest

from flowcf.errors import InvalidInputError
from flowcf.featext import BoundingBox
from flowcf.tracker import (TrackerConfig, init_tracker, pnr, run_sequence, scale_select, track_frame,
                            update_decision)
from flowcf.traineval.synth import SynthConfig, synth_sequence

from oracles import pnr_direct

# small patches keep these tests in the seconds range
FAST = TrackerConfig(patch_side=64, flow_levels=2)


def _seq(**kw):
    base = dict(frames=20, height=120, width=120, target_w=24, target_h=24, seed=3)
    base.update(kw)
    return synth_sequence(SynthConfig(**base))


def _err(a, b):
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


# --- pnr -----------------------------------------------------------------------

def test_pnr_alternating_fixture():
    m = np.fromfunction(lambda r, c: np.where((r + c) % 2 == 0, 0.1, 0.2), (8, 8))
    m[4, 4] = 1.0
    # 39 side cells outside the 5x5 block: 19 at 0.1, 20 at 0.2
    mean = (19 * 0.1 + 20 * 0.2) / 39
    std = 0.1 * math.sqrt(19 * 20) / 39
    assert pnr(m) == pytest.approx((1.0 - mean) / (std + 1e-12), rel=1e-12)
    assert pnr(m) == pytest.approx(16.97994172666959, rel=1e-12)
    assert pnr(m) == pytest.approx(pnr_direct(m), rel=1e-12)


def test_pnr_delta_and_constant():
    d = np.zeros((16, 16))
    d[3, 5] = 1.0
    assert pnr(d) > 1e11
    assert pnr(np.full((6, 6), 0.7)) == 0.0


def test_pnr_small_map_uses_all_but_peak():
    m = np.array([[0.0, 1.0], [0.5, 0.25]])
    side = np.array([0.0, 0.5, 0.25])
    assert pnr(m) == pytest.approx((1.0 - side.mean()) / (side.std() + 1e-12))


@pytest.mark.parametrize("seed", range(5))
def test_pnr_matches_direct_oracle(seed):
    m = np.random.default_rng(seed).normal(size=(12, 10))
    assert pnr(m) == pytest.approx(pnr_direct(m), rel=1e-10)


# --- update decision -------------------------------------------------------------

def _state(**kw):
    frames, gt = _seq(frames=2)
    return init_tracker(frames[0], gt[0], dataclasses.replace(FAST, **kw))


def test_update_decision_scripted_trace():
    state = _state(warmup=1)
    script = [(1.0, 10.0), (0.7, 8.0), (0.5, 9.0), (0.9, 5.0), (0.6, 5.5), (0.0, 100.0), (0.47, 4.8)]
    # hand simulation: means after accepts are (1, 10), (0.85, 9), (0.7667, 7.8333)
    expected = [True, True, False, False, True, False, True]
    trace = [update_decision(state, p, q) for p, q in script]
    assert trace == expected
    assert state.n_accepted == 4
    assert state.mean_peak == pytest.approx((1.0 + 0.7 + 0.6 + 0.47) / 4)
    assert state.mean_pnr == pytest.approx((10 + 8 + 5.5 + 4.8) / 4)


def test_update_decision_zero_peak_rejected_even_in_warmup():
    state = _state()
    assert update_decision(state, 0.0, 50.0) is False
    assert update_decision(state, 0.3, 1.0) is True


def test_first_frame_on_static_scene_updates():
    frames, gt = _seq(frames=3)
    state = init_tracker(frames[0], gt[0], FAST)
    _, _, d = track_frame(state, frames[1])
    assert d.updated


# --- scale selection -------------------------------------------------------------

def test_identical_maps_pick_center():
    m = np.random.default_rng(0).random((6, 6))
    s, loc, val = scale_select([m] * 5, 0.9925)
    assert s == 2 and loc == np.unravel_index(np.argmax(m), m.shape) and val == m.max()


def test_constant_maps_tie_break():
    assert scale_select([np.full((4, 4), 0.3)] * 3, 0.9925)[:2] == (1, (0, 0))
    assert scale_select([np.full((4, 4), 0.3)] * 3, 1.0)[:2] == (1, (0, 0))


def test_penalty_threshold_fixture():
    base = np.zeros((5, 5))
    base[2, 2] = 1.0
    up = np.zeros((5, 5))
    up[1, 3] = 1.0 / 0.9925 * 1.001
    maps = [base, base, base, up, base]
    assert scale_select(maps, 0.9925)[:2] == (3, (1, 3))
    up[1, 3] = 1.0 / 0.9925 * 0.999
    assert scale_select(maps, 0.9925)[:2] == (2, (2, 2))


def test_scale_select_invariant_to_positive_scaling():
    rng = np.random.default_rng(1)
    maps = [rng.random((6, 6)) for _ in range(5)]
    a = scale_select(maps, 0.9925)
    for k in (1e-3, 2.5, 1e4):
        b = scale_select([k * m for m in maps], 0.9925)
        assert b[:2] == a[:2]


def test_even_scale_count_rejected():
    with pytest.raises(InvalidInputError):
        scale_select([np.zeros((3, 3))] * 4, 0.99)
    with pytest.raises(InvalidInputError):
        TrackerConfig(n_scales=4)


# --- tracking loop ---------------------------------------------------------------

def test_identical_frame_returns_initial_box():
    frames, gt = _seq(frames=2)
    state = init_tracker(frames[0], gt[0], FAST)
    _, box, _ = track_frame(state, frames[0])
    assert _err(box, gt[0]) <= 0.5
    assert box.w == pytest.approx(gt[0].w) and box.h == pytest.approx(gt[0].h)


def test_constant_image_init_succeeds():
    state = init_tracker(np.full((50, 50, 1), 0.4), BoundingBox(10, 10, 20, 20), FAST)
    assert np.all(np.isfinite(state.bank.num)) and np.all(np.isfinite(state.bank.den))


def test_degenerate_and_outside_boxes_rejected():
    img = np.zeros((40, 40, 1))
    with pytest.raises(InvalidInputError):
        init_tracker(img, BoundingBox(50, 50, 5, 5), FAST)
    with pytest.raises(InvalidInputError):
        BoundingBox(1, 1, -2, 5)


def test_frame_size_mismatch():
    frames, gt = _seq(frames=2)
    state = init_tracker(frames[0], gt[0], FAST)
    with pytest.raises(InvalidInputError):
        track_frame(state, np.zeros((60, 60, 1)))


def test_no_flow_init_matches_pure_dcf_state():
    frames, gt = _seq(frames=2)
    a = init_tracker(frames[0], gt[0], FAST)
    b = init_tracker(frames[0], gt[0], dataclasses.replace(FAST, variant="no_flow"))
    assert np.array_equal(a.bank.num, b.bank.num) and np.array_equal(a.bank.den, b.bank.den)
    assert a.box == b.box and len(a.buffer) == len(b.buffer) == 1


def test_single_frame_buffer_equals_no_flow_path():
    frames, gt = _seq(frames=8, motion="translate", dx=1.5)
    full = run_sequence(frames, gt[0], dataclasses.replace(FAST, T=1))[0]
    plain = run_sequence(frames, gt[0], dataclasses.replace(FAST, variant="no_flow"))[0]
    assert full == plain


def test_static_sequence_no_drift():
    frames, gt = _seq(frames=50, noise=0.01)
    boxes, _ = run_sequence(frames, gt[0], FAST)
    assert max(_err(b, g) for b, g in zip(boxes, gt)) <= 0.5


def test_translation_tracked():
    frames, gt = _seq(frames=30, motion="translate", dx=2.0, width=160, start_x=20.0)
    boxes, _ = run_sequence(frames, gt[0], FAST)
    assert np.mean([_err(b, g) for b, g in zip(boxes, gt)]) <= 2.0


def test_determinism():
    frames, gt = _seq(frames=10, motion="sinusoid", amplitude=8.0, period=20.0)
    a, da = run_sequence(frames, gt[0], FAST)
    b, db = run_sequence(frames, gt[0], FAST)
    assert a == b and [d.peak for d in da] == [d.peak for d in db]


@pytest.mark.parametrize("variant", ["full", "decay", "no_ta", "no_flow"])
def test_no_update_safety(variant):
    frames, gt = _seq(frames=8, motion="translate", dx=1.0)
    state = init_tracker(frames[0], gt[0], dataclasses.replace(FAST, variant=variant))
    state.frozen = True
    num, den = state.bank.num.copy(), state.bank.den.copy()
    for f in frames[1:]:
        state, _, d = track_frame(state, f)
        assert not d.updated
    assert np.array_equal(state.bank.num, num) and np.array_equal(state.bank.den, den)


def test_boxes_stay_valid_when_target_leaves():
    frames, gt = _seq(frames=25, motion="translate", dx=5.0, start_x=70.0)
    boxes, diags = run_sequence(frames, gt[0], FAST)
    for b in boxes:
        cx, cy = b.center
        assert b.w > 0 and b.h > 0 and 0 <= cx < 120 and 0 <= cy < 120
    assert all(np.isfinite(d.peak) and np.isfinite(d.pnr) for d in diags)


def test_diagnostics_weights():
    frames, gt = _seq(frames=10, motion="translate", dx=1.0)
    _, diags = run_sequence(frames, gt[0], FAST)
    updated = [d for d in diags if d.updated]
    assert updated
    for d in updated:
        assert len(d.gates) == len(d.frame_weights) >= 1
        assert all(0 < g < 1 for g in d.gates)


def test_flow_disabled_and_solve_mode_run():
    frames, gt = _seq(frames=6, motion="translate", dx=1.0)
    for kw in (dict(flow="disabled"), dict(aggregate_into="solve"), dict(features="convnet")):
        boxes, _ = run_sequence(frames, gt[0], dataclasses.replace(FAST, **kw))
        assert len(boxes) == 6


def test_config_validation():
    for kw in (dict(update_rate=0.0), dict(scale_step=1.0), dict(variant="bogus"), dict(cell=5),
               dict(warmup=0), dict(flow="magic")):
        with pytest.raises(InvalidInputError):
            TrackerConfig(**kw)


def test_model_sizes():
    from flowcf.tracker import default_models
    desk = default_models(dataclasses.replace(FAST, features="convnet"), 9)
    wide = default_models(dataclasses.replace(FAST, features="convnet", model_size="wide"), 9)
    assert desk.feature_net.c_out == 8 and wide.feature_net.c_out == 96
    assert wide.embedding.layers[-1].kernel.shape[-1] == 256 and wide.gates.w1.shape == (128, 6)
    with pytest.raises(InvalidInputError):
        TrackerConfig(model_size="huge")
