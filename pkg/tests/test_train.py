import dataclasses

import numpy as np
import pytest

from flowcf.attention import init_gates
from flowcf.errors import FormatError, InvalidInputError, TrainingDivergedError
from flowcf.featext import crop_side, write_layers
from flowcf.traineval.synth import SynthConfig, synth_sequence
from flowcf.traineval.train import (TrainConfig, init_models, load_bundle, make_sample, sample_loss,
                                    save_bundle, to_tracker_models, train)

TINY = TrainConfig(epochs=1, steps_per_epoch=3, patch_side=24, T=3)


@pytest.fixture(scope="module")
def seq():
    frames, boxes = synth_sequence(SynthConfig(frames=20, height=100, width=100, target_w=16, target_h=16,
                                               motion="sinusoid", amplitude=6.0, period=20.0, seed=1))
    return frames, boxes


def test_sample_geometry(seq):
    frames, boxes = seq
    s = make_sample(frames, boxes, 5, TINY)
    assert len(s.history) == 3 and len(s.flows) == 3
    assert s.current.shape == (24, 24, 1) and s.flows[0].shape == (6, 6, 2)
    assert not s.flows[-1].any()
    # without jitter the desired peak sits at the true motion from box t-1 to box t
    cells_per_px = 24 / crop_side(boxes[4], TINY.padding) / TINY.cell
    dx = (boxes[5].center[0] - boxes[4].center[0]) * cells_per_px
    assert s.box_cells == pytest.approx(16 * cells_per_px)
    assert s.desired_center[1] == pytest.approx(3 + dx)


def test_sample_needs_history(seq):
    frames, boxes = seq
    with pytest.raises(InvalidInputError):
        make_sample(frames, boxes, 2, TINY)


def test_lr_zero_leaves_parameters_bit_identical(seq):
    cfg = dataclasses.replace(TINY, lr=0.0, steps_per_epoch=4)
    models = init_models(cfg)
    result = train([seq], cfg, models)
    for a, b in zip(models.arrays(), result.models.arrays()):
        assert np.array_equal(a, b)
    assert len(result.step_losses) == 4 and len(result.epoch_losses) == 1


def test_training_copies_initial_models(seq):
    models = init_models(TINY)
    before = [a.copy() for a in models.arrays()]
    result = train([seq], TINY, models)
    assert all(np.array_equal(a, b) for a, b in zip(before, models.arrays()))
    assert any(not np.array_equal(a, b) for a, b in zip(before, result.models.arrays()))


def test_overfit_fixed_batch_halves_loss(seq):
    cfg = TrainConfig(epochs=10, steps_per_epoch=20, patch_side=24, T=6, fixed_batch=True)
    result = train([seq], cfg)
    assert len(result.step_losses) == 200
    assert result.step_losses[-1] < 0.5 * result.step_losses[0]


def test_end_to_end_gradient_finite_differences(seq):
    frames, boxes = seq
    cfg = dataclasses.replace(TINY, T=3)
    rng = np.random.default_rng(5)
    sample = make_sample(frames, boxes, 8, cfg, rng)
    models = init_models(cfg)
    loss, grads = sample_loss(models, sample, cfg)
    arrays, garrays = models.arrays(), grads.arrays()
    sizes = np.array([a.size for a in arrays])
    eps = 1e-5
    worst = 0.0
    for _ in range(10):
        k = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        i = int(rng.integers(arrays[k].size))
        flat = arrays[k].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        lp = sample_loss(models, sample, cfg, grads=False)[0]
        flat[i] = old - eps
        lm = sample_loss(models, sample, cfg, grads=False)[0]
        flat[i] = old
        num = (lp - lm) / (2 * eps)
        ana = garrays[k].reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    assert worst < 1e-3


def test_divergence_reports_step(seq):
    models = init_models(TINY)
    models.gates.w1[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as exc:
        train([seq], TINY, models)
    assert exc.value.step == 0


def test_config_validation(seq):
    for kw in (dict(lr=-1.0), dict(momentum=1.0), dict(cell=5), dict(photometric=1.0), dict(T=0)):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kw)
    frames, boxes = seq
    with pytest.raises(InvalidInputError):
        train([(frames[:3], boxes[:3])], TINY)
    with pytest.raises(InvalidInputError):
        train([], TINY)


def _f32(models):
    for a in models.arrays():
        a[...] = a.astype(np.float32)
    return models


def test_bundle_round_trip(tmp_path):
    models = _f32(init_models(TrainConfig(T=6)))
    path = tmp_path / "m.fcf"
    save_bundle(models, path)
    back = load_bundle(path, T=6, pool=4)
    tm = to_tracker_models(models)
    for a, b in zip(tm.feature_net.arrays() + tm.embedding.arrays() + tm.gates.arrays(),
                    back.feature_net.arrays() + back.embedding.arrays() + back.gates.arrays()):
        assert np.array_equal(a, b)


def test_bundle_errors(tmp_path):
    models = _f32(init_models(TrainConfig(T=6)))
    path = tmp_path / "m.fcf"
    save_bundle(models, path)
    with pytest.raises(FormatError):
        load_bundle(path, T=4)
    short = tmp_path / "short.fcf"
    write_layers(models.embedding.layers, short)
    with pytest.raises(FormatError):
        load_bundle(short, T=6)


def test_bundle_without_feature_net(tmp_path):
    models = _f32(init_models(TrainConfig(T=3)))
    models.feature_net = None
    models.gates = init_gates(3)
    path = tmp_path / "m.fcf"
    save_bundle(models, path)
    back = load_bundle(path, T=3)
    assert back.feature_net is None and back.gates.T == 3


def test_wide_models_from_config():
    models = init_models(TrainConfig(model_size="wide"))
    assert models.feature_net.c_out == 96 and models.embedding.c_in == 96
    assert models.gates.w2.shape == (128, 128)
    with pytest.raises(InvalidInputError):
        TrainConfig(model_size="tiny")
