from pathlib import Path
import sys
# Make package importable when tests run from project root:
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest
import torch

from progress.errors import SizeError
from fpm_singleshot.diffcore import check_gradient
from fpm_singleshot.helpers import make_rng
from fpm_singleshot.joint import (
    TrainSettings,
    TrainingExample,
    compare_patterns,
    evaluate,
    finetune,
    init_pattern,
    measured_image,
    noise_robustness,
    predict_single_shot,
    train_joint,
    training_objective,
)
from fpm_singleshot.network import CnnModel, CnnSpec
from fpm_singleshot.noise import NoiseDraws, NoiseModel, simulate_measurement
from fpm_singleshot.optics import ComplexField, OpticsConfig, pattern_image, select_centermost
from fpm_singleshot.phantom import PhantomSpec, generate_phantom, render_training_set

SMALL_CNN = CnnSpec(channels=4, blocks=1)
TOY_CNN = CnnSpec(channels=16, blocks=2)


def random_field(seed, shape=(8, 8)):
    rng = make_rng(seed)
    return ComplexField(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), 0.1625)


def dataset(cfg, count, seed=0, full_scale_counts=2.0):
    leds = select_centermost(cfg, cfg.num_leds)
    phantoms = [generate_phantom(PhantomSpec.for_optics(cfg, kind="blobs", seed=seed + k)) for k in range(count)]
    return render_training_set(phantoms, cfg, leds, noise=None, full_scale_counts=full_scale_counts)


@pytest.fixture(scope="module")
def small_cfg():
    return OpticsConfig(image_size=(8, 8), num_leds=5)


@pytest.fixture(scope="module")
def small_set(small_cfg):
    return dataset(small_cfg, 6, full_scale_counts=1000.0)


# ---------------------------------------------------------------------------
# Objective and pattern
# ---------------------------------------------------------------------------

def test_objective_of_identical_fields_is_zero():
    field = random_field(0)
    assert training_objective(field, field) == 0.0


def test_objective_of_constant_offset():
    field = random_field(1)
    c = 0.3 - 0.4j
    shifted = ComplexField(field.values + c, field.pitch)
    assert training_objective(shifted, field) == pytest.approx(abs(c) ** 2, rel=1e-12)


def test_objective_matches_loop():
    p, t = random_field(2), random_field(3)
    d = p.values - t.values
    h, w = d.shape
    mse = sum(abs(d[i, j]) ** 2 for i in range(h) for j in range(w)) / (h * w)
    gy = sum(abs(d[i + 1, j] - d[i, j]) ** 2 for i in range(h - 1) for j in range(w)) / ((h - 1) * w)
    gx = sum(abs(d[i, j + 1] - d[i, j]) ** 2 for i in range(h) for j in range(w - 1)) / (h * (w - 1))
    assert training_objective(p, t, w_g=0.5) == pytest.approx(mse + 0.5 * (gy + gx), rel=1e-12)
    assert training_objective(p, t, w_g=0.0) == pytest.approx(mse, rel=1e-12)


def test_objective_shape_mismatch():
    with pytest.raises(SizeError):
        training_objective(random_field(4, (8, 8)), random_field(5, (8, 6)))


def test_init_pattern():
    pattern = init_pattern(3)
    assert len(pattern) == 69
    assert pattern.exposure_ms == 200.0
    assert np.all((pattern.weights >= 0) & (pattern.weights <= 1))
    assert np.array_equal(pattern.weights, init_pattern(3).weights)
    assert not np.array_equal(pattern.weights, init_pattern(4).weights)


def test_noise_robustness():
    clean = [random_field(k) for k in range(4)]
    noisy = [ComplexField(c.values + 0.1, c.pitch) for c in clean]
    assert noise_robustness(clean, noisy, clean) == 1.0
    far = [ComplexField(c.values + 1.0, c.pitch) for c in clean]
    assert noise_robustness(far, noisy, clean) == 0.0
    with pytest.raises(SizeError):
        noise_robustness(clean[:2], noisy, clean)


# ---------------------------------------------------------------------------
# Gradients through the whole training graph
# ---------------------------------------------------------------------------

def test_pattern_gradient_through_noise_and_cnn():
    rng = make_rng(6)
    stacks = torch.as_tensor(100.0 + 100.0 * rng.random((1, 5, 8, 8)))
    target = torch.as_tensor(rng.standard_normal((1, 16, 16)) + 1j * rng.standard_normal((1, 16, 16)))
    draws = NoiseDraws.sample(rng, (1, 8, 8))
    noise = NoiseModel()
    model = CnnModel(SMALL_CNN, seed=0)
    torch.manual_seed(0)
    with torch.no_grad():
        model.tail.weight.normal_(0.0, 0.1)
    epsilon = torch.tensor(0.5, dtype=torch.float64)
    divisor = torch.tensor(300.0, dtype=torch.float64)

    def loss(weights):
        images = pattern_image(stacks[0], weights, epsilon)[None]
        noisy = simulate_measurement(images, noise, draws)
        return training_objective(model.predict_field(noisy, divisor), target)

    weights = 0.2 + 0.6 * rng.random(5)
    assert check_gradient(loss, weights, floor=1e-4) < 1e-4


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def quick_settings(**kwargs):
    base = dict(epochs=3, batch_size=2, learning_rate=2e-3, pattern_learning_rate=1e-2, seed=0)
    base.update(kwargs)
    return TrainSettings(**base)


def test_train_joint_keeps_pattern_feasible(small_cfg, small_set):
    result = train_joint(small_set, small_cfg, NoiseModel(), quick_settings(), cnn=SMALL_CNN)
    history = result.history
    assert len(history.step_losses) == 9
    assert len(history.epoch_losses) == 3
    for w in history.weights_trace:
        assert np.all((w >= 0.0) & (w <= 1.0))
    assert all(0.0 <= e <= 2000.0 for e in history.exposure_trace)
    assert len(result.pattern) == 5
    assert result.model.image_shape == (8, 8)
    frame = history.to_frame()
    assert list(frame.columns) == ["step", "loss", "exposure_ms"]


def test_train_joint_is_reproducible(small_cfg, small_set):
    a = train_joint(small_set, small_cfg, NoiseModel(), quick_settings(), cnn=SMALL_CNN)
    b = train_joint(small_set, small_cfg, NoiseModel(), quick_settings(), cnn=SMALL_CNN)
    assert a.history.step_losses == b.history.step_losses
    assert np.array_equal(a.pattern.weights, b.pattern.weights)
    image = measured_image(small_set[0], a.pattern, None, make_rng(0))
    assert np.array_equal(predict_single_shot(image, a.model).values,
                          predict_single_shot(image, b.model).values)


def test_frozen_pattern_is_not_changed(small_cfg, small_set):
    pattern = init_pattern(7, 5)
    result = train_joint(small_set, small_cfg, NoiseModel(), quick_settings(train_pattern=False),
                         cnn=SMALL_CNN, pattern=pattern)
    assert np.array_equal(result.pattern.weights, pattern.weights)
    assert result.pattern.exposure_ms == pytest.approx(pattern.exposure_ms)


def test_train_joint_rejects_wrong_stack_length(small_set):
    cfg = OpticsConfig(image_size=(8, 8), num_leds=9)
    with pytest.raises(SizeError):
        train_joint(small_set, cfg, NoiseModel(), quick_settings(), cnn=SMALL_CNN)


def test_predict_single_shot_shape_and_determinism(small_cfg, small_set):
    result = train_joint(small_set, small_cfg, NoiseModel(), quick_settings(epochs=1), cnn=SMALL_CNN)
    image = measured_image(small_set[1], result.pattern, NoiseModel(), make_rng(1))
    first = predict_single_shot(image, result.model)
    assert first.shape == (16, 16)
    assert first.values.dtype == np.complex128
    assert first.pitch == pytest.approx(small_cfg.pixel_hi)
    assert np.array_equal(first.values, predict_single_shot(image, result.model).values)
    with pytest.raises(SizeError):
        predict_single_shot(np.stack([image, image]), result.model)
    with pytest.raises(SizeError):
        predict_single_shot(image[:4], result.model)


def measured_examples(examples, pattern, rng):
    return [TrainingExample(target=ex.target, image=measured_image(ex, pattern, NoiseModel(), rng))
            for ex in examples]


def test_finetune_changes_cnn_only(small_cfg, small_set):
    result = train_joint(small_set, small_cfg, NoiseModel(), quick_settings(), cnn=SMALL_CNN)
    pattern_before = result.pattern.weights.copy()
    exposure_before = result.pattern.exposure_ms
    original = {k: v.clone() for k, v in result.model.state_dict().items()}
    tuning = measured_examples(small_set, result.pattern, make_rng(11))
    held_out = measured_examples(dataset(small_cfg, 4, seed=50, full_scale_counts=1000.0),
                                 result.pattern, make_rng(12))

    before = evaluate(held_out, result.pattern, result.model, None, make_rng(0))
    after = []
    for seed in (0, 1, 2):
        tuned = finetune(tuning, result.pattern, result.model,
                         quick_settings(epochs=10, learning_rate=1e-3, seed=seed))
        assert any(not torch.equal(v, original[k]) for k, v in tuned.state_dict().items())
        after.append(evaluate(held_out, result.pattern, tuned, None, make_rng(0)))

    assert np.array_equal(result.pattern.weights, pattern_before)
    assert result.pattern.exposure_ms == exposure_before
    for k, v in result.model.state_dict().items():
        assert torch.equal(v, original[k])
    assert np.median(after) <= before


def test_finetune_needs_images(small_cfg, small_set):
    model = CnnModel(SMALL_CNN)
    with pytest.raises(SizeError):
        finetune(small_set, init_pattern(0, 5), model, quick_settings())


@pytest.fixture(scope="module")
def toy():
    cfg = OpticsConfig(image_size=(32, 32))
    return cfg, dataset(cfg, 20), dataset(cfg, 8, seed=100)


def toy_settings(**kwargs):
    base = dict(epochs=40, batch_size=4, learning_rate=2e-3, pattern_learning_rate=1e-2, seed=0)
    base.update(kwargs)
    return TrainSettings(**base)


@pytest.fixture(scope="module")
def toy_result(toy):
    cfg, train, _ = toy
    return train_joint(train, cfg, NoiseModel(), toy_settings(), cnn=TOY_CNN)


@pytest.mark.slow
def test_toy_training_halves_the_loss(toy_result):
    assert len(toy_result.history.step_losses) == 200
    assert toy_result.history.epoch_losses[-1] < 0.5 * toy_result.history.step_losses[0]


@pytest.mark.slow
def test_held_out_prediction_beats_half_the_zero_field(toy, toy_result):
    """
    On held-out examples the single-shot prediction scores below half the
    objective of predicting an all-zero field.
    """
    _, _, held_out = toy
    rng = make_rng(20)
    scores, baseline = [], []
    for ex in held_out:
        image = measured_image(ex, toy_result.pattern, NoiseModel(), rng)
        scores.append(training_objective(predict_single_shot(image, toy_result.model), ex.target))
        zero = ComplexField(np.zeros_like(ex.target.values), ex.target.pitch)
        baseline.append(training_objective(zero, ex.target))
    assert np.mean(scores) < 0.5 * np.mean(baseline)


@pytest.mark.slow
def test_trained_pattern_beats_frozen_pattern(toy):
    cfg, train, held_out = toy
    comparison = compare_patterns(train, held_out, cfg, NoiseModel(), toy_settings(), seeds=(0, 1, 2), cnn=TOY_CNN)
    assert len(comparison.trained) == len(comparison.frozen) == 3
    assert comparison.trained_better
