import math
from pathlib import Path
import sys
# Make package importable when tests run from project root:
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest
import torch

from progress.errors import ConfigurationError, DomainError, SizeError
from fpm_singleshot.diffcore import crop_center, embed_center, fft2c
from fpm_singleshot.helpers import make_rng
from fpm_singleshot.optics import (
    ComplexField,
    IlluminationPattern,
    ImageStack,
    LedSet,
    OpticsConfig,
    brightfield_image,
    build_pupil,
    emulate_pattern_image,
    forward_multiplexed,
    forward_single,
    forward_stack,
    illumination_na,
    led_spatial_frequency,
    max_illumination_na,
    select_centermost,
    shift_bins,
    synthetic_passband,
)

CFG = OpticsConfig()
DU = 1.0 / (CFG.hi_shape[1] * CFG.pixel_hi)


def random_object(seed=0, shape=(128, 128)):
    rng = make_rng(seed)
    values = (0.5 + 0.5 * rng.random(shape)) * np.exp(1j * rng.uniform(-1, 1, shape))
    return ComplexField(values, CFG.pixel_hi)


def unit_object():
    return ComplexField(np.ones(CFG.hi_shape), CFG.pixel_hi)


def test_default_geometry():
    assert CFG.pixel_lo == pytest.approx(0.325)
    assert CFG.pixel_hi == pytest.approx(0.1625)
    assert CFG.cutoff == pytest.approx(0.96525, abs=1e-5)
    assert CFG.required_upsample() == 2
    assert CFG.hi_shape == (128, 128)


@pytest.mark.parametrize("kwargs", [
    {"wavelength": 0.0},
    {"objective_na": 1.0},
    {"led_z": -1.0},
    {"upsample_factor": 1},
    {"upsample_factor": 1.5},
    {"bit_depth": 20},
])
def test_invalid_config_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        OpticsConfig(**kwargs)


def test_select_centermost_small_sets():
    assert select_centermost(CFG, 1).offsets == ((0, 0),)
    assert set(select_centermost(CFG, 5)) == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}


def test_select_centermost_69_is_radius_sqrt20_disk():
    leds = select_centermost(CFG, 69)
    expected = {(i, j) for i in range(-5, 6) for j in range(-5, 6) if i * i + j * j <= 20}
    assert len(expected) == 69
    assert set(leds) == expected
    assert max(i * i + j * j for i, j in leds) == 20


def test_select_centermost_too_many():
    with pytest.raises(SizeError):
        select_centermost(OpticsConfig(led_grid=(3, 3), num_leds=5), 10)


def test_led_set_rejects_duplicates():
    with pytest.raises(ConfigurationError):
        LedSet(((0, 0), (0, 0)))


def test_led_spatial_frequency_oracles():
    assert led_spatial_frequency(CFG, (0, 0)) == (0.0, 0.0)
    ux, uy = led_spatial_frequency(CFG, (1, 0))
    assert ux == pytest.approx(0.11093, abs=1e-5)
    assert uy == 0.0
    ux, uy = led_spatial_frequency(CFG, (2, 4))
    assert math.hypot(ux, uy) == pytest.approx(0.48120, abs=1e-5)
    assert math.hypot(ux, uy) == pytest.approx(illumination_na(CFG, (2, 4)) / CFG.wavelength, rel=1e-12)
    assert illumination_na(CFG, (2, 4)) == pytest.approx(0.24926, abs=1e-5)


def test_synthetic_na_of_default_set():
    na_ill = max_illumination_na(CFG, select_centermost(CFG, 69))
    assert na_ill == pytest.approx(0.24926, abs=1e-5)
    assert 0.745 <= CFG.objective_na + na_ill <= 0.755


def test_build_pupil_disk():
    pupil = build_pupil(CFG, (64, 64))
    assert pupil.amplitude[32, 32] == 1.0
    assert pupil.amplitude[0, 0] == 0.0
    assert np.all(pupil.phase == 0.0)
    # radius in bins: 0.96525 / (1 / (64 * 0.325)) = 20.08
    assert pupil.amplitude[32, 32 + 20] == 1.0
    assert pupil.amplitude[32, 32 + 21] == 0.0


def test_unit_object_images_to_one_on_axis():
    pupil = build_pupil(CFG, CFG.image_size)
    image = forward_single(unit_object(), pupil, (0.0, 0.0))
    assert image.shape == (64, 64)
    assert image.max() - image.min() < 1e-12 * image.mean()
    assert image.mean() == pytest.approx(1.0, rel=1e-12)


def test_dc_outside_pupil_gives_zero_image():
    pupil = build_pupil(CFG, CFG.image_size)
    image = forward_single(unit_object(), pupil, (1.2, 0.0))
    assert image.max() < 1e-20


def test_quadratic_homogeneity():
    pupil = build_pupil(CFG, CFG.image_size)
    obj = random_object(1)
    u = led_spatial_frequency(CFG, (1, 2))
    once = forward_single(obj, pupil, u)
    twice = forward_single(ComplexField(2.0 * obj.values, obj.pitch), pupil, u)
    np.testing.assert_allclose(twice, 4.0 * once, rtol=1e-13, atol=1e-13 * once.max())


def test_parseval():
    values = random_object(2).values
    spectrum = fft2c(torch.as_tensor(values)).numpy()
    assert np.sum(np.abs(spectrum) ** 2) == pytest.approx(np.sum(np.abs(values) ** 2), rel=1e-10)


@pytest.mark.parametrize("bins, led, passes", [
    (10, (1, 0), True),     # 10 - 2 bins inside
    (22, (0, 0), False),    # 22 bins = 1.058 /um outside
    (22, (2, 0), True),     # 22 - 5 bins inside
    (22, (-2, 0), False),   # 22 + 5 bins outside
])
def test_plane_wave_shift_convention(bins, led, passes):
    cols = np.arange(128)
    wave = np.exp(2j * np.pi * bins * cols / 128)[None, :] * np.ones((128, 1))
    pupil = build_pupil(CFG, CFG.image_size)
    image = forward_single(ComplexField(wave, CFG.pixel_hi), pupil, led_spatial_frequency(CFG, led))
    if passes:
        assert image.mean() == pytest.approx(1.0, rel=1e-9)
    else:
        assert image.sum() < 1e-20


def test_shift_bins_rounds_to_grid():
    u = led_spatial_frequency(CFG, (1, 0))
    assert shift_bins(u, CFG.hi_shape, CFG.pixel_hi) == (0, int(round(u[0] / DU)))
    assert shift_bins(led_spatial_frequency(CFG, (0, -1)), CFG.hi_shape, CFG.pixel_hi) == (-2, 0)


def test_window_outside_grid_is_a_configuration_error():
    pupil = build_pupil(CFG, CFG.image_size)
    with pytest.raises(ConfigurationError):
        forward_single(unit_object(), pupil, (2.0, 0.0))


def test_crop_and_embed_are_adjoint():
    rng = make_rng(3)
    x = torch.as_tensor(rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)))
    y = torch.as_tensor(rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6)))
    lhs = torch.vdot(crop_center(x, (6, 6), (2, -3)).reshape(-1), y.reshape(-1))
    rhs = torch.vdot(x.reshape(-1), embed_center(y, (16, 16), (2, -3)).reshape(-1))
    assert complex(lhs) == pytest.approx(complex(rhs), rel=1e-12)


def test_multiplexed_reductions():
    leds = select_centermost(CFG, 5)
    pupil = build_pupil(CFG, CFG.image_size)
    obj = random_object(4)
    singles = [forward_single(obj, pupil, led_spatial_frequency(CFG, led)) for led in leds]

    one_hot = IlluminationPattern.one_hot(5, 3)
    assert np.array_equal(forward_multiplexed(obj, pupil, one_hot, leds, CFG), singles[3])

    pair = LedSet((leds[1], leds[2]))
    both = forward_multiplexed(obj, pupil, IlluminationPattern(np.ones(2), 2000.0), pair, CFG)
    np.testing.assert_allclose(both, singles[1] + singles[2], rtol=1e-14)

    zero = forward_multiplexed(obj, pupil, IlluminationPattern(np.zeros(5), 2000.0), leds, CFG)
    assert np.all(zero == 0.0)


def test_multiplexed_length_mismatch():
    leds = select_centermost(CFG, 5)
    pupil = build_pupil(CFG, CFG.image_size)
    with pytest.raises(SizeError):
        forward_multiplexed(unit_object(), pupil, IlluminationPattern(np.ones(4), 100.0), leds, CFG)


def test_emulate_pattern_image():
    rng = make_rng(5)
    stack = ImageStack(rng.random((7, 8, 8)) * 100.0)
    one_hot = IlluminationPattern.one_hot(7, 2)
    assert np.array_equal(emulate_pattern_image(stack, one_hot), stack.images[2])

    weights = rng.random(7)
    full = emulate_pattern_image(stack, IlluminationPattern(weights, 2000.0))
    half = emulate_pattern_image(stack, IlluminationPattern(weights, 1000.0))
    assert np.array_equal(half, 0.5 * full)

    brute = np.zeros((8, 8))
    for c, image in zip(weights, stack.images):
        brute += c * image
    np.testing.assert_allclose(full, brute, rtol=1e-12)


def test_pattern_constraints():
    with pytest.raises(DomainError):
        IlluminationPattern(np.array([0.5, 1.5]), 100.0)
    with pytest.raises(DomainError):
        IlluminationPattern(np.array([0.5]), 2500.0)
    assert IlluminationPattern(np.array([0.5]), 500.0).epsilon == 0.25


def test_image_stack_validation():
    with pytest.raises(SizeError):
        ImageStack(np.zeros((4, 4)))
    with pytest.raises(DomainError):
        ImageStack(-np.ones((2, 4, 4)))


def test_forward_stack_unit_object_is_flat():
    leds = select_centermost(CFG, 69)
    stack = forward_stack(unit_object(), build_pupil(CFG, CFG.image_size), leds, CFG)
    assert len(stack) == 69
    spread = stack.images.max(axis=(1, 2)) - stack.images.min(axis=(1, 2))
    assert np.all(spread < 1e-12)


def test_synthetic_passband_covers_objective_disk():
    leds = select_centermost(CFG, 69)
    mask = synthetic_passband(CFG, leds)
    assert mask.shape == CFG.hi_shape
    assert mask[64, 64]
    # LED (4, 0) sits 9 bins right of centre, the pupil radius is 20 bins
    assert mask[64, 64 + 29]
    assert not mask[64, 64 + 33]
    assert not mask[0, 0]


def test_brightfield_image_is_the_all_ones_pattern():
    images = make_rng(3).random((5, 8, 8)) * 100.0
    stack = ImageStack(images)
    summed = brightfield_image(stack)
    assert summed.shape == (8, 8)
    np.testing.assert_allclose(summed, images.sum(axis=0), rtol=1e-15)
    np.testing.assert_allclose(emulate_pattern_image(stack, IlluminationPattern(np.ones(5), 2000.0)),
                               summed, rtol=1e-12)
