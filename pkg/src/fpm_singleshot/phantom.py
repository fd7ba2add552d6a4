"""Synthetic complex objects and rendered training sets."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from progress.errors import ConfigurationError
from .diffcore import fft2c, ifft2c
from .helpers import make_rng, to_numpy
from .joint import TrainingExample
from .noise import NoiseDraws, NoiseModel, simulate_measurement
from .optics import (
    ComplexField,
    LedSet,
    OpticsConfig,
    build_pupil,
    forward_stack,
    max_illumination_na,
)
from .recon import ReconSettings, reconstruct_stack

KINDS = ("bars", "two-point", "two-bar", "blobs")
TARGET_MODES = ("oracle", "pipeline")


@dataclass(frozen=True)
class PhantomSpec:
    """A synthetic object on the high-res grid.

    ``feature_scale_um`` is the grating period for bars, the point or line
    spacing for two-point and two-bar, and the blob width for blobs.
    """
    kind: str = "blobs"
    size: Tuple[int, int] = (128, 128)
    pitch: float = 0.1625
    amplitude_range: Tuple[float, float] = (0.5, 1.0)
    phase_range: Tuple[float, float] = (-1.0, 1.0)
    feature_scale_um: float = 1.5
    bar_width_um: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown phantom kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        a0, a1 = self.amplitude_range
        p0, p1 = self.phase_range
        if not 0.0 <= a0 <= a1 <= 1.0:
            raise ConfigurationError(f"amplitude range {self.amplitude_range} must lie within [0, 1]")
        if not -np.pi <= p0 <= p1 <= np.pi:
            raise ConfigurationError(f"phase range {self.phase_range} must lie within [-pi, pi]")
        if not self.pitch > 0 or min(self.size) < 1:
            raise ConfigurationError("phantom pitch and size must be positive")
        degenerate = self.kind == "two-point" and self.feature_scale_um == 0
        if self.feature_scale_um < 0 or (self.feature_scale_um < self.pitch and not degenerate):
            raise ConfigurationError(
                f"feature scale {self.feature_scale_um} um is below the high-res pixel {self.pitch} um"
            )

    @classmethod
    def for_optics(cls, cfg: OpticsConfig, **kwargs) -> "PhantomSpec":
        return cls(size=cfg.hi_shape, pitch=cfg.pixel_hi, **kwargs)

    @classmethod
    def bars(cls, cfg: OpticsConfig, line_pairs_per_mm: float, **kwargs) -> "PhantomSpec":
        return cls.for_optics(cfg, kind="bars", feature_scale_um=1000.0 / line_pairs_per_mm, **kwargs)


def _bars(spec: PhantomSpec) -> np.ndarray:
    h, w = spec.size
    x = np.arange(w) * spec.pitch
    on = np.mod(x, spec.feature_scale_um) < spec.feature_scale_um / 2
    a0, a1 = spec.amplitude_range
    return np.broadcast_to(np.where(on, a1, a0), (h, w)).astype(np.complex128)


def bar_columns(spec: PhantomSpec) -> Tuple[int, int]:
    """Column indices of the two points or lines (left, right)."""
    spacing = int(round(spec.feature_scale_um / spec.pitch))
    left = spec.size[1] // 2 - spacing // 2
    return left, left + spacing


def _two_point(spec: PhantomSpec) -> np.ndarray:
    h, w = spec.size
    amplitude = np.zeros((h, w))
    for col in bar_columns(spec):
        amplitude[h // 2, col] += 1.0
    return np.clip(amplitude, *spec.amplitude_range).astype(np.complex128)


def _two_bar(spec: PhantomSpec) -> np.ndarray:
    h, w = spec.size
    width = max(1, int(round((spec.bar_width_um or spec.pitch) / spec.pitch)))
    a0, a1 = spec.amplitude_range
    amplitude = np.full((h, w), a0)
    for col in bar_columns(spec):
        start = col - width // 2
        amplitude[:, start:start + width] = a1
    return amplitude.astype(np.complex128)


def _smooth_field(rng: np.random.Generator, shape: Tuple[int, int], sigma_px: float) -> np.ndarray:
    """Sum of random Gaussians, rescaled to [0, 1]."""
    h, w = shape
    count = max(4, int(h * w / (2.0 * sigma_px) ** 2))
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros(shape)
    for _ in range(count):
        cy, cx = rng.random() * h, rng.random() * w
        s = sigma_px * (0.5 + rng.random())
        out += rng.uniform(-1.0, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
    span = out.max() - out.min()
    return (out - out.min()) / span if span > 0 else np.zeros(shape)


def _blobs(spec: PhantomSpec) -> np.ndarray:
    rng = make_rng(spec.seed)
    sigma_px = spec.feature_scale_um / spec.pitch
    a0, a1 = spec.amplitude_range
    p0, p1 = spec.phase_range
    amplitude = a0 + (a1 - a0) * _smooth_field(rng, spec.size, sigma_px)
    phase = p0 + (p1 - p0) * _smooth_field(rng, spec.size, sigma_px)
    return amplitude * np.exp(1j * phase)


_GENERATORS = {"bars": _bars, "two-point": _two_point, "two-bar": _two_bar, "blobs": _blobs}


def generate_phantom(spec: PhantomSpec) -> ComplexField:
    """Deterministic complex field described by ``spec``."""
    values = _GENERATORS[spec.kind](spec)
    return ComplexField(np.ascontiguousarray(values), spec.pitch)


def bandlimit(obj: ComplexField, mask: np.ndarray) -> ComplexField:
    """Zero the centred spectrum outside ``mask``."""
    spectrum = fft2c(torch.as_tensor(obj.values)) * torch.as_tensor(mask)
    return ComplexField(to_numpy(ifft2c(spectrum)).copy(), obj.pitch)


def default_phantom_set(cfg: OpticsConfig, leds: LedSet, seed: int = 0) -> List[ComplexField]:
    """3 bar gratings around the objective and synthetic cutoffs, 1 two-point pair, 16 blob fields."""
    na_obj = cfg.objective_na
    na_syn = na_obj + max_illumination_na(cfg, leds)
    # cycles per um
    frequencies = [0.8 * na_obj / cfg.wavelength,
                   0.5 * (na_obj + na_syn) / cfg.wavelength,
                   1.15 * na_syn / cfg.wavelength]
    phantoms = [generate_phantom(PhantomSpec.bars(cfg, 1000.0 * fr, amplitude_range=(0.2, 1.0),
                                                  phase_range=(0.0, 0.0)))
                for fr in frequencies]
    spacing = 0.73 * cfg.wavelength / (0.5 * (na_obj + na_syn))
    phantoms.append(generate_phantom(PhantomSpec.for_optics(cfg, kind="two-point", feature_scale_um=spacing,
                                                            amplitude_range=(0.0, 1.0), phase_range=(0.0, 0.0))))
    for k in range(16):
        phantoms.append(generate_phantom(PhantomSpec.for_optics(cfg, kind="blobs", seed=seed + k)))
    return phantoms


def render_training_set(phantoms: Sequence[ComplexField], cfg: OpticsConfig, leds: LedSet,
                        noise: Optional[NoiseModel] = None, full_scale_counts: float = 1000.0,
                        target_mode: str = "oracle", recon_settings: Optional[ReconSettings] = None,
                        rng: Optional[np.random.Generator] = None, workers: int = 0) -> List[TrainingExample]:
    """Single-LED stacks of every phantom, with targets.

    Args:
        phantoms: Fields on the high-res grid
        cfg: Optics configuration
        leds: LED set to render
        noise: Sensor noise applied to every image; None renders noiseless stacks
        full_scale_counts: Counts recorded for a unit object at full brightness and exposure
        target_mode: 'oracle' (target is the phantom) or 'pipeline' (iterative reconstruction)
        recon_settings: Settings for pipeline mode
        rng: Noise stream; the noise model's own when omitted
        workers: Patch workers for pipeline mode

    Returns:
        One TrainingExample per phantom
    """
    if target_mode not in TARGET_MODES:
        raise ConfigurationError(f"unknown target mode {target_mode!r}; expected oracle or pipeline")
    if not full_scale_counts > 0:
        raise ConfigurationError(f"full_scale_counts must be > 0, got {full_scale_counts}")
    pupil = build_pupil(cfg, cfg.image_size)
    if noise is not None and rng is None:
        rng = noise.rng()
    examples = []
    for k, obj in enumerate(phantoms):
        if obj.shape != cfg.hi_shape:
            raise ConfigurationError(f"phantom {k} has shape {obj.shape}, the high-res grid is {cfg.hi_shape}")
        stack = forward_stack(obj, pupil, leds, cfg)
        images = stack.images * full_scale_counts
        if noise is not None:
            draws = NoiseDraws.sample(rng, images.shape)
            images = to_numpy(simulate_measurement(torch.as_tensor(images), noise, draws))
        stack = stack.with_images(images)
        if target_mode == "oracle":
            target = obj
        else:
            result = reconstruct_stack(stack, cfg, recon_settings or ReconSettings(), leds, workers=workers)
            target = ComplexField(result.object.values / np.sqrt(full_scale_counts), obj.pitch)
        examples.append(TrainingExample(target=target, stack=stack, clean=obj))
    logger.info(f"Rendered {len(examples)} {target_mode}-mode examples with {len(leds)} LEDs each")
    return examples
