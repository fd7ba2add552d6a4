"""Coherent image formation for an LED-array microscope.

Geometry of the LED matrix, the objective pupil, single-LED and multiplexed
intensity images, and emulation of a pattern image from a single-LED stack.

Conventions used throughout the package:

* Spectra are centred (``fft2c``), unitary, with zero frequency at n//2.
* An LED at lattice offset (i, j) has spatial frequency u_l with the sign of
  its physical offset. Illumination shifts the object spectrum by
  ``SHIFT_SIGN * u_l``; the sensor field spectrum at pupil frequency u is
  ``P(u) O(u - SHIFT_SIGN * u_l)``.
* Shifts are rounded to the nearest high-res frequency bin.
* Low-res fields carry the factor sqrt(H_lo W_lo / (H_hi W_hi)) so a unit
  object under on-axis illumination images to exactly 1.
"""

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from progress.errors import ConfigurationError, DomainError, SizeError
from .diffcore import abs2, crop_center, embed_center, fft2c, ifft2c
from .helpers import as_complex_tensor, as_real_tensor, lattice_coordinates, to_numpy

SHIFT_SIGN = -1
FULL_EXPOSURE_MS = 2000.0


@dataclass(frozen=True)
class OpticsConfig:
    """Instrument geometry. Lengths in µm except the LED matrix (mm)."""
    wavelength: float = 0.518
    objective_na: float = 0.5
    magnification: float = 20.0
    sensor_pixel: float = 6.5
    bit_depth: int = 16
    led_pitch: float = 4.0
    led_z: float = 69.5
    led_grid: Tuple[int, int] = (32, 32)
    num_leds: int = 69
    upsample_factor: int = 2
    image_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "led_grid", tuple(int(g) for g in self.led_grid))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if not self.wavelength > 0:
            raise ConfigurationError(f"wavelength must be > 0, got {self.wavelength}")
        if not 0 < self.objective_na < 1:
            raise ConfigurationError(f"objective_na must be in (0, 1), got {self.objective_na}")
        if not self.led_z > 0:
            raise ConfigurationError(f"led_z must be > 0, got {self.led_z}")
        if self.magnification <= 0 or self.sensor_pixel <= 0 or self.led_pitch <= 0:
            raise ConfigurationError("magnification, sensor_pixel and led_pitch must be > 0")
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise ConfigurationError(f"upsample_factor must be an integer >= 1, got {self.upsample_factor}")
        if not 8 <= self.bit_depth <= 16:
            raise ConfigurationError(f"bit_depth must be in 8..16, got {self.bit_depth}")
        if len(self.led_grid) != 2 or min(self.led_grid) < 1:
            raise ConfigurationError(f"led_grid must be two positive integers, got {self.led_grid}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigurationError(f"image_size must be two positive integers, got {self.image_size}")
        required = self.required_upsample()
        if self.upsample_factor < required:
            raise ConfigurationError(
                f"upsample_factor {self.upsample_factor} cannot hold the synthetic passband "
                f"of {self.num_leds} LEDs; need at least {required}"
            )

    @property
    def pixel_lo(self) -> float:
        """Object-plane pitch of the camera pixels (µm)."""
        return self.sensor_pixel / self.magnification

    @property
    def pixel_hi(self) -> float:
        return self.pixel_lo / self.upsample_factor

    @property
    def cutoff(self) -> float:
        """Coherent cutoff NA/λ (1/µm)."""
        return self.objective_na / self.wavelength

    @property
    def hi_shape(self) -> Tuple[int, int]:
        f = self.upsample_factor
        return self.image_size[0] * f, self.image_size[1] * f

    def required_upsample(self) -> int:
        leds = select_centermost(self, self.num_leds)
        na_ill = max_illumination_na(self, leds)
        # guard against 2.0000000001 from the division
        return int(math.ceil(round((self.objective_na + na_ill) / self.objective_na, 9)))


@dataclass(frozen=True)
class LedSet:
    """LED lattice offsets (i along x, j along y) from the matrix centre."""
    offsets: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        offsets = tuple((int(i), int(j)) for i, j in self.offsets)
        if len(set(offsets)) != len(offsets):
            raise ConfigurationError("LED offsets must be unique")
        object.__setattr__(self, "offsets", offsets)

    def __len__(self) -> int:
        return len(self.offsets)

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(self.offsets)

    def __getitem__(self, k: int) -> Tuple[int, int]:
        return self.offsets[k]

    def index(self, led: Tuple[int, int]) -> int:
        return self.offsets.index(tuple(led))


@dataclass
class ComplexField:
    values: np.ndarray
    pitch: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise SizeError(f"ComplexField needs a non-empty 2-D array, got shape {self.values.shape}")
        if not self.pitch > 0:
            raise ConfigurationError(f"pitch must be > 0, got {self.pitch}")
        if not np.isfinite(self.values).all():
            raise DomainError("ComplexField values must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)


@dataclass
class Pupil:
    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.amplitude.shape != self.phase.shape:
            raise SizeError(f"pupil amplitude {self.amplitude.shape} and phase {self.phase.shape} differ")
        if not np.isfinite(self.phase).all():
            raise DomainError("pupil phase must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.amplitude.shape

    @property
    def support(self) -> np.ndarray:
        return self.amplitude > 0

    def transfer(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)


@dataclass
class IlluminationPattern:
    weights: np.ndarray
    exposure_ms: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.exposure_ms = float(self.exposure_ms)
        if np.any(self.weights < 0) or np.any(self.weights > 1) or not np.isfinite(self.weights).all():
            raise DomainError("pattern weights must lie in [0, 1]")
        if not 0.0 <= self.exposure_ms <= FULL_EXPOSURE_MS:
            raise DomainError(f"exposure must lie in [0, {FULL_EXPOSURE_MS:g}] ms, got {self.exposure_ms}")

    @property
    def epsilon(self) -> float:
        return self.exposure_ms / FULL_EXPOSURE_MS

    def __len__(self) -> int:
        return self.weights.size

    @classmethod
    def one_hot(cls, n: int, k: int, exposure_ms: float = FULL_EXPOSURE_MS) -> "IlluminationPattern":
        w = np.zeros(n)
        w[k] = 1.0
        return cls(w, exposure_ms)


@dataclass
class ImageStack:
    """Single-LED intensity images, one per LED, in LED order."""
    images: np.ndarray
    led_index: Tuple[int, ...] = ()
    exposure_ms: Tuple[float, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise SizeError(f"ImageStack needs an n x H x W array, got shape {self.images.shape}")
        n = self.images.shape[0]
        self.led_index = tuple(self.led_index) if len(self.led_index) else tuple(range(n))
        self.exposure_ms = tuple(self.exposure_ms) if len(self.exposure_ms) else (FULL_EXPOSURE_MS,) * n
        if len(self.led_index) != n or len(self.exposure_ms) != n:
            raise SizeError(f"stack of {n} images has {len(self.led_index)} LED indices "
                            f"and {len(self.exposure_ms)} exposures")
        if np.any(self.images < 0):
            raise DomainError("intensities must be >= 0")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.images.shape[1:]

    def with_images(self, images: np.ndarray) -> "ImageStack":
        return ImageStack(images, self.led_index, self.exposure_ms)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def select_centermost(cfg: OpticsConfig, n: int) -> LedSet:
    """The n lattice offsets nearest the matrix centre.

    Ties in i**2 + j**2 are broken by i, then j, ascending.
    """
    gx, gy = cfg.led_grid
    candidates = [(i, j)
                  for i in range(-(gx // 2), gx // 2 + 1) if abs(i) < gx / 2
                  for j in range(-(gy // 2), gy // 2 + 1) if abs(j) < gy / 2]
    if not 1 <= n <= len(candidates):
        raise SizeError(f"cannot select {n} LEDs from a {gx}x{gy} grid ({len(candidates)} usable)")
    candidates.sort(key=lambda ij: (ij[0] ** 2 + ij[1] ** 2, ij[0], ij[1]))
    return LedSet(tuple(candidates[:n]))


def led_spatial_frequency(cfg: OpticsConfig, led: Tuple[int, int]) -> Tuple[float, float]:
    """Transverse spatial frequency (u_x, u_y) in 1/µm of the LED's plane wave."""
    x = led[0] * cfg.led_pitch
    y = led[1] * cfg.led_pitch
    r = math.sqrt(x * x + y * y + cfg.led_z * cfg.led_z)
    return x / (cfg.wavelength * r), y / (cfg.wavelength * r)


def illumination_na(cfg: OpticsConfig, led: Tuple[int, int]) -> float:
    ux, uy = led_spatial_frequency(cfg, led)
    return math.hypot(ux, uy) * cfg.wavelength


def max_illumination_na(cfg: OpticsConfig, leds: LedSet) -> float:
    return max(illumination_na(cfg, led) for led in leds)


def frequency_grid(shape: Tuple[int, int], pitch: float):
    """Centred (v, u) frequency coordinates in 1/µm for a grid with the given pitch."""
    return lattice_coordinates(shape, (1.0 / (shape[0] * pitch), 1.0 / (shape[1] * pitch)))


def build_pupil(cfg: OpticsConfig, grid: Tuple[int, int]) -> Pupil:
    """Aberration-free pupil: unit disk of radius NA/λ, zero phase."""
    nyquist = 1.0 / (2.0 * cfg.pixel_lo)
    if cfg.cutoff > nyquist:
        raise ConfigurationError(
            f"pupil cutoff {cfg.cutoff:.4f}/um exceeds the camera Nyquist frequency {nyquist:.4f}/um"
        )
    v, u = frequency_grid(tuple(grid), cfg.pixel_lo)
    amplitude = (u * u + v * v <= cfg.cutoff ** 2).astype(np.float64)
    return Pupil(amplitude, np.zeros_like(amplitude))


def shift_bins(u_l: Tuple[float, float], hi_shape: Tuple[int, int], pitch_hi: float) -> Tuple[int, int]:
    """Offset (rows, cols) of the crop window centre in the centred hi-res spectrum."""
    dv = 1.0 / (hi_shape[0] * pitch_hi)
    du = 1.0 / (hi_shape[1] * pitch_hi)
    return (int(np.rint(-SHIFT_SIGN * u_l[1] / dv)),
            int(np.rint(-SHIFT_SIGN * u_l[0] / du)))


def check_window(offset: Tuple[int, int], lo_shape: Tuple[int, int], hi_shape: Tuple[int, int]) -> None:
    for axis in range(2):
        start = hi_shape[axis] // 2 + offset[axis] - lo_shape[axis] // 2
        if start < 0 or start + lo_shape[axis] > hi_shape[axis]:
            raise ConfigurationError(
                f"LED shift of {offset} bins moves the pupil window outside the "
                f"{hi_shape[0]}x{hi_shape[1]} high-res spectrum; increase upsample_factor"
            )


def sensor_scale(lo_shape: Tuple[int, int], hi_shape: Tuple[int, int]) -> float:
    return math.sqrt((lo_shape[0] * lo_shape[1]) / (hi_shape[0] * hi_shape[1]))


# ---------------------------------------------------------------------------
# Image formation (torch kernels shared with the solvers)
# ---------------------------------------------------------------------------

def single_led_intensity(spectrum: torch.Tensor, transfer: torch.Tensor,
                         offset: Tuple[int, int]) -> torch.Tensor:
    """Intensity of one LED given the centred hi-res object spectrum."""
    lo_shape = tuple(transfer.shape[-2:])
    window = crop_center(spectrum, lo_shape, offset)
    field_lo = ifft2c(window * transfer) * sensor_scale(lo_shape, tuple(spectrum.shape[-2:]))
    return abs2(field_lo)


def window_indices(offsets: Sequence[Tuple[int, int]], lo_shape: Tuple[int, int],
                   hi_shape: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Row/column gather indices (L x h x 1 and L x 1 x w) for every LED window."""
    off = torch.as_tensor(np.asarray(offsets, dtype=np.int64).reshape(-1, 2))
    r0 = hi_shape[0] // 2 + off[:, 0] - lo_shape[0] // 2
    c0 = hi_shape[1] // 2 + off[:, 1] - lo_shape[1] // 2
    rows = r0[:, None] + torch.arange(lo_shape[0])[None, :]
    cols = c0[:, None] + torch.arange(lo_shape[1])[None, :]
    return rows[:, :, None], cols[:, None, :]


def stack_intensity(spectrum: torch.Tensor, transfer: torch.Tensor,
                    indices: Tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Intensities of all LEDs at once (L x h x w)."""
    rows, cols = indices
    windows = spectrum[rows, cols]
    lo_shape = tuple(transfer.shape[-2:])
    field_lo = ifft2c(windows * transfer) * sensor_scale(lo_shape, tuple(spectrum.shape[-2:]))
    return abs2(field_lo)


def pattern_image(images: torch.Tensor, weights: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    """ε Σ_l c_l I_l for tensors; differentiable in every argument."""
    return epsilon * torch.tensordot(weights, images, dims=([0], [0]))


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def _prepare(obj: ComplexField, pupil: Pupil, u_l: Tuple[float, float]):
    lo_shape = pupil.shape
    hi_shape = obj.shape
    offset = shift_bins(u_l, hi_shape, obj.pitch)
    check_window(offset, lo_shape, hi_shape)
    return offset


def forward_single(obj: ComplexField, pupil: Pupil, u_l: Tuple[float, float]) -> np.ndarray:
    """Low-res intensity image under a single LED of frequency u_l."""
    offset = _prepare(obj, pupil, u_l)
    spectrum = fft2c(as_complex_tensor(obj.values))
    image = single_led_intensity(spectrum, as_complex_tensor(pupil.transfer()), offset)
    return to_numpy(image)


def forward_multiplexed(obj: ComplexField, pupil: Pupil, pattern: IlluminationPattern,
                        leds: LedSet, cfg: OpticsConfig) -> np.ndarray:
    """Incoherent sum Σ_l c_l I_l over the LEDs."""
    if len(pattern) != len(leds):
        raise SizeError(f"pattern has {len(pattern)} weights for {len(leds)} LEDs")
    total = np.zeros(pupil.shape)
    for c, led in zip(pattern.weights, leds):
        total = total + c * forward_single(obj, pupil, led_spatial_frequency(cfg, led))
    return total


def forward_stack(obj: ComplexField, pupil: Pupil, leds: LedSet, cfg: OpticsConfig) -> ImageStack:
    """One full-brightness, full-exposure image per LED."""
    images = np.stack([forward_single(obj, pupil, led_spatial_frequency(cfg, led)) for led in leds])
    logger.debug(f"Rendered {len(leds)} single-LED images of shape {pupil.shape}")
    return ImageStack(images)


def emulate_pattern_image(stack: ImageStack, pattern: IlluminationPattern) -> np.ndarray:
    """Pattern image ε Σ_l c_l I_l from a full-exposure single-LED stack."""
    if len(pattern) != len(stack):
        raise SizeError(f"pattern has {len(pattern)} weights for a stack of {len(stack)} images")
    image = pattern_image(as_real_tensor(stack.images), as_real_tensor(pattern.weights),
                          torch.tensor(pattern.epsilon, dtype=torch.float64))
    return to_numpy(image)


def brightfield_image(stack: ImageStack) -> np.ndarray:
    """Image with every LED of the stack switched on."""
    return stack.images.sum(axis=0)


def synthetic_passband(cfg: OpticsConfig, leds: LedSet, hi_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Support of the reconstructable spectrum on the centred hi-res grid."""
    hi_shape = tuple(hi_shape or cfg.hi_shape)
    f = cfg.upsample_factor
    lo_shape = (hi_shape[0] // f, hi_shape[1] // f)
    support = torch.as_tensor(build_pupil(cfg, lo_shape).support)
    mask = np.zeros(hi_shape, dtype=bool)
    for led in leds:
        offset = shift_bins(led_spatial_frequency(cfg, led), hi_shape, cfg.pixel_hi)
        check_window(offset, lo_shape, hi_shape)
        mask |= to_numpy(embed_center(support, hi_shape, offset))
    return mask
