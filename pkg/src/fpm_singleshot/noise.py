"""Sensor noise emulation and noise-factor calibration.

The training emulation applies, in this order: clamp to the sensor range,
uniform quantization noise in [0, 1), then the Gaussian approximation of
Poisson noise ``I + sqrt(I / m) * g`` truncated at 0.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger
from sklearn.linear_model import LinearRegression

from progress.errors import ConfigurationError, DomainError, SizeError
from .diffcore import guarded_sqrt
from .helpers import as_real_tensor, make_rng, to_numpy

DEFAULT_SLOPE = 0.41
DEFAULT_M = 1.0 / DEFAULT_SLOPE ** 2

Image = Union[np.ndarray, torch.Tensor]

__all__ = [
    "DEFAULT_M", "NoiseModel", "NoiseDraws", "NoiseCalibration", "make_rng",
    "apply_poisson_approx", "apply_quantization", "simulate_measurement",
    "calibrate_noise", "simulate_repeats",
]


@dataclass(frozen=True)
class NoiseModel:
    """Poisson scale factor m, sensor bit depth and the seed of the noise stream.

    ``m = inf`` disables the Poisson term.
    """
    m: float = DEFAULT_M
    bit_depth: int = 16
    seed: int = 0
    _stream: Optional[np.random.Generator] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.m > 0:
            raise ConfigurationError(f"noise factor m must be > 0, got {self.m}")
        if not 8 <= self.bit_depth <= 16:
            raise ConfigurationError(f"bit_depth must be in 8..16, got {self.bit_depth}")
        object.__setattr__(self, "_stream", make_rng(self.seed))

    @property
    def full_scale(self) -> float:
        return float(2 ** self.bit_depth - 1)

    def rng(self) -> np.random.Generator:
        """The model's noise stream; successive calls continue the same sequence."""
        return self._stream


@dataclass
class NoiseDraws:
    """Random values for one noisy forward pass; constants for backward."""
    uniform: torch.Tensor
    normal: torch.Tensor

    @classmethod
    def sample(cls, rng: np.random.Generator, shape: Tuple[int, ...]) -> "NoiseDraws":
        return cls(torch.as_tensor(rng.random(shape)), torch.as_tensor(rng.standard_normal(shape)))

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "NoiseDraws":
        return cls(torch.zeros(shape, dtype=torch.float64), torch.zeros(shape, dtype=torch.float64))


class NoiseCalibration(NamedTuple):
    slope: float
    m: float
    pixels: int


def _check_nonnegative(image: torch.Tensor) -> None:
    if bool((image.detach() < 0).any()):
        raise DomainError("Poisson approximation needs intensities >= 0")


def poisson_approx(image: torch.Tensor, m: float, normal: torch.Tensor) -> torch.Tensor:
    """max(I + sqrt(I/m) g, 0) on tensors."""
    _check_nonnegative(image)
    if math.isinf(m):
        return image
    sigma = torch.where(image > 0, guarded_sqrt(image / m), torch.zeros_like(image))
    return torch.clamp(image + sigma * normal, min=0.0)


def quantize(image: torch.Tensor, full_scale: float, uniform: torch.Tensor) -> torch.Tensor:
    return torch.clamp(image, 0.0, full_scale) + uniform


def apply_poisson_approx(image: Image, model: NoiseModel, rng: Optional[np.random.Generator] = None,
                         normal: Optional[np.ndarray] = None) -> np.ndarray:
    """Gaussian approximation of Poisson noise with a fresh standard normal draw.

    Args:
        image: Nonnegative intensity image
        model: NoiseModel supplying m
        rng: Generator for the draw (the model's own stream if omitted)
        normal: Explicit draws, overriding rng

    Returns:
        Noisy image, >= 0
    """
    img = as_real_tensor(image)
    if normal is None:
        rng = rng if rng is not None else model.rng()
        normal = rng.standard_normal(tuple(img.shape))
    return to_numpy(poisson_approx(img, model.m, as_real_tensor(normal)))


def apply_quantization(image: Image, model: NoiseModel, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Clamp to [0, 2**bit_depth - 1] and add uniform noise in [0, 1)."""
    img = as_real_tensor(image)
    rng = rng if rng is not None else model.rng()
    uniform = torch.as_tensor(rng.random(tuple(img.shape)))
    return to_numpy(quantize(img, model.full_scale, uniform))


def simulate_measurement(image: torch.Tensor, model: NoiseModel, draws: NoiseDraws) -> torch.Tensor:
    """Quantization then Poisson approximation; differentiable in ``image``."""
    if tuple(draws.uniform.shape) != tuple(image.shape) or tuple(draws.normal.shape) != tuple(image.shape):
        raise SizeError(f"noise draws {tuple(draws.normal.shape)} do not match image {tuple(image.shape)}")
    return poisson_approx(quantize(image, model.full_scale, draws.uniform), model.m, draws.normal)


def simulate_repeats(image: Image, model: NoiseModel, repeats: int,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """R noisy frames of the same scene, as taken for calibration."""
    if repeats < 1:
        raise SizeError(f"repeats must be >= 1, got {repeats}")
    rng = rng if rng is not None else model.rng()
    return np.stack([apply_poisson_approx(image, model, rng) for _ in range(repeats)])


def calibrate_noise(repeats: np.ndarray) -> NoiseCalibration:
    """Fit sigma = s * sqrt(mu) through the origin over all pixels.

    Args:
        repeats: R x H x W frames of one static scene (R >= 2)

    Returns:
        NoiseCalibration(slope, m = 1/slope**2, pixels). m is inf for a
        noiseless input.
    """
    arr = np.asarray(repeats, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] < 2:
        raise SizeError(f"calibration needs at least 2 repeated frames, got shape {arr.shape}")
    mean = arr.mean(axis=0).ravel()
    std = arr.std(axis=0, ddof=1).ravel()
    if not np.any(mean > 0):
        raise DomainError("calibration frames are all zero; the slope fit is degenerate")
    x = np.sqrt(np.clip(mean, 0.0, None)).reshape(-1, 1)
    fit = LinearRegression(fit_intercept=False).fit(x, std)
    slope = float(fit.coef_[0])
    m = math.inf if slope == 0 else 1.0 / slope ** 2
    logger.info(f"Noise calibration over {mean.size} pixels: slope {slope:.4f}, m {m:.4f}")
    return NoiseCalibration(slope, m, int(mean.size))
