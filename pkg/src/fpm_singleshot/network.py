"""Residual CNN mapping one low-res pattern image to a high-res complex field."""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
from loguru import logger

from progress.errors import ConfigurationError, SizeError


@dataclass(frozen=True)
class CnnSpec:
    channels: int = 32
    blocks: int = 4
    kernel: int = 3
    upsample_factor: int = 2
    slope: float = 0.1

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"cnn kernel must be odd and positive, got {self.kernel}")
        if self.channels < 1 or self.blocks < 0 or self.upsample_factor < 1:
            raise ConfigurationError("cnn channels and upsample factor must be >= 1, blocks >= 0")

    def to_dict(self) -> Dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, slope: float):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel, 1, kernel // 2)
        self.act = nn.LeakyReLU(slope)
        self.conv2 = nn.Conv2d(channels, channels, kernel, 1, kernel // 2)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class CnnModel(nn.Module):
    """Head conv, K residual blocks, pixel-shuffle upsampler, 1x1 conv to (real, imag).

    The last convolution starts at zero, so an untrained model predicts the
    zero field. ``input_scale`` divides the measured image before the head.
    """

    def __init__(self, spec: CnnSpec = CnnSpec(), seed: Optional[int] = None):
        super().__init__()
        self.spec = spec
        c, k, f = spec.channels, spec.kernel, spec.upsample_factor
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.head = nn.Sequential(nn.Conv2d(1, c, k, 1, k // 2), nn.LeakyReLU(spec.slope))
            self.blocks = nn.Sequential(*[ResidualBlock(c, k, spec.slope) for _ in range(spec.blocks)])
            self.upsample = nn.Sequential(nn.Conv2d(c, c * f * f, k, 1, k // 2), nn.PixelShuffle(f),
                                          nn.LeakyReLU(spec.slope))
            self.tail = nn.Conv2d(c, 2, 1)
            self._init_weights()
        self.register_buffer("input_scale", torch.tensor(1.0, dtype=torch.float64))
        self.double()
        # set by training; checked by single-shot prediction
        self.image_shape: Optional[Tuple[int, int]] = None
        self.pixel_hi: float = 1.0
        logger.info(f"CnnModel: {spec.blocks} blocks x {c} channels, kernel {k}, "
                    f"x{f} upsampling, {self.parameter_count} parameters")

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=self.spec.slope, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.tail.weight)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """B x 1 x H x W normalised images to B x 2 x fH x fW."""
        return self.tail(self.upsample(self.blocks(self.head(x))))

    def predict_field(self, images: torch.Tensor, divisor: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Complex fields (B x fH x fW) from raw images (B x H x W).

        Args:
            images: Measured or emulated pattern images
            divisor: Input normalisation; ``input_scale`` when omitted
        """
        if images.dim() != 3:
            raise SizeError(f"expected a B x H x W batch, got shape {tuple(images.shape)}")
        scale = self.input_scale if divisor is None else divisor
        out = self.forward((images / scale).unsqueeze(1))
        return torch.complex(out[:, 0], out[:, 1])
