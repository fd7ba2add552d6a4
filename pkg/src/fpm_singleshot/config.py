"""Flat YAML run configuration.

Every accepted key and its default is listed in ``DEFAULTS`` (and mirrored
in config.sample.yaml). Unknown keys and nested mappings are rejected.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml
from loguru import logger

from progress.errors import ConfigurationError
from .joint import TrainSettings
from .network import CnnSpec
from .noise import DEFAULT_M, NoiseModel
from .optics import OpticsConfig
from .phantom import PhantomSpec
from .recon import ReconSettings

DEFAULT_CONFIG_PATH = "config.yaml"

DEFAULTS: Dict[str, Any] = {
    # optics
    "wavelength": 0.518,
    "objective_na": 0.5,
    "magnification": 20.0,
    "sensor_pixel": 6.5,
    "bit_depth": 16,
    "led_pitch": 4.0,
    "led_z": 69.5,
    "led_grid": [32, 32],
    "num_leds": 69,
    "upsample_factor": 2,
    "image_size": [64, 64],
    # noise
    "noise_m": DEFAULT_M,
    "noise_enabled": True,
    "calibration_repeats": 100,
    # reconstruction
    "recon_learning_rate": 0.2,
    "recon_iterations": 3000,
    "patch_grid": [4, 4],
    "patch_overlap": 8,
    "pupil_phase_learning": True,
    "background_window": 0,
    "workers": 0,
    # training
    "train_epochs": 40,
    "train_batch_size": 4,
    "train_learning_rate": 1e-3,
    "pattern_learning_rate": 1e-2,
    "gradient_weight": 1.0,
    "cnn_blocks": 4,
    "cnn_channels": 32,
    "cnn_kernel": 3,
    "finetune_epochs": 10,
    # phantoms and datasets
    "phantom_kind": "blobs",
    "phantom_count": 20,
    "phantom_bandlimit": True,
    "amplitude_min": 0.5,
    "amplitude_max": 1.0,
    "phase_min": -1.0,
    "phase_max": 1.0,
    "feature_scale_um": 1.5,
    "full_scale_counts": 1000.0,
    "target_mode": "oracle",
    # run
    "seed": 0,
    "output_dir": "output",
    "log_file": "fpm_singleshot.log",
    "log_level": "INFO",
    "log_rotation": "10 MB",
    "log_retention": None,
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(value, Mapping):
        raise ConfigurationError(f"config key {key!r} must be a scalar or a list, not a mapping")
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise TypeError
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"config key {key!r} has invalid value {value!r} "
                                 f"(expected {type(default).__name__} like {default!r})") from None


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))
    source: Optional[str] = None

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], source: Optional[str] = None) -> "RunConfig":
        unknown = sorted(set(mapping) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(map(str, unknown))}")
        values = dict(DEFAULTS)
        for key, value in mapping.items():
            values[key] = _coerce(key, value)
        return cls(values, source)

    @classmethod
    def load(cls, config_path: str) -> "RunConfig":
        """Load configuration from a YAML file.

        Args:
            config_path: Path to the configuration file

        Returns:
            RunConfig with defaults filled in
        """
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {config_path}")
        try:
            with open(path, "r") as f:
                cfg = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"invalid YAML in config file {config_path}: {e}") from e
        if cfg is None:
            cfg = {}
        if not isinstance(cfg, dict):
            raise ConfigurationError(f"config file did not contain a mapping: {config_path}")
        config = cls.from_mapping(cfg, str(path))
        logger.debug(f"Loaded {len(cfg)} config keys from {config_path}")
        return config

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        merged = dict(self.values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_mapping(merged, self.source)

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    @property
    def log_path(self) -> Path:
        log_file = Path(self.values["log_file"])
        return log_file if log_file.is_absolute() else self.output_dir / log_file

    def optics(self) -> OpticsConfig:
        v = self.values
        return OpticsConfig(
            wavelength=v["wavelength"], objective_na=v["objective_na"], magnification=v["magnification"],
            sensor_pixel=v["sensor_pixel"], bit_depth=v["bit_depth"], led_pitch=v["led_pitch"],
            led_z=v["led_z"], led_grid=tuple(v["led_grid"]), num_leds=v["num_leds"],
            upsample_factor=v["upsample_factor"], image_size=tuple(v["image_size"]),
        )

    def noise_model(self) -> NoiseModel:
        return NoiseModel(m=self.values["noise_m"], bit_depth=self.values["bit_depth"], seed=self.values["seed"])

    def recon_settings(self) -> ReconSettings:
        v = self.values
        return ReconSettings(
            learning_rate=v["recon_learning_rate"], iterations=v["recon_iterations"],
            patch_grid=tuple(v["patch_grid"]), overlap=v["patch_overlap"],
            pupil_phase_learning=v["pupil_phase_learning"], background_window=v["background_window"],
        )

    def train_settings(self, finetune: bool = False) -> TrainSettings:
        v = self.values
        return TrainSettings(
            epochs=v["finetune_epochs"] if finetune else v["train_epochs"],
            batch_size=v["train_batch_size"], learning_rate=v["train_learning_rate"],
            pattern_learning_rate=v["pattern_learning_rate"], seed=v["seed"],
            gradient_weight=v["gradient_weight"], noise_enabled=v["noise_enabled"],
        )

    def cnn_spec(self) -> CnnSpec:
        v = self.values
        return CnnSpec(channels=v["cnn_channels"], blocks=v["cnn_blocks"], kernel=v["cnn_kernel"],
                       upsample_factor=v["upsample_factor"])

    def phantom_spec(self, index: int = 0) -> PhantomSpec:
        v = self.values
        return PhantomSpec.for_optics(
            self.optics(), kind=v["phantom_kind"],
            amplitude_range=(v["amplitude_min"], v["amplitude_max"]),
            phase_range=(v["phase_min"], v["phase_max"]),
            feature_scale_um=v["feature_scale_um"], seed=v["seed"] + index,
        )
