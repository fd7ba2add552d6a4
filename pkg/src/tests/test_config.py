import yaml
from pathlib import Path
import sys
# Make package importable when tests run from project root:
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import pytest

from progress.errors import ConfigurationError
from fpm_singleshot.config import DEFAULTS, RunConfig

SAMPLE = Path(__file__).resolve().parents[2] / "config.sample.yaml"


def write_config(path: Path, values) -> Path:
    path.write_text(yaml.safe_dump(values))
    return path


def test_sample_config_lists_every_key():
    sample = yaml.safe_load(SAMPLE.read_text())
    assert set(sample) == set(DEFAULTS)
    cfg = RunConfig.load(str(SAMPLE))
    for key, value in DEFAULTS.items():
        if isinstance(value, float):
            assert cfg[key] == pytest.approx(value)
        else:
            assert cfg[key] == value


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("")
    assert RunConfig.load(str(path)).values == DEFAULTS


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.load(str(tmp_path / "nope.yaml"))


def test_invalid_yaml(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigurationError):
        RunConfig.load(str(path))


@pytest.mark.parametrize("values", [
    {"sead": 1},
    {"optics": {"wavelength": 0.5}},
    {"seed": 1.5},
    {"noise_enabled": "yes"},
    {"image_size": [64]},
    {"wavelength": "green"},
    ["seed", 1],
])
def test_bad_values_are_rejected(tmp_path, values):
    path = write_config(tmp_path / "cfg.yaml", values)
    with pytest.raises(ConfigurationError):
        RunConfig.load(str(path))


def test_overrides_ignore_none():
    cfg = RunConfig().with_overrides(seed=7, output_dir=None)
    assert cfg["seed"] == 7
    assert cfg["output_dir"] == "output"
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides(colour="red")


def test_paths(tmp_path):
    cfg = RunConfig.from_mapping({"output_dir": str(tmp_path / "run")})
    assert cfg.output_dir == tmp_path / "run"
    assert cfg.log_path == tmp_path / "run" / "fpm_singleshot.log"
    absolute = RunConfig.from_mapping({"log_file": str(tmp_path / "x.log")})
    assert absolute.log_path == tmp_path / "x.log"


def test_builders():
    cfg = RunConfig.from_mapping({
        "image_size": [32, 48], "num_leds": 25, "noise_m": 2.0, "seed": 3,
        "patch_grid": [2, 3], "patch_overlap": 4, "train_epochs": 5, "finetune_epochs": 2,
        "cnn_channels": 8, "phantom_kind": "bars", "feature_scale_um": 2.0,
    })
    optics = cfg.optics()
    assert optics.image_size == (32, 48)
    assert optics.hi_shape == (64, 96)
    assert optics.num_leds == 25
    noise = cfg.noise_model()
    assert (noise.m, noise.seed) == (2.0, 3)
    recon = cfg.recon_settings()
    assert recon.patch_grid == (2, 3)
    assert recon.overlap == 4
    assert cfg.train_settings().epochs == 5
    tuning = cfg.train_settings(finetune=True)
    assert tuning.epochs == 2
    assert cfg.cnn_spec().channels == 8
    spec = cfg.phantom_spec(4)
    assert spec.kind == "bars"
    assert spec.size == (64, 96)
    assert spec.seed == 7


def test_geometry_errors_surface_from_builders():
    cfg = RunConfig.from_mapping({"upsample_factor": 1})
    with pytest.raises(ConfigurationError):
        cfg.optics()
