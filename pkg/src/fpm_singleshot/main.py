"""Application runner for fpm-singleshot.

Every CLI subcommand is a ``run_<name>`` method of :class:`FpmApplication`.
All artifacts go under ``output_dir``::

    phantoms/phantom_###.fpma        complex phantoms (high-res grid)
    stacks/stack_###.fpma            single-LED stacks (n x H x W counts)
    patterns/image_###.fpma          single pattern images (with --checkpoint)
    recon/object_###.fpma            iterative reconstructions, phantom units
    recon/loss_history.csv
    checkpoint/, checkpoint_finetuned/
    predictions/prediction_###.fpma
    report/
    run_state.json, fpm_singleshot.log
"""

from .helpers import set_openmp_env
set_openmp_env()

import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from progress.errors import ConfigurationError, ErrorManager, SizeError
from progress.state import RunState
from progress.ui import Dashboard
from .arrayio import SUFFIX, read_array, write_array
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_CONFIG_PATH, RunConfig
from .helpers import make_rng
from .joint import TrainingExample, finetune, measured_image, noise_robustness, predict_single_shot, train_joint
from .noise import calibrate_noise, simulate_repeats
from .optics import (
    ComplexField,
    ImageStack,
    build_pupil,
    forward_single,
    led_spatial_frequency,
    select_centermost,
    synthetic_passband,
)
from .phantom import bandlimit, generate_phantom, render_training_set
from .recon import passband_error, reconstruct_stack
from . import report


def configure_logging(cfg: RunConfig) -> None:
    """Configure loguru from the flat config keys.

    Supported keys:
      - log_file: path to log file, relative paths go under output_dir
      - log_level: logging level (e.g. 'INFO')
      - log_rotation: rotation string passed to loguru (e.g. '10 MB')
      - log_retention: retention policy for old logs (e.g. '7 days')
    """
    logger.remove()
    add_kwargs = {"rotation": cfg["log_rotation"], "level": cfg["log_level"]}
    if cfg["log_retention"] is not None:
        add_kwargs["retention"] = cfg["log_retention"]
    logger.add(str(cfg.log_path), **add_kwargs)
    logger.add(sys.stderr, level="WARNING")


COMMANDS = ("phantom", "simulate", "calibrate", "reconstruct", "train", "finetune", "predict", "report")


def _index(path: Path) -> int:
    return int(path.stem.rsplit("_", 1)[-1])


def _array_files(path: Path, prefix: str) -> List[Path]:
    """A single array file, or every ``<prefix>_###`` array file in a directory."""
    if path.is_file():
        return [path]
    files = sorted(path.glob(f"{prefix}_*{SUFFIX}")) if path.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no {prefix}_###{SUFFIX} files in {path}")
    return files


class FpmApplication:
    """Main class for the fpm-singleshot application."""

    def __init__(self, config_path: str = DEFAULT_CONFIG_PATH, seed: Optional[int] = None,
                 overrides: Optional[Dict[str, Any]] = None, show_progress: bool = True):
        """Initialize the application with configuration.

        Args:
            config_path: Path to the YAML configuration file
            seed: Overrides the config seed when given
            overrides: Further config values taking precedence over the file
            show_progress: Render the rich dashboard
        """
        self.config = RunConfig.load(config_path).with_overrides(seed=seed, **(overrides or {}))
        self.out_dir = self.config.output_dir
        configure_logging(self.config)
        self.state = RunState.in_directory(str(self.out_dir))
        self.dashboard = Dashboard(self.state, enabled=show_progress)
        self.error_manager = ErrorManager(self.state)
        self.optics = self.config.optics()
        self.leds = select_centermost(self.optics, self.optics.num_leds)
        self.noise = self.config.noise_model()
        logger.info(f"Loaded config {config_path} (seed {self.config['seed']}, output {self.out_dir})")

    # ------------------------------------------------------------------
    # Plumbing
    # ------------------------------------------------------------------

    def run(self, command: str, **kwargs) -> int:
        """Run one subcommand and return the process exit code."""
        if command not in COMMANDS:
            raise ConfigurationError(f"unknown subcommand {command!r}")
        handler: Callable[..., Dict[str, Any]] = getattr(self, f"run_{command}")
        try:
            with self.dashboard:
                self.dashboard.add_stage(command)
                start = datetime.now()
                self.state.update_stage(command, "running", 0.0, start_time=start)
                try:
                    metrics = handler(**kwargs)
                except Exception:
                    self.state.update_stage(command, "failed", 0.0, end_time=datetime.now())
                    raise
                self.state.record_metrics(command, metrics)
                self.dashboard.update_stage(command, "completed", 1.0)
                self.state.update_stage(command, "completed", 1.0, end_time=datetime.now())
        except Exception as exc:
            err = self.error_manager.report_error(exc, command)
            sys.stderr.write(err.one_line() + "\n")
            logger.info(f"Suggestion: {err.suggestion}")
            return err.exit_code
        logger.info(f"{command} completed")
        return 0

    def _dir(self, name: str) -> Path:
        return self.out_dir / name

    def _input(self, given: Optional[str], default: str) -> Path:
        return Path(given) if given else self._dir(default)

    def _load_fields(self, directory: Path, prefix: str) -> Dict[int, ComplexField]:
        files = _array_files(directory, prefix)
        return {_index(p): ComplexField(read_array(p), self.optics.pixel_hi) for p in files}

    def _phantoms_if_present(self) -> Dict[int, ComplexField]:
        try:
            return self._load_fields(self._dir("phantoms"), "phantom")
        except FileNotFoundError:
            return {}

    def _targets(self) -> Dict[int, ComplexField]:
        if self.config["target_mode"] == "pipeline":
            return self._load_fields(self._dir("recon"), "object")
        return self._load_fields(self._dir("phantoms"), "phantom")

    @staticmethod
    def _match(name: str, inputs: Dict[int, Any], targets: Dict[int, ComplexField]) -> List[int]:
        missing = sorted(set(inputs) - set(targets))
        if missing:
            raise SizeError(f"no target for {name} {', '.join(f'{k:03d}' for k in missing)}")
        return sorted(inputs)

    # ------------------------------------------------------------------
    # Subcommands
    # ------------------------------------------------------------------

    def run_phantom(self) -> Dict[str, Any]:
        count = self.config["phantom_count"]
        passband = synthetic_passband(self.optics, self.leds) if self.config["phantom_bandlimit"] else None
        tick = self.dashboard.callback("phantom")
        for k in range(count):
            obj = generate_phantom(self.config.phantom_spec(k))
            if passband is not None:
                obj = bandlimit(obj, passband)
            write_array(self._dir("phantoms") / f"phantom_{k:03d}{SUFFIX}", obj.values)
            tick(k + 1, count)
        logger.info(f"Wrote {count} {self.config['phantom_kind']} phantoms to {self._dir('phantoms')}")
        return {"count": count, "kind": self.config["phantom_kind"], "bandlimited": passband is not None}

    def run_simulate(self, input_path: Optional[str] = None, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        phantoms = self._load_fields(self._input(input_path, "phantoms"), "phantom")
        noise = self.noise if self.config["noise_enabled"] else None
        rng = make_rng(self.config["seed"])
        if checkpoint is None:
            examples = render_training_set(list(phantoms.values()), self.optics, self.leds, noise=noise,
                                           full_scale_counts=self.config["full_scale_counts"], rng=rng)
            for k, ex in zip(phantoms, examples):
                write_array(self._dir("stacks") / f"stack_{k:03d}{SUFFIX}", ex.stack.images)
            return {"stacks": len(examples), "leds": len(self.leds), "noise": noise is not None}

        pattern, _, _ = load_checkpoint(checkpoint)
        examples = render_training_set(list(phantoms.values()), self.optics, self.leds,
                                       full_scale_counts=self.config["full_scale_counts"])
        for k, ex in zip(phantoms, examples):
            image = measured_image(ex, pattern, noise, rng)
            write_array(self._dir("patterns") / f"image_{k:03d}{SUFFIX}", image)
        return {"pattern_images": len(examples), "exposure_ms": pattern.exposure_ms, "noise": noise is not None}

    def run_calibrate(self, input_path: Optional[str] = None) -> Dict[str, Any]:
        if input_path:
            repeats = read_array(input_path)
        else:
            obj = generate_phantom(self.config.phantom_spec(0))
            pupil = build_pupil(self.optics, self.optics.image_size)
            centre = led_spatial_frequency(self.optics, self.leds[0])
            image = forward_single(obj, pupil, centre) * self.config["full_scale_counts"]
            repeats = simulate_repeats(image, self.noise, self.config["calibration_repeats"],
                                       make_rng(self.config["seed"]))
            write_array(self._dir("calibration") / f"repeats{SUFFIX}", repeats)
        cal = calibrate_noise(repeats)
        return {"slope": cal.slope, "m": cal.m, "pixels": cal.pixels, "frames": int(repeats.shape[0]),
                "configured_m": self.config["noise_m"]}

    def run_reconstruct(self, input_path: Optional[str] = None) -> Dict[str, Any]:
        files = _array_files(self._input(input_path, "stacks"), "stack")
        settings = self.config.recon_settings()
        counts = self.config["full_scale_counts"]
        phantoms = self._phantoms_if_present()
        passband = synthetic_passband(self.optics, self.leds) if phantoms else None
        frames, errors = [], {}
        final_losses = []
        for path in files:
            k = _index(path)
            stack = ImageStack(read_array(path))
            result = reconstruct_stack(stack, self.optics, settings, self.leds, workers=self.config["workers"],
                                       progress=self.dashboard.callback(f"reconstruct {k:03d}"))
            obj = ComplexField(result.object.values / np.sqrt(counts), result.object.pitch)
            write_array(self._dir("recon") / f"object_{k:03d}{SUFFIX}", obj.values)
            for p, patch in enumerate(result.patches):
                write_array(self._dir("recon") / f"pupil_phase_{k:03d}_p{p:02d}{SUFFIX}", patch.pupil.phase)
            frame = report.loss_frame(result.loss_histories)
            frame.insert(0, "stack", k)
            frames.append(frame)
            final_losses.append(float(np.mean([h[-1] for h in result.loss_histories])))
            if k in phantoms and phantoms[k].shape == obj.shape:
                errors[f"passband_error_{k:03d}"] = passband_error(obj, phantoms[k], passband)
        pd.concat(frames, ignore_index=True).to_csv(self._dir("recon") / "loss_history.csv", index=False)

        metrics: Dict[str, Any] = {"stacks": len(files), "patches": settings.patch_grid[0] * settings.patch_grid[1],
                                   "final_loss_mean": float(np.mean(final_losses))}
        metrics.update(errors)
        if errors:
            metrics["passband_error_max"] = max(errors.values())
        report.write_metrics(self._dir("recon") / "metrics.txt", {"reconstruct": metrics})
        return metrics

    def run_train(self, input_path: Optional[str] = None) -> Dict[str, Any]:
        stacks = {_index(p): ImageStack(read_array(p))
                  for p in _array_files(self._input(input_path, "stacks"), "stack")}
        targets = self._targets()
        clean = self._phantoms_if_present()
        dataset = [TrainingExample(target=targets[k], stack=stacks[k], clean=clean.get(k))
                   for k in self._match("stack", stacks, targets)]
        settings = self.config.train_settings()
        result = train_joint(dataset, self.optics, self.noise, settings, cnn=self.config.cnn_spec(),
                             progress=self.dashboard.callback("train"))
        save_checkpoint(str(self._dir("checkpoint")), result.pattern, result.model,
                        extra={"target_mode": self.config["target_mode"], "seed": settings.seed})
        result.history.to_frame().to_csv(self._dir("train_history.csv"), index=False)
        return {"examples": len(dataset), "steps": len(result.history.step_losses),
                "first_loss": result.history.step_losses[0], "final_epoch_loss": result.history.epoch_losses[-1],
                "exposure_ms": result.pattern.exposure_ms, "parameters": result.model.parameter_count}

    def run_finetune(self, input_path: Optional[str] = None, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        pattern, model, _ = load_checkpoint(checkpoint or str(self._dir("checkpoint")))
        images = {_index(p): read_array(p) for p in _array_files(self._input(input_path, "patterns"), "image")}
        targets = self._targets()
        measured = [TrainingExample(target=targets[k], image=images[k])
                    for k in self._match("pattern image", images, targets)]
        tuned = finetune(measured, pattern, model, self.config.train_settings(finetune=True),
                         progress=self.dashboard.callback("finetune"))
        save_checkpoint(str(self._dir("checkpoint_finetuned")), pattern, tuned,
                        extra={"finetuned_on": len(measured)})
        return {"examples": len(measured), "epochs": self.config["finetune_epochs"]}

    def _default_checkpoint(self) -> str:
        tuned = self._dir("checkpoint_finetuned")
        return str(tuned if tuned.is_dir() else self._dir("checkpoint"))

    def run_predict(self, input_path: Optional[str] = None, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        _, model, _ = load_checkpoint(checkpoint or self._default_checkpoint())
        files = _array_files(self._input(input_path, "patterns"), "image")
        phantoms = self._phantoms_if_present()
        predictions: Dict[int, ComplexField] = {}
        for path in files:
            k = _index(path)
            predictions[k] = predict_single_shot(read_array(path), model)
            write_array(self._dir("predictions") / f"prediction_{k:03d}{SUFFIX}", predictions[k].values)
        metrics: Dict[str, Any] = {"predictions": len(predictions)}
        scored = [k for k in predictions if k in phantoms and phantoms[k].shape == predictions[k].shape]
        if scored:
            metrics["mse_mean"] = float(np.mean([np.mean(np.abs(predictions[k].values - phantoms[k].values) ** 2)
                                                 for k in scored]))
        try:
            recon = self._load_fields(self._dir("recon"), "object")
        except FileNotFoundError:
            recon = {}
        robust = [k for k in scored if k in recon]
        if robust:
            metrics["noise_robustness"] = noise_robustness([predictions[k] for k in robust],
                                                           [recon[k] for k in robust],
                                                           [phantoms[k] for k in robust])
        return metrics

    def run_report(self) -> Dict[str, Any]:
        out = self._dir("report")
        report.print_plan(report.survey(self.optics, self.leds), console=self.dashboard.console)
        written: List[Path] = []
        for sub, prefix in (("recon", "object"), ("predictions", "prediction")):
            directory = self._dir(sub)
            if directory.is_dir():
                for path in sorted(directory.glob(f"{prefix}_*{SUFFIX}")):
                    field = ComplexField(read_array(path), self.optics.pixel_hi)
                    written.extend(report.export_field(field, out, path.stem))
        stacks = self._dir("stacks")
        if stacks.is_dir():
            for path in sorted(stacks.glob(f"stack_*{SUFFIX}")):
                written.append(report.export_brightfield(ImageStack(read_array(path)), out, path.stem))
        history = self._dir("recon") / "loss_history.csv"
        if history.is_file():
            # mean over patches, one curve per stack
            mean_loss = (pd.read_csv(history).set_index(["stack", "step"]).mean(axis=1).unstack("stack")
                         .rename(columns=lambda s: f"stack_{int(s):03d}").reset_index())
            written.append(report.plot_loss_histories(mean_loss, out / "recon_loss.png", "Reconstruction loss"))
        train_history = self._dir("train_history.csv")
        if train_history.is_file():
            frame = pd.read_csv(train_history)[["step", "loss"]]
            written.append(report.plot_loss_histories(frame, out / "train_loss.png", "Joint training loss"))
        for name in ("checkpoint_finetuned", "checkpoint"):
            if (self._dir(name) / "manifest.json").is_file():
                pattern, _, _ = load_checkpoint(str(self._dir(name)))
                written.append(report.plot_pattern(pattern, self.leds, out / "pattern.png"))
                break
        metrics = dict(self.state.get_metrics())
        run_summary: Dict[str, Any] = {"errors": len(self.state.events("error"))}
        for name in COMMANDS:
            if name != "report":
                run_summary[f"stage_{name}"] = self.state.get_stage_status(name).get("status", "not run")
        metrics["run"] = run_summary
        report.write_metrics(out / "metrics.txt", metrics)
        report.print_metrics(metrics, console=self.dashboard.console)
        return {"files": len(written) + 1}
