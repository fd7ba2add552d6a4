#!/usr/bin/env python3
"""
Run summaries: metrics text, loss and pattern plots, 16-bit field images.
"""

from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402
from rich import box  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.table import Table  # noqa: E402

from progress.errors import SizeError  # noqa: E402
from .arrayio import export_uint16, scale_to_uint16  # noqa: E402
from .optics import (  # noqa: E402
    ComplexField,
    IlluminationPattern,
    ImageStack,
    LedSet,
    OpticsConfig,
    brightfield_image,
    illumination_na,
    max_illumination_na,
)


def survey(cfg: OpticsConfig, leds: LedSet) -> Dict[str, Any]:
    """Geometry summary of an optics configuration."""
    na_ill = max_illumination_na(cfg, leds)
    brightfield = sum(1 for led in leds if illumination_na(cfg, led) <= cfg.objective_na)
    return {
        "leds": len(leds),
        "brightfield_leds": brightfield,
        "pixel_lo_um": cfg.pixel_lo,
        "pixel_hi_um": cfg.pixel_hi,
        "cutoff_per_um": cfg.cutoff,
        "illumination_na": na_ill,
        "synthetic_na": cfg.objective_na + na_ill,
        "required_upsample": cfg.required_upsample(),
        "upsample_factor": cfg.upsample_factor,
        "image_size": list(cfg.image_size),
        "hi_shape": list(cfg.hi_shape),
    }


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return " x ".join(_fmt(v) for v in value)
    return str(value)


def flatten_metrics(metrics: Mapping[str, Mapping[str, Any]]) -> List[str]:
    """``stage.key: value`` lines, sorted by stage then key."""
    lines = []
    for stage in sorted(metrics):
        for key in sorted(metrics[stage]):
            lines.append(f"{stage}.{key}: {_fmt(metrics[stage][key])}")
    return lines


def write_metrics(path: Path, metrics: Mapping[str, Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(flatten_metrics(metrics)) + "\n", encoding="utf-8")
    logger.info(f"Wrote metrics summary to {path}")
    return path


def print_plan(sv: Dict[str, Any], console: Console = None) -> None:
    console = console or Console()
    tbl = Table(title="Optics Geometry", box=box.SIMPLE_HEAVY)
    tbl.add_column("Field", style="bold")
    tbl.add_column("Value")
    tbl.add_row("LEDs (brightfield)", f"{sv['leds']} ({sv['brightfield_leds']})")
    tbl.add_row("Low-res pixel (um)", f"{sv['pixel_lo_um']:.4f}")
    tbl.add_row("High-res pixel (um)", f"{sv['pixel_hi_um']:.4f}")
    tbl.add_row("Illumination NA", f"{sv['illumination_na']:.4f}")
    tbl.add_row("Synthetic NA", f"{sv['synthetic_na']:.4f}")
    tbl.add_row("Upsampling (required)", f"{sv['upsample_factor']} ({sv['required_upsample']})")
    tbl.add_row("Grid lo -> hi", f"{_fmt(sv['image_size'])} -> {_fmt(sv['hi_shape'])}")
    console.print(tbl)


def print_metrics(metrics: Mapping[str, Mapping[str, Any]], console: Console = None) -> None:
    console = console or Console()
    tbl = Table(title="Run Metrics", box=box.SIMPLE_HEAVY)
    tbl.add_column("Stage", style="bold")
    tbl.add_column("Metric")
    tbl.add_column("Value")
    for stage in sorted(metrics):
        for key in sorted(metrics[stage]):
            tbl.add_row(stage, key, _fmt(metrics[stage][key]))
    if not metrics:
        tbl.add_row("n/a", "no metrics recorded", "")
    console.print(tbl)


def export_brightfield(stack: ImageStack, out_dir: Path, stem: str) -> Path:
    """Sum of every single-LED image, the conventional widefield comparison."""
    image = brightfield_image(stack)
    return export_uint16(Path(out_dir) / f"{stem}_brightfield.tif", image, scale=scale_to_uint16(image))


def export_field(field: ComplexField, out_dir: Path, stem: str) -> List[Path]:
    """Amplitude (scaled to full range) and phase ([-pi, pi] mapped to [0, 65535]) TIFFs."""
    out_dir = Path(out_dir)
    amplitude = field.amplitude
    phase = (field.phase + np.pi) / (2.0 * np.pi)
    return [
        export_uint16(out_dir / f"{stem}_amplitude.tif", amplitude, scale=scale_to_uint16(amplitude)),
        export_uint16(out_dir / f"{stem}_phase.tif", np.clip(phase, 0.0, 1.0), scale=65535.0),
    ]


def plot_loss_histories(frame: pd.DataFrame, path: Path, title: str = "Loss") -> Path:
    """Plot every numeric non-step column against ``step`` on a log scale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    columns = [c for c in frame.columns if c != "step" and pd.api.types.is_numeric_dtype(frame[c])]
    for col in columns:
        ax.plot(frame["step"], frame[col], label=str(col), linewidth=1)
    positive = frame[columns].to_numpy() if columns else np.zeros(0)
    if positive.size and np.all(positive[np.isfinite(positive)] > 0):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if 1 < len(columns) <= 16:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Wrote loss plot to {path}")
    return path


def plot_pattern(pattern: IlluminationPattern, leds: LedSet, path: Path) -> Path:
    """LED weights drawn at their lattice positions."""
    if len(pattern) != len(leds):
        raise SizeError(f"pattern has {len(pattern)} weights for {len(leds)} LEDs")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xy = np.array(leds.offsets, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    sc = ax.scatter(xy[:, 0], xy[:, 1], c=pattern.weights, cmap="viridis", vmin=0.0, vmax=1.0, s=120)
    fig.colorbar(sc, ax=ax, label="weight")
    ax.set_aspect("equal")
    ax.set_xlabel("LED column offset")
    ax.set_ylabel("LED row offset")
    ax.set_title(f"Pattern, exposure {pattern.exposure_ms:.0f} ms")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Wrote pattern plot to {path}")
    return path


def loss_frame(histories: Sequence[np.ndarray]) -> pd.DataFrame:
    """One column per patch history, indexed by iteration."""
    frame = pd.DataFrame({f"patch_{k:02d}": np.asarray(h) for k, h in enumerate(histories)})
    frame.insert(0, "step", np.arange(1, len(frame) + 1))
    return frame
