"""Iterative reconstruction of a high-resolution complex object from an LED stack.

The object's real and imaginary pixels (and optionally the pupil phase) are
fitted by Adam to the amplitude loss ``sum (sqrt(I) - sqrt(I_sim))**2``.
Large fields are split into overlapping patches that are solved
independently on a thread pool and blended back with linear ramps.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger

from progress.errors import ConfigurationError, DomainError, NumericError, SizeError
from .diffcore import AdamState, DiffGraph, adam_step, backward, fft2c, guarded_sqrt
from .helpers import as_real_tensor, to_numpy, torch_threads, worker_count
from .optics import (
    ComplexField,
    ImageStack,
    LedSet,
    OpticsConfig,
    Pupil,
    build_pupil,
    check_window,
    led_spatial_frequency,
    shift_bins,
    stack_intensity,
    window_indices,
)

ProgressCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class ReconSettings:
    learning_rate: float = 0.2
    iterations: int = 3000
    patch_grid: Tuple[int, int] = (4, 4)
    overlap: int = 8
    pupil_phase_learning: bool = True
    background_window: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_grid", tuple(int(g) for g in self.patch_grid))
        if not self.learning_rate > 0:
            raise ConfigurationError(f"recon learning rate must be > 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise ConfigurationError(f"recon iterations must be >= 1, got {self.iterations}")
        if self.overlap < 0:
            raise ConfigurationError(f"patch overlap must be >= 0, got {self.overlap}")
        if len(self.patch_grid) != 2 or min(self.patch_grid) < 1:
            raise ConfigurationError(f"patch_grid must be two positive integers, got {self.patch_grid}")
        if self.background_window < 0:
            raise ConfigurationError(f"background_window must be >= 0, got {self.background_window}")


@dataclass
class PatchResult:
    object: ComplexField
    pupil: Pupil
    loss_history: np.ndarray


@dataclass
class PatchLayout:
    """Low-res bounds of every patch, row-major over the patch grid."""
    shape: Tuple[int, int]
    grid: Tuple[int, int]
    overlap: int
    row_spans: List[Tuple[int, int]]
    col_spans: List[Tuple[int, int]]

    @property
    def spans(self) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
        return [(r, c) for r in self.row_spans for c in self.col_spans]

    def __len__(self) -> int:
        return len(self.row_spans) * len(self.col_spans)


@dataclass
class ReconResult:
    object: ComplexField
    layout: PatchLayout
    patches: List[PatchResult] = field(default_factory=list)

    @property
    def loss_histories(self) -> List[np.ndarray]:
        return [p.loss_history for p in self.patches]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def estimate_background(stack: ImageStack, window: int) -> np.ndarray:
    """Per-image mean of the darkest of the four corner windows."""
    h, w = stack.shape
    if not 1 <= window <= min(h, w):
        raise ConfigurationError(f"background window {window} does not fit images of shape {stack.shape}")
    corners = [
        stack.images[:, :window, :window],
        stack.images[:, :window, w - window:],
        stack.images[:, h - window:, :window],
        stack.images[:, h - window:, w - window:],
    ]
    means = np.stack([c.mean(axis=(1, 2)) for c in corners], axis=1)
    return means.min(axis=1)


def subtract_background(stack: ImageStack, background: Union[float, np.ndarray]) -> ImageStack:
    """max(I - background, 0), with a scalar, per-image scalar, image or per-image image."""
    bg = np.asarray(background, dtype=np.float64)
    if np.any(bg < 0):
        raise DomainError("background must be >= 0")
    n, h, w = stack.images.shape
    if bg.ndim == 0:
        full = bg
    elif bg.shape == (n,):
        full = bg[:, None, None]
    elif bg.shape in ((h, w), (n, h, w)):
        full = bg
    else:
        raise SizeError(f"background of shape {bg.shape} does not match a stack of shape {stack.images.shape}")
    return stack.with_images(np.maximum(stack.images - full, 0.0))


def average_stacks(stacks: Sequence[ImageStack]) -> ImageStack:
    """Per-pixel mean of repeated stacks of the same field."""
    if not stacks:
        raise SizeError("no stacks to average")
    first = stacks[0]
    for s in stacks[1:]:
        if s.images.shape != first.images.shape or s.led_index != first.led_index:
            raise SizeError("stacks to average must have identical shape and LED order")
    return first.with_images(np.mean([s.images for s in stacks], axis=0))


def init_object(stack: ImageStack, f: int, pixel_lo: float = 1.0) -> ComplexField:
    """sqrt of the mean image, replicated f x f, zero phase."""
    if len(stack) == 0:
        raise SizeError("cannot initialise from an empty stack")
    amplitude = np.sqrt(stack.images.mean(axis=0))
    upsampled = np.repeat(np.repeat(amplitude, f, axis=0), f, axis=1)
    return ComplexField(upsampled.astype(np.complex128), pixel_lo / f)


def _as_images(x) -> Union[np.ndarray, torch.Tensor]:
    if isinstance(x, ImageStack):
        return x.images
    return x


def amplitude_loss(measured, simulated):
    """Sum over images and pixels of (sqrt(I) - sqrt(I_sim))**2.

    Returns a float for array inputs and a differentiable scalar tensor when
    either input is a tensor.
    """
    a = _as_images(measured)
    b = _as_images(simulated)
    differentiable = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    a_t, b_t = as_real_tensor(a), as_real_tensor(b)
    if tuple(a_t.shape) != tuple(b_t.shape):
        raise SizeError(f"measured {tuple(a_t.shape)} and simulated {tuple(b_t.shape)} differ in shape")
    if bool((a_t.detach() < 0).any()) or bool((b_t.detach() < 0).any()):
        raise DomainError("amplitude loss needs intensities >= 0")
    loss = torch.sum((guarded_sqrt(a_t) - guarded_sqrt(b_t)) ** 2)
    return loss if differentiable else float(loss)


# ---------------------------------------------------------------------------
# Single patch solver
# ---------------------------------------------------------------------------

class _PupilGauge:
    """Removes piston and tilt of the pupil phase over its support."""

    def __init__(self, support: np.ndarray):
        rows, cols = np.nonzero(support)
        h, w = support.shape
        design = np.stack([np.ones(rows.size), rows - h // 2, cols - w // 2], axis=1).astype(np.float64)
        self.mask = torch.as_tensor(support)
        self.design = torch.as_tensor(design)
        self.pinv = torch.as_tensor(np.linalg.pinv(design))

    def apply(self, phase: torch.Tensor) -> None:
        with torch.no_grad():
            values = phase[self.mask]
            residual = values - self.design @ (self.pinv @ values)
            cleaned = torch.zeros_like(phase)
            cleaned[self.mask] = residual
            phase.copy_(cleaned)


def reconstruct_patch(stack: ImageStack, cfg: OpticsConfig, settings: ReconSettings, leds: LedSet,
                      progress: Optional[ProgressCallback] = None) -> PatchResult:
    """Adam on the object (and pupil phase) minimising the amplitude loss.

    Args:
        stack: Background-corrected single-LED images; ``led_index`` points into ``leds``
        cfg: Optics configuration
        settings: Learning rate, iteration count and pupil learning flag
        leds: LED set the stack was recorded with
        progress: Optional ``callback(done, total)``

    Returns:
        PatchResult with the final object, pupil and per-iteration loss
    """
    f = cfg.upsample_factor
    lo_shape = tuple(stack.shape)
    hi_shape = (lo_shape[0] * f, lo_shape[1] * f)
    pupil0 = build_pupil(cfg, lo_shape)
    offsets = []
    for k in stack.led_index:
        offset = shift_bins(led_spatial_frequency(cfg, leds[k]), hi_shape, cfg.pixel_hi)
        check_window(offset, lo_shape, hi_shape)
        offsets.append(offset)
    indices = window_indices(offsets, lo_shape, hi_shape)

    graph = DiffGraph()
    obj = graph.leaf("object", init_object(stack, f, cfg.pixel_lo).values)
    amplitude = torch.as_tensor(pupil0.amplitude)
    names = ["object"]
    gauge = None
    if settings.pupil_phase_learning:
        phase = graph.leaf("pupil_phase", pupil0.phase)
        names.append("pupil_phase")
        gauge = _PupilGauge(pupil0.support)
    else:
        phase = torch.as_tensor(pupil0.phase)
    params = [graph.leaves[n] for n in names]
    adam = AdamState(params, lr=settings.learning_rate)

    measured = as_real_tensor(stack.images)
    if bool((measured < 0).any()):
        raise DomainError("amplitude loss needs intensities >= 0")
    sqrt_measured = guarded_sqrt(measured)

    history = np.empty(settings.iterations)
    report_every = max(1, settings.iterations // 100)
    for it in range(settings.iterations):
        transfer = amplitude * torch.exp(1j * phase)
        simulated = stack_intensity(fft2c(obj), transfer, indices)
        loss = torch.sum((sqrt_measured - guarded_sqrt(simulated)) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericError(f"reconstruction loss became {value} at iteration {it}", iteration=it)
        try:
            grads = backward(graph, loss)
        except NumericError as exc:
            raise NumericError(exc.message, op=exc.op, iteration=it) from exc
        adam_step(params, [grads[n] for n in names], adam)
        if gauge is not None:
            gauge.apply(phase)
        history[it] = value
        if it == 0 or (it + 1) % 500 == 0:
            logger.debug(f"patch {lo_shape}: iteration {it + 1}/{settings.iterations} loss {value:.6g}")
        if progress is not None and ((it + 1) % report_every == 0 or it + 1 == settings.iterations):
            progress(it + 1, settings.iterations)

    pupil = Pupil(pupil0.amplitude, to_numpy(phase).copy())
    return PatchResult(ComplexField(to_numpy(obj).copy(), cfg.pixel_hi), pupil, history)


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def _axis_spans(n: int, g: int, overlap: int) -> List[Tuple[int, int]]:
    if g > n:
        raise ConfigurationError(f"cannot split {n} pixels into {g} patches")
    bounds = [k * n // g for k in range(g + 1)]
    core = min(bounds[k + 1] - bounds[k] for k in range(g))
    if g > 1 and overlap >= core:
        raise ConfigurationError(f"patch overlap {overlap} must be smaller than the patch size {core}")
    spans = []
    for k in range(g):
        start = bounds[k] - overlap // 2 if k > 0 else 0
        end = bounds[k + 1] + (overlap - overlap // 2) if k < g - 1 else n
        spans.append((start, end))
    return spans


def patch_layout(shape: Tuple[int, int], grid: Tuple[int, int], overlap: int) -> PatchLayout:
    """Split an image of ``shape`` into ``grid`` patches sharing ``overlap`` pixels."""
    return PatchLayout(tuple(shape), tuple(grid), overlap,
                       _axis_spans(shape[0], grid[0], overlap),
                       _axis_spans(shape[1], grid[1], overlap))


def split_patches(stack: ImageStack, settings: ReconSettings) -> List[ImageStack]:
    layout = patch_layout(stack.shape, settings.patch_grid, settings.overlap)
    return [stack.with_images(stack.images[:, r0:r1, c0:c1]) for (r0, r1), (c0, c1) in layout.spans]


def split_field(obj: ComplexField, layout: PatchLayout) -> List[ComplexField]:
    """Cut a hi-res field along a low-res layout."""
    f = obj.shape[0] // layout.shape[0]
    return [ComplexField(obj.values[r0 * f:r1 * f, c0 * f:c1 * f], obj.pitch)
            for (r0, r1), (c0, c1) in layout.spans]


def _axis_weights(spans: List[Tuple[int, int]], f: int) -> List[np.ndarray]:
    weights = []
    for k, (start, end) in enumerate(spans):
        w = np.ones((end - start) * f)
        if k > 0:
            ov = (spans[k - 1][1] - start) * f
            w[:ov] = (np.arange(ov) + 0.5) / ov
        if k < len(spans) - 1:
            ov = (end - spans[k + 1][0]) * f
            w[w.size - ov:] = 1.0 - (np.arange(ov) + 0.5) / ov
        weights.append(w)
    return weights


def blend_weights(layout: PatchLayout, f: int = 1) -> List[np.ndarray]:
    """2-D linear-ramp weights of every patch on the f-times finer grid."""
    rows = _axis_weights(layout.row_spans, f)
    cols = _axis_weights(layout.col_spans, f)
    return [np.outer(wr, wc) for wr in rows for wc in cols]


def merge_patches(patches: Sequence[ComplexField], layout: PatchLayout) -> ComplexField:
    """Blend hi-res patches with weights that sum to one at every pixel."""
    if len(patches) != len(layout):
        raise SizeError(f"got {len(patches)} patches for a layout of {len(layout)}")
    (r0, r1), (c0, c1) = layout.spans[0]
    f = patches[0].shape[0] // (r1 - r0)
    for p, ((r0, r1), (c0, c1)) in zip(patches, layout.spans):
        if p.shape != ((r1 - r0) * f, (c1 - c0) * f):
            raise SizeError(f"patch of shape {p.shape} does not match its layout span")
    out = np.zeros((layout.shape[0] * f, layout.shape[1] * f), dtype=np.complex128)
    total = np.zeros(out.shape)
    for p, w, ((r0, r1), (c0, c1)) in zip(patches, blend_weights(layout, f), layout.spans):
        out[r0 * f:r1 * f, c0 * f:c1 * f] += w * p.values
        total[r0 * f:r1 * f, c0 * f:c1 * f] += w
    return ComplexField(out / total, patches[0].pitch)


# ---------------------------------------------------------------------------
# Full field
# ---------------------------------------------------------------------------

def reconstruct_stack(stack: ImageStack, cfg: OpticsConfig, settings: ReconSettings, leds: LedSet,
                      workers: int = 0, progress: Optional[ProgressCallback] = None) -> ReconResult:
    """Background subtraction, patch split, parallel patch solves and merge."""
    if settings.background_window > 0:
        stack = subtract_background(stack, estimate_background(stack, settings.background_window))
    layout = patch_layout(stack.shape, settings.patch_grid, settings.overlap)
    sub_stacks = split_patches(stack, settings)
    n_workers = min(worker_count(workers), len(sub_stacks))
    total = settings.iterations * len(sub_stacks)
    done = [0] * len(sub_stacks)

    def _solve(k: int) -> PatchResult:
        def _tick(step: int, _total: int) -> None:
            done[k] = step
            if progress is not None:
                progress(sum(done), total)
        return reconstruct_patch(sub_stacks[k], cfg, settings, leds, progress=_tick)

    logger.info(f"Reconstructing {len(sub_stacks)} patch(es) of a {stack.shape} stack "
                f"with {n_workers} worker(s), {settings.iterations} iterations each")
    if n_workers > 1:
        with torch_threads(1), ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_solve, range(len(sub_stacks))))
    else:
        results = [_solve(k) for k in range(len(sub_stacks))]
    merged = merge_patches([r.object for r in results], layout)
    return ReconResult(merged, layout, results)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def passband_error(recon: ComplexField, truth: ComplexField, passband: np.ndarray) -> float:
    """Relative spectral L2 error inside ``passband`` after removing the global phase."""
    if recon.shape != truth.shape or passband.shape != recon.shape:
        raise SizeError(f"recon {recon.shape}, truth {truth.shape} and passband {passband.shape} differ")
    r = to_numpy(fft2c(torch.as_tensor(recon.values)))[passband]
    t = to_numpy(fft2c(torch.as_tensor(truth.values)))[passband]
    norm = np.linalg.norm(t)
    if norm == 0:
        raise DomainError("truth has no energy inside the passband")
    inner = np.vdot(r, t)
    rotation = inner / abs(inner) if abs(inner) > 0 else 1.0
    return float(np.linalg.norm(r * rotation - t) / norm)


def contrast_dip(profile: np.ndarray, bar_a: int, bar_b: int) -> float:
    """max(0, 1 - I_mid / mean(I_a, I_b)), I_mid the minimum strictly between the bars."""
    profile = np.asarray(profile, dtype=np.float64)
    a, b = sorted((bar_a, bar_b))
    if b - a < 2:
        return 0.0
    peak = 0.5 * (profile[a] + profile[b])
    if peak <= 0:
        return 0.0
    return max(0.0, 1.0 - profile[a + 1:b].min() / peak)
