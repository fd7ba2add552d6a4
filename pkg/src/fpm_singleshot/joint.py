"""Joint training of the LED pattern and the CNN, fine-tuning and single-shot prediction.

One training step emulates the pattern image ε Σ c_l I_l from each example's
single-LED stack, runs it through the sensor noise emulation, feeds the
exposure-compensated image to the CNN and minimises

    mean|Δ|² + w_g Σ_d mean|∂_d Δ|²,    Δ = prediction - target

with Adam over the CNN parameters, the LED weights c_l and the exposure ε.
After every step c_l and ε are projected back into [0, 1].
"""

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger

from progress.errors import ConfigurationError, NumericError, SizeError
from .diffcore import AdamState, DiffGraph, abs2, adam_step, backward, forward_difference, project_box
from .helpers import as_complex_tensor, deterministic_torch, make_rng, to_numpy
from .network import CnnModel, CnnSpec
from .noise import NoiseDraws, NoiseModel, simulate_measurement
from .optics import (
    FULL_EXPOSURE_MS,
    ComplexField,
    IlluminationPattern,
    ImageStack,
    OpticsConfig,
    pattern_image,
)

PATTERN_INIT_MS = 200.0
EXPOSURE_FLOOR = 1e-3

ProgressCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-3
    pattern_learning_rate: float = 1e-2
    seed: int = 0
    gradient_weight: float = 1.0
    train_pattern: bool = True
    noise_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be >= 1")
        if not self.learning_rate > 0 or not self.pattern_learning_rate > 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.gradient_weight < 0:
            raise ConfigurationError(f"gradient weight must be >= 0, got {self.gradient_weight}")


@dataclass
class TrainingExample:
    """A stack (joint training) or a single pattern image (fine-tuning) and its target."""
    target: ComplexField
    stack: Optional[ImageStack] = None
    image: Optional[np.ndarray] = None
    clean: Optional[ComplexField] = None


@dataclass
class TrainHistory:
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    weights_trace: List[np.ndarray] = field(default_factory=list)
    exposure_trace: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"step": np.arange(1, len(self.step_losses) + 1), "loss": self.step_losses})
        if self.exposure_trace:
            frame["exposure_ms"] = self.exposure_trace
        return frame


@dataclass
class JointResult:
    pattern: IlluminationPattern
    model: CnnModel
    history: TrainHistory


@dataclass
class PatternComparison:
    seeds: List[int]
    trained: List[float]
    frozen: List[float]

    @property
    def median_trained(self) -> float:
        return float(np.median(self.trained))

    @property
    def median_frozen(self) -> float:
        return float(np.median(self.frozen))

    @property
    def trained_better(self) -> bool:
        return self.median_trained < self.median_frozen


def init_pattern(seed: int, n: int = 69) -> IlluminationPattern:
    """Uniform[0, 1] LED weights and a 200 ms exposure."""
    rng = make_rng(seed)
    return IlluminationPattern(rng.random(n), PATTERN_INIT_MS)


def _field_tensor(x) -> torch.Tensor:
    if isinstance(x, ComplexField):
        return as_complex_tensor(x.values)
    if isinstance(x, torch.Tensor):
        return x
    return as_complex_tensor(x)


def training_objective(pred, truth, w_g: float = 1.0):
    """mean|Δ|² + w_g Σ_d mean|∂_d Δ|² over the last two axes.

    Returns a float for array inputs and a differentiable scalar tensor when
    either input is a tensor.
    """
    differentiable = isinstance(pred, torch.Tensor) or isinstance(truth, torch.Tensor)
    p, t = _field_tensor(pred), _field_tensor(truth)
    if tuple(p.shape) != tuple(t.shape):
        raise SizeError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ in shape")
    delta = p - t
    loss = torch.mean(abs2(delta))
    if w_g:
        for dim in (-2, -1):
            loss = loss + w_g * torch.mean(abs2(forward_difference(delta, dim)))
    return loss if differentiable else float(loss)


def _stack_batch(examples: Sequence[TrainingExample], n_leds: int) -> Tuple[torch.Tensor, torch.Tensor]:
    if not examples:
        raise SizeError("training set is empty")
    stacks, targets = [], []
    for k, ex in enumerate(examples):
        if ex.stack is None or len(ex.stack) != n_leds:
            got = "no stack" if ex.stack is None else f"{len(ex.stack)} images"
            raise SizeError(f"example {k} needs a full {n_leds}-image stack, got {got}")
        stacks.append(ex.stack.images)
        targets.append(ex.target.values)
    stacks_t = torch.as_tensor(np.stack(stacks))
    return stacks_t, torch.as_tensor(np.stack(targets))


def _input_scale(stacks: torch.Tensor) -> float:
    # half of the mean all-LED image, matching the mean of uniform weights
    scale = 0.5 * float(stacks.sum(dim=1).mean())
    return scale if scale > 0 else 1.0


def _batches(rng: np.random.Generator, n: int, size: int) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[k:k + size] for k in range(0, n, size)]


def train_joint(dataset: Sequence[TrainingExample], cfg: OpticsConfig, noise: NoiseModel,
                settings: TrainSettings, cnn: Optional[CnnSpec] = None,
                pattern: Optional[IlluminationPattern] = None,
                progress: Optional[ProgressCallback] = None) -> JointResult:
    """Adam over the CNN, the LED weights and the exposure.

    Args:
        dataset: Examples carrying full single-LED stacks and targets
        cfg: Optics configuration (LED count, upsampling)
        noise: Sensor noise model; used when ``settings.noise_enabled``
        settings: Epochs, batch size, learning rates and seed
        cnn: Architecture; defaults to CnnSpec with cfg's upsampling
        pattern: Initial pattern; ``init_pattern(settings.seed)`` when omitted
        progress: Optional ``callback(done, total)``

    Returns:
        JointResult with the projected final pattern, the trained model and
        the loss history
    """
    stacks, targets = _stack_batch(dataset, cfg.num_leds)
    cnn = cnn or CnnSpec(upsample_factor=cfg.upsample_factor)
    if targets.shape[-2] != stacks.shape[-2] * cnn.upsample_factor:
        raise SizeError(f"targets {tuple(targets.shape[-2:])} do not match x{cnn.upsample_factor} "
                        f"upsampling of images {tuple(stacks.shape[-2:])}")
    rng = make_rng(settings.seed + 1)
    if pattern is None:
        pattern = init_pattern(settings.seed, cfg.num_leds)
    if len(pattern) != cfg.num_leds:
        raise SizeError(f"pattern has {len(pattern)} weights for {cfg.num_leds} LEDs")
    model = CnnModel(cnn, seed=settings.seed)
    base_scale = _input_scale(stacks)

    graph = DiffGraph()
    model_names = []
    for name, p in model.named_parameters():
        graph.watch(f"cnn.{name}", p)
        model_names.append(f"cnn.{name}")
    model_adam = AdamState(list(model.parameters()), lr=settings.learning_rate)
    if settings.train_pattern:
        weights = graph.leaf("pattern.weights", pattern.weights)
        epsilon = graph.leaf("pattern.epsilon", np.float64(pattern.epsilon))
        pattern_adam = AdamState([weights, epsilon], lr=settings.pattern_learning_rate)
    else:
        weights = torch.as_tensor(pattern.weights.copy())
        epsilon = torch.tensor(pattern.epsilon, dtype=torch.float64)

    history = TrainHistory()
    n = stacks.shape[0]
    steps_per_epoch = -(-n // settings.batch_size)
    total = settings.epochs * steps_per_epoch
    step = 0
    logger.info(f"Joint training on {n} examples: {settings.epochs} epochs x {steps_per_epoch} steps, "
                f"pattern {'trained' if settings.train_pattern else 'frozen'}")
    with deterministic_torch():
        for epoch in range(settings.epochs):
            epoch_losses = []
            for idx in _batches(rng, n, settings.batch_size):
                index = torch.as_tensor(idx)
                images = epsilon * torch.einsum("l,blhw->bhw", weights, stacks[index])
                if settings.noise_enabled:
                    images = simulate_measurement(images, noise, NoiseDraws.sample(rng, tuple(images.shape)))
                divisor = torch.clamp(epsilon, min=EXPOSURE_FLOOR) * base_scale
                pred = model.predict_field(images, divisor)
                loss = training_objective(pred, targets[index], settings.gradient_weight)
                try:
                    grads = backward(graph, loss)
                except NumericError as exc:
                    raise NumericError(exc.message, op=exc.op, iteration=step) from exc
                adam_step(list(model.parameters()), [grads[k] for k in model_names], model_adam)
                if settings.train_pattern:
                    adam_step([weights, epsilon], [grads["pattern.weights"], grads["pattern.epsilon"]],
                              pattern_adam)
                    project_box(weights, 0.0, 1.0)
                    project_box(epsilon, 0.0, 1.0)
                value = float(loss.detach())
                history.step_losses.append(value)
                history.weights_trace.append(to_numpy(weights).copy())
                history.exposure_trace.append(float(epsilon.detach()) * FULL_EXPOSURE_MS)
                epoch_losses.append(value)
                step += 1
                if progress is not None:
                    progress(step, total)
            history.epoch_losses.append(float(np.mean(epoch_losses)))
            logger.debug(f"epoch {epoch + 1}/{settings.epochs}: loss {history.epoch_losses[-1]:.6g}")

    final = IlluminationPattern(to_numpy(weights).copy(), float(epsilon.detach()) * FULL_EXPOSURE_MS)
    with torch.no_grad():
        model.input_scale.fill_(max(final.epsilon, EXPOSURE_FLOOR) * base_scale)
    model.image_shape = tuple(stacks.shape[-2:])
    model.pixel_hi = dataset[0].target.pitch
    logger.info(f"Joint training done: loss {history.step_losses[0]:.4g} -> {history.epoch_losses[-1]:.4g}, "
                f"exposure {final.exposure_ms:.1f} ms")
    return JointResult(final, model, history)


def finetune(measured: Sequence[TrainingExample], pattern: IlluminationPattern, model: CnnModel,
             settings: TrainSettings, progress: Optional[ProgressCallback] = None) -> CnnModel:
    """Continue training a copy of the CNN on measured pattern images; the pattern is not touched."""
    if not measured:
        raise SizeError("fine-tuning set is empty")
    expected = model.image_shape
    images, targets = [], []
    for k, ex in enumerate(measured):
        if ex.image is None:
            raise SizeError(f"fine-tuning example {k} has no single pattern image")
        img = np.asarray(ex.image, dtype=np.float64)
        expected = expected or img.shape
        if img.shape != tuple(expected):
            raise SizeError(f"fine-tuning example {k} has shape {img.shape}, pattern images are {tuple(expected)}")
        images.append(img)
        targets.append(ex.target.values)
    images_t = torch.as_tensor(np.stack(images))
    targets_t = torch.as_tensor(np.stack(targets))

    tuned = copy.deepcopy(model)
    params = list(tuned.parameters())
    adam = AdamState(params, lr=settings.learning_rate)
    graph = DiffGraph()
    names = []
    for name, p in tuned.named_parameters():
        graph.watch(name, p)
        names.append(name)
    rng = make_rng(settings.seed)
    n = images_t.shape[0]
    total = settings.epochs * -(-n // settings.batch_size)
    step = 0
    first = last = None
    with deterministic_torch():
        for _ in range(settings.epochs):
            for idx in _batches(rng, n, settings.batch_size):
                index = torch.as_tensor(idx)
                pred = tuned.predict_field(images_t[index])
                loss = training_objective(pred, targets_t[index], settings.gradient_weight)
                try:
                    grads = backward(graph, loss)
                except NumericError as exc:
                    raise NumericError(exc.message, op=exc.op, iteration=step) from exc
                adam_step(params, [grads[k] for k in names], adam)
                last = float(loss.detach())
                first = last if first is None else first
                step += 1
                if progress is not None:
                    progress(step, total)
    tuned.image_shape = tuple(expected)
    logger.info(f"Fine-tuning on {n} images: loss {first:.4g} -> {last:.4g}; pattern of "
                f"{len(pattern)} LEDs left unchanged")
    return tuned


def predict_single_shot(image: np.ndarray, model: CnnModel) -> ComplexField:
    """One forward pass on one measured pattern image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise SizeError(f"single-shot prediction takes exactly one 2-D image, got shape {img.shape}")
    if model.image_shape is not None and img.shape != tuple(model.image_shape):
        raise SizeError(f"image shape {img.shape} does not match the model's {tuple(model.image_shape)}")
    with torch.no_grad():
        field_t = model.predict_field(torch.as_tensor(img)[None])[0]
    return ComplexField(to_numpy(field_t).copy(), model.pixel_hi)


def measured_image(example: TrainingExample, pattern: IlluminationPattern, noise: Optional[NoiseModel],
                   rng: np.random.Generator) -> np.ndarray:
    """The pattern image of an example: its own image, or its stack emulated (and noised)."""
    if example.image is not None:
        return np.asarray(example.image, dtype=np.float64)
    images = pattern_image(torch.as_tensor(example.stack.images), torch.as_tensor(pattern.weights),
                           torch.tensor(pattern.epsilon, dtype=torch.float64))
    if noise is not None:
        images = simulate_measurement(images, noise, NoiseDraws.sample(rng, tuple(images.shape)))
    return to_numpy(images)


def evaluate(examples: Sequence[TrainingExample], pattern: IlluminationPattern, model: CnnModel,
             noise: Optional[NoiseModel], rng: np.random.Generator, w_g: float = 1.0) -> float:
    """Mean objective of single-shot predictions against the targets."""
    if not examples:
        raise SizeError("no examples to evaluate")
    scores = []
    for ex in examples:
        pred = predict_single_shot(measured_image(ex, pattern, noise, rng), model)
        scores.append(training_objective(pred, ex.target, w_g))
    return float(np.mean(scores))


def compare_patterns(train: Sequence[TrainingExample], held_out: Sequence[TrainingExample],
                     cfg: OpticsConfig, noise: NoiseModel, settings: TrainSettings,
                     seeds: Sequence[int] = (0, 1, 2), cnn: Optional[CnnSpec] = None) -> PatternComparison:
    """Paired runs per seed: pattern trained vs frozen at its initialisation."""
    trained, frozen = [], []
    for seed in seeds:
        for train_pattern, scores in ((True, trained), (False, frozen)):
            run = dataclasses.replace(settings, seed=seed, train_pattern=train_pattern)
            result = train_joint(train, cfg, noise, run, cnn=cnn)
            eval_noise = noise if settings.noise_enabled else None
            scores.append(evaluate(held_out, result.pattern, result.model, eval_noise,
                                   make_rng(seed + 10_000), settings.gradient_weight))
        logger.info(f"seed {seed}: held-out objective trained {trained[-1]:.4g}, frozen {frozen[-1]:.4g}")
    return PatternComparison(list(seeds), trained, frozen)


def noise_robustness(predictions: Sequence[ComplexField], noisy_targets: Sequence[ComplexField],
                     clean: Sequence[ComplexField]) -> float:
    """Fraction of examples whose prediction is at least as close to the clean field as its noisy target."""
    if not (len(predictions) == len(noisy_targets) == len(clean)) or not predictions:
        raise SizeError("predictions, targets and clean fields must be non-empty and equally many")
    wins = 0
    for p, t, c in zip(predictions, noisy_targets, clean):
        if np.mean(np.abs(p.values - c.values) ** 2) <= np.mean(np.abs(t.values - c.values) ** 2):
            wins += 1
    return wins / len(predictions)
