"""Reverse-mode differentiation shared by the iterative solver and the CNN trainer.

Gradients are computed by torch autograd. This module adds the pieces both
solvers need on top of it: named leaves, a scalar-loss contract, NaN
detection that names the failing autograd node, a finite-difference checker,
the Adam update and the differentiable array ops of the imaging model.

Complex leaves carry independent real/imaginary gradients, reported as
``dL/dRe + 1j * dL/dIm`` (for ``L = sum(|z|**2)`` the gradient is ``2 z``).
"""

import contextlib
import re
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from progress.errors import ContractError, NumericError
from .helpers import detect_anomaly

SQRT_GUARD = 1e-12

_NODE_PATTERN = re.compile(r"Function '(\w+)'")


class DiffGraph:
    """Registry of the named leaves a loss is differentiated against."""

    def __init__(self, check_nan: bool = True):
        self.check_nan = check_nan
        self._leaves: Dict[str, torch.Tensor] = {}

    def leaf(self, name: str, value) -> torch.Tensor:
        """Create a fresh leaf tensor (float64 or complex128) and register it."""
        if isinstance(value, torch.Tensor):
            t = value.detach().clone()
        else:
            arr = np.asarray(value)
            dtype = np.complex128 if np.iscomplexobj(arr) else np.float64
            t = torch.as_tensor(arr.astype(dtype, copy=True))
        if t.dtype not in (torch.float64, torch.complex128):
            t = t.to(torch.complex128 if t.is_complex() else torch.float64)
        t.requires_grad_(True)
        self._leaves[name] = t
        return t

    def watch(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        """Register an existing tensor (e.g. a model parameter) as a leaf."""
        if not tensor.requires_grad:
            raise ContractError(f"leaf {name!r} does not require grad")
        self._leaves[name] = tensor
        return tensor

    @property
    def leaves(self) -> Dict[str, torch.Tensor]:
        return dict(self._leaves)

    def __contains__(self, name: str) -> bool:
        return name in self._leaves

    def __len__(self) -> int:
        return len(self._leaves)


def backward(graph: DiffGraph, loss: torch.Tensor, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """Differentiate a real scalar loss with respect to every leaf of ``graph``.

    Args:
        graph: DiffGraph holding the leaves
        loss: Real scalar tensor computed from the leaves
        retain_graph: Keep the autograd graph for a second pass

    Returns:
        Mapping leaf name -> gradient with the leaf's shape and dtype.
        Leaves the loss does not depend on get zeros.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1 or loss.dim() > 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if loss.is_complex():
        raise ContractError("backward() needs a real loss, got a complex scalar")
    loss = loss.reshape(())
    if graph.check_nan and not bool(torch.isfinite(loss.detach())):
        raise NumericError(f"loss is {loss.item()} before backward", op="forward")

    names = list(graph.leaves)
    tensors = [graph.leaves[n] for n in names]
    anomaly = detect_anomaly(check_nan=True) if graph.check_nan else contextlib.nullcontext()
    try:
        with anomaly:
            grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=retain_graph)
    except RuntimeError as exc:
        match = _NODE_PATTERN.search(str(exc))
        if match is None:
            raise
        raise NumericError(f"non-finite gradient from {match.group(1)}", op=match.group(1)) from exc

    result: Dict[str, torch.Tensor] = {}
    for name, leaf, grad in zip(names, tensors, grads):
        if grad is None:
            logger.warning(f"Leaf {name} does not contribute to the loss; gradient set to zero")
            grad = torch.zeros_like(leaf)
        elif graph.check_nan and not bool(torch.isfinite(grad).all()):
            raise NumericError(f"non-finite gradient for leaf {name}", op=name)
        result[name] = grad.detach()
    return result


def check_gradient(f: Callable[[torch.Tensor], torch.Tensor], x, h: float = 1e-6,
                   floor: float = 1e-12) -> float:
    """Worst relative error between backward() and central finite differences.

    Each real component (real and imaginary parts separately for complex x)
    is perturbed by ``±h``. The relative error of a component is
    ``|a - n| / max(|a|, |n|, floor)``.

    Args:
        f: Scalar function of a tensor
        x: Point to check at (array or tensor)
        h: Finite-difference step
        floor: Lower bound of the denominator

    Returns:
        Maximum relative error over all components
    """
    graph = DiffGraph()
    leaf = graph.leaf("x", x)
    analytic = backward(graph, f(leaf))["x"]
    base = leaf.detach().clone()
    flat = base.reshape(-1)

    def _partial(index: int, step) -> float:
        plus = flat.clone()
        minus = flat.clone()
        plus[index] += step
        minus[index] -= step
        with torch.no_grad():
            fp = float(f(plus.reshape(base.shape)))
            fm = float(f(minus.reshape(base.shape)))
        return (fp - fm) / (2.0 * h)

    a_flat = analytic.reshape(-1)
    worst = 0.0
    for k in range(flat.numel()):
        pairs = [(float(a_flat[k].real), _partial(k, h))]
        if base.is_complex():
            pairs.append((float(a_flat[k].imag), _partial(k, 1j * h)))
        for a, n in pairs:
            denom = max(abs(a), abs(n), floor)
            worst = max(worst, abs(a - n) / denom)
    logger.debug(f"check_gradient: {flat.numel()} components, max relative error {worst:.3e}")
    return worst


class AdamState:
    """Bias-corrected Adam over a fixed list of parameters.

    Complex parameters are updated as independent real and imaginary parts.
    """

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params: List[torch.Tensor] = list(params)
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)

    @property
    def t(self) -> int:
        for p in self.params:
            state = self.optimizer.state.get(p)
            if state and "step" in state:
                return int(state["step"])
        return 0

    def moments(self, param: torch.Tensor) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        state = self.optimizer.state.get(param, {})
        return state.get("exp_avg"), state.get("exp_avg_sq")

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]],
              state: AdamState, lr: Optional[float] = None) -> Sequence[torch.Tensor]:
    """Apply one Adam update in place and return the parameters.

    A ``None`` gradient counts as zero, so the step counter always advances.
    """
    if len(params) != len(grads):
        raise ContractError(f"adam_step got {len(params)} params but {len(grads)} gradients")
    if lr is not None:
        state.set_lr(lr)
    for p, g in zip(params, grads):
        if g is None:
            p.grad = torch.zeros_like(p)
        else:
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            p.grad = g.detach().to(p.dtype).clone()
    state.optimizer.step()
    return params


# ---------------------------------------------------------------------------
# Differentiable ops of the imaging model
# ---------------------------------------------------------------------------

def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Unitary 2-D transform; zero frequency at index n//2 of the last two axes."""
    return torch.fft.fftshift(torch.fft.fft2(x, norm="ortho"), dim=(-2, -1))


def ifft2c(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2c` (and its adjoint)."""
    return torch.fft.ifft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho")


def _window_start(full: Tuple[int, int], shape: Tuple[int, int], offset: Tuple[int, int]):
    r0 = full[0] // 2 + offset[0] - shape[0] // 2
    c0 = full[1] // 2 + offset[1] - shape[1] // 2
    return r0, c0


def crop_center(x: torch.Tensor, shape: Tuple[int, int], offset: Tuple[int, int] = (0, 0)) -> torch.Tensor:
    """Window of ``shape`` whose centre sits ``offset`` bins from the grid centre.

    The window's index ``shape//2`` maps to ``full//2 + offset``.
    """
    full = x.shape[-2:]
    r0, c0 = _window_start(full, shape, offset)
    if r0 < 0 or c0 < 0 or r0 + shape[0] > full[0] or c0 + shape[1] > full[1]:
        raise ContractError(f"window {shape} at offset {offset} leaves grid {tuple(full)}")
    return x[..., r0:r0 + shape[0], c0:c0 + shape[1]]


def embed_center(x: torch.Tensor, shape: Tuple[int, int], offset: Tuple[int, int] = (0, 0)) -> torch.Tensor:
    """Zero-padded adjoint of :func:`crop_center`."""
    small = x.shape[-2:]
    r0, c0 = _window_start(shape, small, offset)
    if r0 < 0 or c0 < 0 or r0 + small[0] > shape[0] or c0 + small[1] > shape[1]:
        raise ContractError(f"window {tuple(small)} at offset {offset} leaves grid {shape}")
    out = x.new_zeros(x.shape[:-2] + tuple(shape))
    out[..., r0:r0 + small[0], c0:c0 + small[1]] = x
    return out


def abs2(z: torch.Tensor) -> torch.Tensor:
    if z.is_complex():
        return z.real * z.real + z.imag * z.imag
    return z * z


class _GuardedSqrt(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.sqrt(torch.clamp(x, min=SQRT_GUARD))

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * 0.5 / torch.sqrt(torch.clamp(x, min=SQRT_GUARD))


def guarded_sqrt(x: torch.Tensor) -> torch.Tensor:
    """sqrt(max(x, 1e-12)); forward and derivative share the guarded argument."""
    return _GuardedSqrt.apply(x)


def forward_difference(x: torch.Tensor, dim: int) -> torch.Tensor:
    n = x.shape[dim]
    return x.narrow(dim, 1, n - 1) - x.narrow(dim, 0, n - 1)


def project_box(t: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Clamp a parameter into [lo, hi] in place, outside the autograd graph."""
    with torch.no_grad():
        t.clamp_(lo, hi)
    return t
