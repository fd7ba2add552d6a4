#!/usr/bin/env python3
"""
Helper functions for fpm-singleshot.
"""
import os


def set_openmp_env():
    """
    Set environment variables to resolve OpenMP mutex blocking issues.
    Should be called before any imports that may trigger OpenMP.
    """
    os.environ.setdefault("KMP_DUPLICATE_LIB_OK", "TRUE")


# Ensure OpenMP env vars are set immediately on module import so that
# subsequent native-library imports (torch, numpy) see them.
set_openmp_env()

import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Union

import numpy as np
import psutil
import torch
from loguru import logger

THREADS_ENV = "FPM_THREADS"

ArrayLike = Union[np.ndarray, torch.Tensor]


def worker_count(configured: int = 0) -> int:
    """Number of worker threads for patch-parallel stages.

    Precedence: the FPM_THREADS environment variable, then a positive
    configured value, then the number of physical cores.
    """
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    if configured and configured > 0:
        return int(configured)
    return max(1, psutil.cpu_count(logical=False) or 1)


_settings_lock = threading.Lock()
_settings_held: Dict[str, List[Any]] = {}


@contextmanager
def global_torch_setting(name: str, value: Any, get: Callable[[], Any],
                         set_: Callable[[Any], None]) -> Iterator[None]:
    """Hold a process-wide torch setting for the duration of the block.

    Holders of the same ``name`` share one saved value: the first to enter
    applies ``value`` and the last to leave puts the saved value back, so
    overlapping blocks in different threads never restore out of order.
    A block entered while the setting is held keeps the current value.
    """
    with _settings_lock:
        held = _settings_held.get(name)
        if held is None:
            held = _settings_held[name] = [0, get()]
            set_(value)
            logger.debug(f"torch setting {name}: {held[1]!r} -> {value!r}")
        held[0] += 1
    try:
        yield
    finally:
        with _settings_lock:
            held[0] -= 1
            if held[0] == 0:
                del _settings_held[name]
                set_(held[1])
                logger.debug(f"torch setting {name} restored to {held[1]!r}")


def torch_threads(n: int = 1):
    """Pin torch intra-op threads to ``n``; patch workers provide the parallelism."""
    return global_torch_setting("num_threads", int(n), lambda: torch.get_num_threads(),
                                lambda v: torch.set_num_threads(v))


def deterministic_torch():
    return global_torch_setting("deterministic", True, lambda: torch.are_deterministic_algorithms_enabled(),
                                lambda v: torch.use_deterministic_algorithms(v))


def detect_anomaly(check_nan: bool = True):
    """Autograd anomaly mode; failing backward nodes are named in the error."""
    return global_torch_setting(
        "anomaly", (True, check_nan),
        lambda: (torch.is_anomaly_enabled(), torch.is_anomaly_check_nan_enabled()),
        lambda v: torch.set_anomaly_enabled(*v))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) with an explicit seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def ensure_dir(p: str):
    os.makedirs(p, exist_ok=True)


def as_real_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def as_complex_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.complex128 else x.to(torch.complex128)
    return torch.as_tensor(np.asarray(x, dtype=np.complex128))


def to_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def lattice_coordinates(shape, spacing: Optional[tuple] = None):
    """Centred frequency coordinates (rows, cols) for an fftshifted grid.

    Index ``n//2`` is the zero frequency along each axis.
    """
    h, w = shape
    dy, dx = spacing if spacing is not None else (1.0, 1.0)
    v = (np.arange(h) - h // 2) * dy
    u = (np.arange(w) - w // 2) * dx
    return np.meshgrid(v, u, indexing="ij")
