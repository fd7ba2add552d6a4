#!/usr/bin/env python3
"""
Checkpoint packaging for trained patterns and CNN models.
"""

import json
import os
import time
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from loguru import logger

from progress.errors import FormatError
from .arrayio import SUFFIX, read_array, write_array
from .helpers import ensure_dir, to_numpy
from .network import CnnModel, CnnSpec
from .optics import IlluminationPattern

SCHEMA = "fpm-checkpoint/v1"
MANIFEST = "manifest.json"


def save_checkpoint(out_dir: str, pattern: IlluminationPattern, model: CnnModel,
                    extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Write one array file per model tensor plus the pattern weights, and a
    manifest.json describing the architecture, exposure and file map.
    """
    ensure_dir(out_dir)
    files: Dict[str, str] = {}
    for name, tensor in model.state_dict().items():
        rel = f"{name}{SUFFIX}"
        write_array(os.path.join(out_dir, rel), np.atleast_1d(to_numpy(tensor)).astype(np.float64))
        files[name] = rel
    write_array(os.path.join(out_dir, f"pattern_weights{SUFFIX}"), pattern.weights)

    manifest = {
        "schema": SCHEMA,
        "generated_at": time.time(),
        "architecture": model.spec.to_dict(),
        "parameter_count": model.parameter_count,
        "exposure_ms": pattern.exposure_ms,
        "num_leds": len(pattern),
        "input_scale": float(model.input_scale),
        "image_shape": list(model.image_shape) if model.image_shape else None,
        "pixel_hi": model.pixel_hi,
        "pattern_file": f"pattern_weights{SUFFIX}",
        "tensors": files,
        "extra": extra or {},
    }
    man_path = os.path.join(out_dir, MANIFEST)
    with open(man_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
    logger.info(f"Saved checkpoint ({len(files)} tensors, {model.parameter_count} parameters) to {out_dir}")
    return man_path


def load_checkpoint(ckpt_dir: str) -> Tuple[IlluminationPattern, CnnModel, Dict[str, Any]]:
    """Rebuild the pattern and model written by :func:`save_checkpoint`."""
    with open(os.path.join(ckpt_dir, MANIFEST), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("schema") != SCHEMA:
        raise FormatError(f"{ckpt_dir}: unsupported checkpoint schema {manifest.get('schema')!r}", offset=0)

    weights = read_array(os.path.join(ckpt_dir, manifest["pattern_file"]))
    pattern = IlluminationPattern(weights, manifest["exposure_ms"])
    model = CnnModel(CnnSpec(**manifest["architecture"]))
    reference = model.state_dict()
    state = {}
    for name, rel in manifest["tensors"].items():
        arr = read_array(os.path.join(ckpt_dir, rel))
        state[name] = torch.as_tensor(arr).reshape(reference[name].shape)
    model.load_state_dict(state)
    if manifest.get("image_shape"):
        model.image_shape = tuple(manifest["image_shape"])
    model.pixel_hi = float(manifest.get("pixel_hi", 1.0))
    model.eval()
    logger.info(f"Loaded checkpoint from {ckpt_dir}: {len(pattern)} LEDs, exposure {pattern.exposure_ms:.1f} ms")
    return pattern, model, manifest
