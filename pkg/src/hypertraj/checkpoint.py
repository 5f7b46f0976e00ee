"""Versioned checkpoint files: JSON header with base64-encoded float64 arrays.

Layout::

    {"format": "hypertraj-checkpoint", "version": 1, "stage": 1|2|3,
     "model_config": {...}, "meta": {...},
     "arrays": {"<module>.<param>": {"shape": [...], "dtype": "<f8", "data": "<base64>"}}}

Only the parameter groups active in the checkpoint's stage are stored.
Keys are sorted and the encoding is fixed, so identical weights give
byte-identical files.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .errors import CheckpointStageMismatch
from .model import ModelConfig, TrajectoryPredictor

FORMAT = "hypertraj-checkpoint"
VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype=entry.get("dtype", "<f8")).reshape(entry["shape"]).copy()


def checkpoint_dict(model: TrajectoryPredictor, stage: int, meta: Optional[dict] = None) -> dict:
    arrays = {
        name: encode_array(p.detach().cpu().double().numpy()) for name, p in model.stage_parameters(stage).items()
    }
    return {
        "format": FORMAT,
        "version": VERSION,
        "stage": stage,
        "model_config": model.config.to_dict(),
        "meta": meta or {},
        "arrays": arrays,
    }


def dumps(ckpt: dict) -> str:
    return json.dumps(ckpt, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(ckpt))


def read_checkpoint(path) -> dict:
    ckpt = json.loads(Path(path).read_text())
    if ckpt.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if ckpt.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def load_weights(model: TrajectoryPredictor, ckpt: dict) -> None:
    """Copy every stored array into the model; groups absent from the file keep their init."""
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, entry in ckpt["arrays"].items():
            if name not in params:
                raise KeyError(f"checkpoint array {name} has no matching parameter")
            value = torch.as_tensor(decode_array(entry), dtype=params[name].dtype)
            if value.shape != params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {tuple(value.shape)} != {tuple(params[name].shape)}")
            params[name].copy_(value)


def model_from_checkpoint(ckpt: dict, seed: int = 0, dtype: torch.dtype = torch.float32) -> TrajectoryPredictor:
    """Rebuild a model from any-stage checkpoint.

    Parameter groups of later stages are freshly initialised from ``seed``;
    if the checkpoint predates the main decoder, it starts as a copy of the
    auxiliary decoder.
    """
    model = TrajectoryPredictor(ModelConfig(**ckpt["model_config"]), seed=seed).to(dtype)
    load_weights(model, ckpt)
    if ckpt["stage"] < 2:
        model.main_decoder.load_from(model.aux_decoder)
    if ckpt["stage"] < 3:
        model.refiner.zero_heads()
    return model


def require_stage(ckpt: Optional[dict], stage: int) -> None:
    if stage == 1:
        if ckpt is not None:
            raise CheckpointStageMismatch("stage 1 trains from scratch and takes no checkpoint")
        return
    if ckpt is None:
        raise CheckpointStageMismatch(f"stage {stage} needs a stage-{stage - 1} checkpoint")
    if ckpt["stage"] != stage - 1:
        raise CheckpointStageMismatch(f"stage {stage} needs a stage-{stage - 1} checkpoint, got stage {ckpt['stage']}")
