"""Three-stage training with weight reloading, plus batched evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .batching import SceneArrays, collate, scene_arrays
from .checkpoint import checkpoint_dict, model_from_checkpoint, require_stage
from .errors import ConfigError
from .losses import compute_losses
from .metrics import MetricReport, aggregate, interaction_level
from .model import ModelConfig, TrajectoryPredictor, to_world
from .scene import Scene

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class StageConfig:
    stage: int = 1
    lambda1: float = 1.0
    lambda2: float = 5.0
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 64
    schedule: str = "cosine"
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    seed: int = 0
    soft_labels: bool = False
    dtype: str = "float32"
    eval_every: int = 0  # epochs between evaluations; 0 evaluates only at the end
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ConfigError("lambda1 and lambda2 must be positive")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr > 0, batch_size >= 1 and epochs >= 0 required")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def from_dict(cls, payload: dict) -> "StageConfig":
        payload = dict(payload)
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown stage config keys {sorted(unknown)}")
        model = payload.pop("model", {}) or {}
        model_known = {f.name for f in fields(ModelConfig)}
        bad = set(model) - model_known
        if bad:
            raise ConfigError(f"unknown model config keys {sorted(bad)}")
        cfg = cls(**payload, model=ModelConfig(**model))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    scenes: List[Scene]
    arrays: List[SceneArrays]
    levels: List[str]

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], model_cfg: ModelConfig) -> "Dataset":
        arrays = [scene_arrays(s, model_cfg.neighbor_radius, model_cfg.horizon) for s in scenes]
        return cls(list(scenes), arrays, [interaction_level(s) for s in scenes])

    def __len__(self) -> int:
        return len(self.scenes)


def _batches(n: int, size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + size] for i in range(0, n, size)]


def predict(
    model: TrajectoryPredictor, arrays: Sequence[SceneArrays], stage: int, batch_size: int = 64
) -> List[Tuple[np.ndarray, np.ndarray, object]]:
    """World-frame (mu, pi) for every agent of every scene, plus raw outputs per batch.

    Returns one (mu_world (M,K,N,2), pi (M,K)) pair per scene.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    results = []
    with torch.no_grad():
        for idx in _batches(len(arrays), batch_size, None):
            chunk = [arrays[i] for i in idx]
            batch = collate(chunk, model.config.agent_attr_dim, model.config.lane_attr_dim, dtype)
            out = model(batch, stage)
            mu, pi = out.final(stage)
            world = to_world(mu, batch.theta, batch.origin)
            pi = pi.detach().double().numpy()
            for sl in batch.scene_slices:
                results.append((world[sl], pi[sl]))
    return results


def evaluate(model: TrajectoryPredictor, data: Dataset, stage: int, batch_size: int = 64) -> MetricReport:
    """Metrics on each scene's central agent (index 0), bucketed by interaction level."""
    preds = predict(model, data.arrays, stage, batch_size)
    mus, pis, gts, levels = [], [], [], []
    for (mu, pi), scene, level in zip(preds, data.scenes, data.levels):
        cid = scene.agents[0].id
        if not scene.ground_truth or cid not in scene.ground_truth:
            continue
        mus.append(mu[0])
        pis.append(pi[0])
        gts.append(scene.ground_truth[cid])
        levels.append(level)
    return aggregate(mus, pis, gts, levels)


@dataclass
class StageResult:
    model: TrajectoryPredictor
    checkpoint: dict
    log_rows: List[dict]
    report: Optional[MetricReport]


def build_model(config: StageConfig, checkpoint_in: Optional[dict]) -> TrajectoryPredictor:
    require_stage(checkpoint_in, config.stage)
    dtype = DTYPES[config.dtype]
    if checkpoint_in is None:
        return TrajectoryPredictor(config.model, seed=config.seed).to(dtype)
    return model_from_checkpoint(checkpoint_in, seed=config.seed, dtype=dtype)


def make_optimizer(config: StageConfig, params: List[torch.nn.Parameter]) -> torch.optim.Optimizer:
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.lr, weight_decay=config.weight_decay)


def run_stage(
    config: StageConfig,
    train: Dataset,
    checkpoint_in: Optional[dict] = None,
    eval_data: Optional[Dataset] = None,
) -> StageResult:
    """Train one stage; stage n > 1 reloads the stage n-1 checkpoint."""
    config.validate()
    torch.manual_seed(config.seed)
    model = build_model(config, checkpoint_in)
    stage = config.stage
    params = list(model.stage_parameters(stage).values())
    trainable = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    opt = make_optimizer(config, params)
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    sched = None
    if config.schedule == "cosine" and total_steps > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    rng = np.random.default_rng(config.seed)
    dtype = DTYPES[config.dtype]
    rows: List[dict] = []
    report = None

    for epoch in range(config.epochs):
        model.train()
        sums: Dict[str, float] = {}
        count = 0
        for idx in _batches(len(train), config.batch_size, rng):
            batch = collate([train.arrays[i] for i in idx], config.model.agent_attr_dim, config.model.lane_attr_dim, dtype)
            if not bool(batch.gt_present.any()):
                continue
            out = model(batch, stage)
            losses = compute_losses(
                out, batch.gt, batch.gt_present, stage, config.lambda1, config.lambda2, config.soft_labels
            )
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            for k, v in losses.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        row = {"stage": stage, "epoch": epoch + 1, "lr": opt.param_groups[0]["lr"]}
        row.update({k: v / max(count, 1) for k, v in sums.items()})
        last = epoch + 1 == config.epochs
        if eval_data is not None and len(eval_data) and (last or (config.eval_every and (epoch + 1) % config.eval_every == 0)):
            report = evaluate(model, eval_data, stage)
            row.update(
                {"min_ade": report.min_ade, "min_fde": report.min_fde, "miss_rate": report.miss_rate,
                 "brier_min_fde": report.brier_min_fde}
            )
        log.info("stage %d epoch %d: %s", stage, epoch + 1, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        rows.append(row)

    if eval_data is not None and len(eval_data) and report is None:
        report = evaluate(model, eval_data, stage)
    for p in model.parameters():
        p.requires_grad_(True)
    ckpt = checkpoint_dict(model, stage, meta={"config": config.to_dict()})
    return StageResult(model=model, checkpoint=ckpt, log_rows=rows, report=report)


LOG_FIELDS = (
    "stage", "epoch", "lr", "reg_aux", "cls_aux", "reg_base", "cls_base", "reg_refine", "cls_refine", "total",
    "min_ade", "min_fde", "miss_rate", "brier_min_fde",
)


def write_log_csv(rows: Sequence[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in LOG_FIELDS})
