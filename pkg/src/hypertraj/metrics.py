"""Displacement metrics, miss rate, brier-minFDE and interaction-level bucketing."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyBatch, EmptyPrediction
from .scene import Scene

MISS_THRESHOLD = 2.0

# bucketing operationalisation (artifact-defined thresholds)
BUCKET_RADIUS = 30.0
SLIGHT_MAX_NEIGHBORS = 2
STRONG_MIN_NEIGHBORS = 5
SLIGHT_MAX_TURN_DEG = 15.0
STRONG_MIN_TURN_DEG = 30.0
HEADING_STRIDE = 5
MIN_CHORD = 0.5
LEVELS = ("slight", "moderate", "strong")


def _check(preds: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] == 0:
        raise EmptyPrediction(f"expected (K>=1, N, 2) predictions, got {preds.shape}")
    if preds.shape[1:] != gt.shape:
        raise ValueError(f"prediction shape {preds.shape} does not match ground truth {gt.shape}")
    return preds, gt


def ade_per_mode(preds, gt) -> np.ndarray:
    preds, gt = _check(preds, gt)
    return np.linalg.norm(preds - gt, axis=-1).mean(axis=-1)


def fde_per_mode(preds, gt) -> np.ndarray:
    preds, gt = _check(preds, gt)
    return np.linalg.norm(preds[:, -1] - gt[-1], axis=-1)


def min_ade(preds, gt) -> float:
    return float(ade_per_mode(preds, gt).min())


def min_fde(preds, gt) -> float:
    return float(fde_per_mode(preds, gt).min())


def is_miss(fde: float) -> bool:
    return fde > MISS_THRESHOLD


def miss_rate(batch: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    if len(batch) == 0:
        raise EmptyBatch("miss rate of an empty batch")
    return sum(is_miss(min_fde(p, g)) for p, g in batch) / len(batch)


def brier_min_fde(preds, pi, gt) -> float:
    fde = fde_per_mode(preds, gt)
    k = int(np.argmin(fde))
    return float(fde[k] + (1.0 - float(np.asarray(pi)[k])) ** 2)


@dataclass
class MetricReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    brier_min_fde: float
    count: int
    buckets: Dict[str, "MetricReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buckets"] = {k: v.to_dict() for k, v in self.buckets.items()}
        return d


def aggregate(
    preds: Sequence[np.ndarray],
    pis: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    levels: Optional[Sequence[str]] = None,
) -> MetricReport:
    """Scene-averaged metrics, optionally with per-interaction-level sub-reports."""
    if len(preds) == 0:
        raise EmptyBatch("no scenes to evaluate")
    ade = np.array([min_ade(p, g) for p, g in zip(preds, gts)])
    fde = np.array([min_fde(p, g) for p, g in zip(preds, gts)])
    brier = np.array([brier_min_fde(p, pi, g) for p, pi, g in zip(preds, pis, gts)])
    report = MetricReport(
        min_ade=float(ade.mean()),
        min_fde=float(fde.mean()),
        miss_rate=float(np.mean(fde > MISS_THRESHOLD)),
        brier_min_fde=float(brier.mean()),
        count=len(preds),
    )
    if levels is not None:
        levels = np.asarray(levels)
        for level in LEVELS:
            idx = np.flatnonzero(levels == level)
            if len(idx):
                report.buckets[level] = aggregate([preds[i] for i in idx], [pis[i] for i in idx], [gts[i] for i in idx])
    return report


# ---------------------------------------------------------------- bucketing


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def heading_change(observed: np.ndarray, future: np.ndarray, stride: int = HEADING_STRIDE) -> float:
    """Largest absolute heading deviation (rad) of the future from the latest observed heading.

    Headings come from chords spanning ``stride`` steps so position noise
    does not masquerade as turning; chords shorter than 0.5 m are ignored.
    """
    observed = np.asarray(observed, dtype=float)
    future = np.asarray(future, dtype=float)
    ref = None
    for s in range(min(stride, len(observed) - 1), 0, -1):
        chord = observed[-1] - observed[-1 - s]
        if np.hypot(*chord) >= MIN_CHORD:
            ref = math.atan2(chord[1], chord[0])
            break
    path = np.concatenate([observed[-1:], future])
    headings = []
    for start in range(0, len(path) - stride, stride):
        chord = path[start + stride] - path[start]
        if np.hypot(*chord) >= MIN_CHORD:
            headings.append(math.atan2(chord[1], chord[0]))
    if not headings:
        return 0.0
    if ref is None:
        ref = headings[0]
    return max(abs(_wrap(h - ref)) for h in headings)


def interaction_level(scene: Scene, central: Optional[str] = None) -> str:
    """slight / moderate / strong from neighbour density and turning near the central agent."""
    ci = 0 if central is None else scene.index_of(central)
    center = scene.agents[ci]
    p0 = center.current_position
    nearby = [ci]
    for j, a in enumerate(scene.agents):
        if j != ci and np.hypot(*(a.current_position - p0)) <= BUCKET_RADIUS:
            nearby.append(j)
    n = len(nearby) - 1
    turn = 0.0
    gt = scene.ground_truth or {}
    for j in nearby:
        a = scene.agents[j]
        if a.id in gt:
            obs = a.positions[a.mask]
            turn = max(turn, heading_change(obs, gt[a.id]))
    turn_deg = math.degrees(turn)
    if n <= SLIGHT_MAX_NEIGHBORS and turn_deg < SLIGHT_MAX_TURN_DEG:
        return "slight"
    if n >= STRONG_MIN_NEIGHBORS and turn_deg >= STRONG_MIN_TURN_DEG:
        return "strong"
    return "moderate"
