"""Pack scenes into padded tensors for a batched forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .scene import GeomFeatures, ReferenceFrame, Scene, geom_features, scene_frames


@dataclass
class SceneArrays:
    """Parameter-independent per-scene inputs, computed once and cached."""

    features: List[GeomFeatures]
    frames: List[ReferenceFrame]
    gt_local: Optional[np.ndarray]  # (M, N, 2), zeros where absent
    gt_present: np.ndarray  # (M,)


def scene_arrays(scene: Scene, neighbor_radius: float, horizon: int) -> SceneArrays:
    frames = scene_frames(scene)
    feats = [geom_features(scene, a.id, neighbor_radius, frames) for a in scene.agents]
    m = len(scene.agents)
    gt = np.zeros((m, horizon, 2))
    present = np.zeros(m, dtype=bool)
    for i, a in enumerate(scene.agents):
        if scene.ground_truth and a.id in scene.ground_truth:
            y = scene.ground_truth[a.id]
            if len(y) != horizon:
                raise ValueError(f"ground truth of {a.id} has {len(y)} steps, model expects {horizon}")
            gt[i] = frames[i].points_to_local(y)
            present[i] = True
    return SceneArrays(feats, frames, gt, present)


@dataclass
class SceneBatch:
    center: torch.Tensor  # (M, T, 2 + A)
    center_mask: torch.Tensor  # (M, T)
    nbr: torch.Tensor  # (M, T, Q, 4 + A)
    nbr_mask: torch.Tensor
    lanes: torch.Tensor  # (M, L, 4 + A_lane)
    lane_mask: torch.Tensor
    pair_inputs: torch.Tensor  # (E, 4)
    edge_src: torch.Tensor  # (E,)
    edge_dst: torch.Tensor
    gt: torch.Tensor  # (M, N, 2) local frame
    gt_present: torch.Tensor  # (M,)
    theta: torch.Tensor  # (M,)
    origin: torch.Tensor  # (M, 2)
    scene_slices: List[slice] = field(default_factory=list)

    @property
    def num_agents(self) -> int:
        return self.center.shape[0]

    @property
    def observed_disp(self) -> torch.Tensor:
        return self.center[..., :2]


def collate(
    arrays: Sequence[SceneArrays],
    agent_attr_dim: int,
    lane_attr_dim: int,
    dtype: torch.dtype = torch.float32,
) -> SceneBatch:
    feats = [f for a in arrays for f in a.features]
    m = len(feats)
    t = feats[0].center_inputs.shape[0]
    q = max([f.neighbor_inputs.shape[1] for f in feats] + [1])
    n_lanes = max([f.lane_inputs.shape[0] for f in feats] + [1])
    horizon = arrays[0].gt_local.shape[1]

    center = np.zeros((m, t, 2 + agent_attr_dim))
    center_mask = np.zeros((m, t), dtype=bool)
    nbr = np.zeros((m, t, q, 4 + agent_attr_dim))
    nbr_mask = np.zeros((m, t, q), dtype=bool)
    lanes = np.zeros((m, n_lanes, 4 + lane_attr_dim))
    lane_mask = np.zeros((m, n_lanes), dtype=bool)
    for i, f in enumerate(feats):
        center[i] = f.center_inputs
        center_mask[i] = f.center_mask
        k = f.neighbor_inputs.shape[1]
        nbr[i, :, :k] = f.neighbor_inputs
        nbr_mask[i, :, :k] = f.neighbor_mask
        nl = f.lane_inputs.shape[0]
        if nl:
            lanes[i, :nl, : f.lane_inputs.shape[1]] = f.lane_inputs
            lane_mask[i, :nl] = True

    pair_rows, src, dst, slices = [], [], [], []
    offset = 0
    for a in arrays:
        ms = len(a.features)
        slices.append(slice(offset, offset + ms))
        for i, f in enumerate(a.features):
            for j in range(ms):
                if j != i:
                    dst.append(offset + i)
                    src.append(offset + j)
                    pair_rows.append(f.pair_inputs[j])
        offset += ms

    def tt(x: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(x, dtype=dtype)

    return SceneBatch(
        center=tt(center),
        center_mask=torch.as_tensor(center_mask),
        nbr=tt(nbr),
        nbr_mask=torch.as_tensor(nbr_mask),
        lanes=tt(lanes),
        lane_mask=torch.as_tensor(lane_mask),
        pair_inputs=tt(np.array(pair_rows).reshape(-1, 4)),
        edge_src=torch.as_tensor(src, dtype=torch.long),
        edge_dst=torch.as_tensor(dst, dtype=torch.long),
        gt=tt(np.concatenate([a.gt_local for a in arrays])),
        gt_present=torch.as_tensor(np.concatenate([a.gt_present for a in arrays])),
        theta=torch.as_tensor([f.frame.theta for f in feats], dtype=torch.float64),
        origin=torch.as_tensor(np.stack([f.frame.origin for f in feats]), dtype=torch.float64),
        scene_slices=slices,
    )
