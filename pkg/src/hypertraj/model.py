"""Full coarse-to-fine predictor and its stage-dependent forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .batching import SceneBatch
from .encoder import GlobalInteractor, LaplaceDecoder, LaplaceMixture, LocalEncoder
from .hypergraph import Hypergraph, HyperInteractor
from .nn import init_parameters
from .refinement import RefinedSet, RefinementNetwork

# parameter groups that exist from each stage on
STAGE_MODULES = {
    1: ("local_encoder", "global_interactor", "aux_decoder"),
    2: ("local_encoder", "global_interactor", "aux_decoder", "hyper", "main_decoder"),
    3: ("local_encoder", "global_interactor", "aux_decoder", "hyper", "main_decoder", "refiner"),
}


@dataclass
class ModelConfig:
    hidden: int = 64
    num_modes: int = 6
    t_obs: int = 20
    horizon: int = 30
    agent_attr_dim: int = 2
    lane_attr_dim: int = 2
    hyperedge_size: int = 4
    mp_iterations: int = 1
    neighbor_radius: float = 50.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    psi_local: torch.Tensor
    psi_global: torch.Tensor
    aux: LaplaceMixture
    base: Optional[LaplaceMixture] = None
    refined: Optional[RefinedSet] = None
    psi_hyper: Optional[torch.Tensor] = None
    tau: Optional[torch.Tensor] = None
    hypergraphs: List[Hypergraph] = field(default_factory=list)

    def final(self, stage: int):
        """(mu, pi) of the inference head for a stage; the auxiliary head only in stage 1."""
        if stage >= 3 and self.refined is not None:
            return self.refined.mu, self.refined.pi
        if stage >= 2 and self.base is not None:
            return self.base.mu, self.base.pi
        return self.aux.mu, self.aux.pi


class TrajectoryPredictor(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d = config.hidden
        self.local_encoder = LocalEncoder(d, config.t_obs, config.agent_attr_dim, config.lane_attr_dim)
        self.global_interactor = GlobalInteractor(d)
        self.aux_decoder = LaplaceDecoder(2 * d, d, config.num_modes, config.horizon)
        self.hyper = HyperInteractor(d, config.hyperedge_size, config.mp_iterations)
        self.main_decoder = LaplaceDecoder(2 * d, d, config.num_modes, config.horizon, extra_dim=d)
        self.refiner = RefinementNetwork(d, config.horizon)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        init_parameters(self, g)
        with torch.no_grad():
            enc = self.local_encoder
            enc.pos_embed.copy_(0.02 * torch.randn(enc.pos_embed.shape, generator=g, dtype=enc.pos_embed.dtype))
            enc.time_query.copy_(0.02 * torch.randn(enc.time_query.shape, generator=g, dtype=enc.time_query.dtype))
        self.main_decoder.load_from(self.aux_decoder)
        self.refiner.zero_heads()

    def stage_parameters(self, stage: int) -> Dict[str, nn.Parameter]:
        out = {}
        for mod in STAGE_MODULES[stage]:
            for name, p in getattr(self, mod).named_parameters():
                out[f"{mod}.{name}"] = p
        return out

    def embed(self, batch: SceneBatch):
        psi_local = self.local_encoder(
            batch.center, batch.center_mask, batch.nbr, batch.nbr_mask, batch.lanes, batch.lane_mask
        )
        rel = self.global_interactor.pair_embedding(batch.pair_inputs)
        psi_global = self.global_interactor(psi_local, rel, batch.edge_src, batch.edge_dst)
        return psi_local, psi_global, rel

    def forward(self, batch: SceneBatch, stage: int = 3) -> ModelOutput:
        psi_local, psi_global, rel = self.embed(batch)
        low = torch.cat([psi_local, psi_global], dim=-1)
        out = ModelOutput(psi_local=psi_local, psi_global=psi_global, aux=self.aux_decoder(low))
        if stage < 2:
            return out
        psi_hyper, tau, graphs = self.hyper(psi_local, psi_global, batch.scene_slices)
        out.psi_hyper, out.tau, out.hypergraphs = psi_hyper, tau, graphs
        out.base = self.main_decoder(low, psi_hyper)
        if stage < 3:
            return out
        out.refined = self.refiner(
            batch.observed_disp,
            out.base.mu,
            out.base.pi,
            psi_local,
            psi_global,
            psi_hyper,
            self.global_interactor,
            rel,
            batch.edge_src,
            batch.edge_dst,
        )
        return out


def to_world(mu: torch.Tensor, theta: torch.Tensor, origin: torch.Tensor) -> np.ndarray:
    """Central-frame positions (M, K, N, 2) -> world frame: R_i traj + p_i."""
    mu = mu.detach().double().cpu().numpy()
    th = theta.cpu().numpy()
    c, s = np.cos(th)[:, None, None], np.sin(th)[:, None, None]
    x, y = mu[..., 0], mu[..., 1]
    world = np.stack([c * x - s * y, s * x + c * y], axis=-1)
    return world + origin.cpu().numpy()[:, None, None, :]
