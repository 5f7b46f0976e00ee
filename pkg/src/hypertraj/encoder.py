"""Coarse trajectory network: local scene encoder, global interactor and the
Laplace-mixture decoder.

All tensors follow the batched layout produced by :mod:`hypertraj.batching`:
agents of every scene in a batch are stacked along the first axis, and
cross-agent attention runs over an explicit edge list restricted to agents
of the same scene.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch
from .nn import MLP, masked_softmax, segment_softmax

B_FLOOR = 1e-3


class CrossAttention(nn.Module):
    """Single-head attention of one query over a padded set of keys."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # query (..., D), keys (..., S, D), mask (..., S)
        q = self.q(query).unsqueeze(-2)
        scores = (q * self.k(keys)).sum(-1) * self.scale
        w = masked_softmax(scores, mask)
        attn = (w.unsqueeze(-1) * self.v(keys)).sum(-2)
        return self.norm(query + self.out(attn))


class FeedForward(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP((dim, dim, dim))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.mlp(x))


class LocalEncoder(nn.Module):
    """Agent-agent attention per step, temporal aggregation, then agent-lane attention."""

    def __init__(self, hidden: int, t_obs: int, agent_attr_dim: int, lane_attr_dim: int):
        super().__init__()
        self.hidden = hidden
        self.t_obs = t_obs
        self.center_embed = MLP((2 + agent_attr_dim, hidden, hidden))
        self.nbr_embed = MLP((4 + agent_attr_dim, hidden, hidden))
        self.lane_embed = MLP((4 + lane_attr_dim, hidden, hidden))
        self.agent_attn = CrossAttention(hidden)
        self.pos_embed = nn.Parameter(torch.zeros(t_obs, hidden))
        self.time_query = nn.Parameter(torch.zeros(hidden))
        self.temporal_attn = CrossAttention(hidden)
        self.lane_attn = CrossAttention(hidden)
        self.ffn = FeedForward(hidden)

    def forward(
        self,
        center: torch.Tensor,
        center_mask: torch.Tensor,
        nbr: torch.Tensor,
        nbr_mask: torch.Tensor,
        lanes: torch.Tensor,
        lane_mask: torch.Tensor,
    ) -> torch.Tensor:
        m, t = center.shape[:2]
        if t != self.t_obs or nbr.shape[:2] != (m, t) or lanes.shape[0] != m:
            raise ShapeMismatch(f"local encoder got center {tuple(center.shape)}, nbr {tuple(nbr.shape)}")
        z_center = self.center_embed(center)  # (M, T, D)
        z_nbr = self.nbr_embed(nbr)  # (M, T, Q, D)
        h = self.agent_attn(z_center, z_nbr, nbr_mask)  # (M, T, D)
        keys = h + self.pos_embed
        query = self.time_query.expand(m, self.hidden)
        tq = self.temporal_attn.q(query).unsqueeze(1)
        scores = (tq * self.temporal_attn.k(keys)).sum(-1) * self.temporal_attn.scale
        w = masked_softmax(scores, center_mask)
        pooled = (w.unsqueeze(-1) * self.temporal_attn.v(keys)).sum(1)
        temporal = self.temporal_attn.norm(self.temporal_attn.out(pooled))
        z_lane = self.lane_embed(lanes)  # (M, L, D)
        x = self.lane_attn(temporal, z_lane, lane_mask)
        return self.ffn(x)


class GlobalInteractor(nn.Module):
    """Cross-agent attention with keys/values conditioned on relative-pose embeddings.

    Also reused by the refinement network on per-mode trajectory embeddings,
    so node features may carry extra axes between the agent axis and the
    feature axis.
    """

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.rel_embed = MLP((4, hidden, hidden))
        self.q = nn.Linear(hidden, hidden)
        self.k_node = nn.Linear(hidden, hidden)
        self.k_rel = nn.Linear(hidden, hidden, bias=False)
        self.v_node = nn.Linear(hidden, hidden)
        self.v_rel = nn.Linear(hidden, hidden, bias=False)
        self.out = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.ffn = FeedForward(hidden)
        self.scale = 1.0 / math.sqrt(hidden)

    def pair_embedding(self, pair_inputs: torch.Tensor) -> torch.Tensor:
        return self.rel_embed(pair_inputs)

    def forward(self, x: torch.Tensor, rel: torch.Tensor, edge_src: torch.Tensor, edge_dst: torch.Tensor) -> torch.Tensor:
        """``x`` (M, ..., D); ``rel`` (E, D) embeddings s_ij for edges j=src -> i=dst."""
        if x.shape[-1] != self.hidden or rel.shape != (edge_src.shape[0], self.hidden):
            raise ShapeMismatch(f"global interactor got x {tuple(x.shape)}, rel {tuple(rel.shape)}")
        m = x.shape[0]
        extra = x.dim() - 2
        rel_b = rel.view(rel.shape[0], *([1] * extra), self.hidden)
        if edge_src.numel() == 0:
            attn = torch.zeros_like(x)
        else:
            q = self.q(x).index_select(0, edge_dst)
            k = self.k_node(x).index_select(0, edge_src) + self.k_rel(rel_b)
            v = self.v_node(x).index_select(0, edge_src) + self.v_rel(rel_b)
            scores = (q * k).sum(-1) * self.scale  # (E, ...)
            w = segment_softmax(scores, edge_dst, m)
            attn = torch.zeros_like(x).index_add(0, edge_dst, w.unsqueeze(-1) * v)
        h = self.norm(x + self.out(attn))
        return self.ffn(h)


@dataclass
class LaplaceMixture:
    """Per-agent K-mode Laplace mixture: mu (M,K,N,2), b (M,K,N,2), pi (M,K)."""

    mu: torch.Tensor
    b: torch.Tensor
    pi: torch.Tensor


class LaplaceDecoder(nn.Module):
    """Three heads for location, scale and mixing weight.

    Locations are predicted as per-step displacements and accumulated into
    positions in the central agent's frame.  ``extra_dim`` adds a second
    input branch whose first-layer weights start at zero; the main decoder
    uses it for high-order features so that a copy of the auxiliary decoder
    reproduces the auxiliary output exactly.
    """

    def __init__(self, in_dim: int, hidden: int, num_modes: int, horizon: int, extra_dim: int = 0):
        super().__init__()
        self.num_modes = num_modes
        self.horizon = horizon
        self.extra_dim = extra_dim
        out = {"mu": num_modes * horizon * 2, "b": num_modes * horizon * 2, "pi": num_modes}
        self.inp = nn.ModuleDict({k: nn.Linear(in_dim, hidden) for k in out})
        self.norm = nn.ModuleDict({k: nn.LayerNorm(hidden) for k in out})
        self.head = nn.ModuleDict({k: nn.Linear(hidden, n) for k, n in out.items()})
        if extra_dim:
            self.extra = nn.ModuleDict({k: nn.Linear(extra_dim, hidden, bias=False) for k in out})
        else:
            self.extra = None

    def zero_extra(self) -> None:
        if self.extra is not None:
            with torch.no_grad():
                for lin in self.extra.values():
                    lin.weight.zero_()

    def load_from(self, other: "LaplaceDecoder") -> None:
        """Copy the shared weights of another decoder and zero the extra branch."""
        with torch.no_grad():
            for name in ("inp", "norm", "head"):
                getattr(self, name).load_state_dict(getattr(other, name).state_dict())
        self.zero_extra()

    def _hidden(self, key: str, x: torch.Tensor, extra: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.inp[key](x)
        if self.extra is not None and extra is not None:
            h = h + self.extra[key](extra)
        return F.relu(self.norm[key](h))

    def forward(self, x: torch.Tensor, extra: Optional[torch.Tensor] = None) -> LaplaceMixture:
        m = x.shape[0]
        k, n = self.num_modes, self.horizon
        steps = self.head["mu"](self._hidden("mu", x, extra)).view(m, k, n, 2)
        mu = torch.cumsum(steps, dim=2)
        b = F.softplus(self.head["b"](self._hidden("b", x, extra))).view(m, k, n, 2) + B_FLOOR
        pi = torch.softmax(self.head["pi"](self._hidden("pi", x, extra)), dim=-1)
        return LaplaceMixture(mu=mu, b=b, pi=pi)
