"""Proposal refinement: re-encode observed + proposed trajectories and emit offsets."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import GlobalInteractor
from .errors import ShapeMismatch
from .nn import MLP

PI_EPS = 1e-6


@dataclass
class RefinedSet:
    mu: torch.Tensor  # (M, K, N, 2)
    pi: torch.Tensor  # (M, K)
    delta_mu: torch.Tensor
    delta_pi: torch.Tensor


def proposal_sequence(observed_disp: torch.Tensor, base_mu: torch.Tensor) -> torch.Tensor:
    """Per-mode displacement sequence [X || Y_base], shape (M, K, T_obs + N, 2).

    ``observed_disp`` holds local-frame displacements (M, T_obs, 2) with masked
    steps zeroed; proposals are positions relative to the latest observation.
    """
    m, k, n, _ = base_mu.shape
    if observed_disp.shape[0] != m or observed_disp.shape[-1] != 2:
        raise ShapeMismatch(f"observed {tuple(observed_disp.shape)} vs proposals {tuple(base_mu.shape)}")
    fut = torch.diff(base_mu, dim=2, prepend=torch.zeros_like(base_mu[:, :, :1]))
    obs = observed_disp.unsqueeze(1).expand(m, k, *observed_disp.shape[1:])
    return torch.cat([obs, fut], dim=2)


def renormalize_confidence(pi: torch.Tensor, eps: float = PI_EPS) -> torch.Tensor:
    pi = torch.clamp(pi, min=eps)
    return pi / pi.sum(dim=-1, keepdim=True)


class TrajectoryEncoder(nn.Module):
    """Bidirectional GRU; the embedding concatenates both directions' final states."""

    def __init__(self, hidden: int):
        super().__init__()
        if hidden % 2:
            raise ValueError("hidden width must be even for the bidirectional encoder")
        self.gru = nn.GRU(2, hidden // 2, batch_first=True, bidirectional=True)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        lead = seq.shape[:-2]
        flat = seq.reshape(-1, *seq.shape[-2:])
        _, h_n = self.gru(flat)  # (2, B, H/2)
        eta = torch.cat([h_n[0], h_n[1]], dim=-1)
        return eta.reshape(*lead, -1)


class RefinementNetwork(nn.Module):
    def __init__(self, hidden: int, horizon: int):
        super().__init__()
        self.horizon = horizon
        self.encoder = TrajectoryEncoder(hidden)
        self.consist = MLP((hidden, hidden, hidden, hidden))
        self.traj_head = MLP((5 * hidden, hidden, hidden, horizon * 2))
        self.conf_head = MLP((5 * hidden, hidden, hidden, 1))

    def zero_heads(self) -> None:
        """Start refinement as the identity: zero output layers of both heads."""
        with torch.no_grad():
            for head in (self.traj_head, self.conf_head):
                head.last.weight.zero_()
                head.last.bias.zero_()

    def forward(
        self,
        observed_disp: torch.Tensor,
        base_mu: torch.Tensor,
        base_pi: torch.Tensor,
        psi_local: torch.Tensor,
        psi_global: torch.Tensor,
        psi_hyper: torch.Tensor,
        interactor: GlobalInteractor,
        rel: torch.Tensor,
        edge_src: torch.Tensor,
        edge_dst: torch.Tensor,
    ) -> RefinedSet:
        m, k, n, _ = base_mu.shape
        eta = self.encoder(proposal_sequence(observed_disp, base_mu))  # (M, K, D)
        psi_consist = self.consist(eta)
        psi_post = interactor(eta, rel, edge_src, edge_dst)
        shared = torch.cat([psi_local, psi_global, psi_hyper], dim=-1).unsqueeze(1).expand(m, k, -1)
        feats = torch.cat([shared, psi_consist, psi_post], dim=-1)
        delta_mu = self.traj_head(feats).view(m, k, n, 2)
        delta_pi = self.conf_head(feats).squeeze(-1)
        return RefinedSet(
            mu=base_mu + delta_mu,
            pi=renormalize_confidence(base_pi + delta_pi),
            delta_mu=delta_mu,
            delta_pi=delta_pi,
        )
