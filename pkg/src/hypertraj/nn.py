"""Small building blocks shared by every network."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
from torch import nn

NEG_INF = -1e30


class MLP(nn.Module):
    """Linear -> LayerNorm -> ReLU stacks ending in a plain Linear layer.

    ``dims=(in, hidden, out)`` gives the usual two-layer block;
    ``dims=(in, h, h, out)`` a three-layer one.
    """

    def __init__(self, dims: Sequence[int]):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        layers = []
        for k in range(len(dims) - 2):
            layers += [nn.Linear(dims[k], dims[k + 1]), nn.LayerNorm(dims[k + 1]), nn.ReLU()]
        layers.append(nn.Linear(dims[-2], dims[-1]))
        self.net = nn.Sequential(*layers)

    @property
    def last(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over ``dim`` ignoring masked entries; fully masked rows give zeros."""
    scores = scores.masked_fill(~mask, NEG_INF)
    w = torch.softmax(scores, dim=dim)
    return w * mask.to(w.dtype)


def segment_softmax(scores: torch.Tensor, index: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of edge scores grouped by ``index`` (destination node)."""
    shape = (num_segments,) + scores.shape[1:]
    idx = index.view(-1, *([1] * (scores.dim() - 1))).expand_as(scores)
    seg_max = torch.full(shape, NEG_INF, dtype=scores.dtype, device=scores.device)
    seg_max = seg_max.scatter_reduce(0, idx, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - seg_max.index_select(0, index))
    denom = torch.zeros(shape, dtype=scores.dtype, device=scores.device).index_add(0, index, ex)
    return ex / denom.index_select(0, index)


def init_parameters(module: nn.Module, generator: Optional[torch.Generator] = None) -> None:
    """Fan-in scaled uniform init for every Linear/GRU; LayerNorm to identity."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = math.sqrt(6.0 / m.in_features) / math.sqrt(2.0)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GRU):
            bound = 1.0 / math.sqrt(m.hidden_size)
            with torch.no_grad():
                for name, p in m.named_parameters():
                    if "bias" in name:
                        p.zero_()
                    else:
                        p.uniform_(-bound, bound, generator=generator)
