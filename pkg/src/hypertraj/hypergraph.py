"""Hyper-interactor: affinity-driven hyperedge construction and message passing."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import InvalidS, ShapeMismatch
from .nn import MLP

NORM_EPS = 1e-9


def affinity(tau: np.ndarray) -> np.ndarray:
    """Cosine-similarity matrix of future features; zero rows/cols for near-zero vectors."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 2:
        raise ShapeMismatch(f"expected (M, D) features, got {tau.shape}")
    norms = np.linalg.norm(tau, axis=1)
    ok = norms >= NORM_EPS
    unit = np.zeros_like(tau)
    unit[ok] = tau[ok] / norms[ok, None]
    a = unit @ unit.T
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, ok.astype(np.float64))
    return np.clip(a, -1.0, 1.0)


@dataclass
class Hypergraph:
    vertices: List[str]
    hyperedges: List[Tuple[int, ...]]

    @property
    def incidence(self) -> np.ndarray:
        return incidence_matrix(len(self.vertices), self.hyperedges)

    def to_json(self, affinity_matrix: Optional[np.ndarray] = None) -> str:
        payload = {
            "vertices": list(self.vertices),
            "hyperedges": [list(e) for e in self.hyperedges],
            "H": self.incidence.astype(int).tolist(),
        }
        if affinity_matrix is not None:
            payload["A"] = np.asarray(affinity_matrix).tolist()
        return json.dumps(payload, indent=2)


def incidence_matrix(num_vertices: int, hyperedges: Sequence[Sequence[int]]) -> np.ndarray:
    h = np.zeros((num_vertices, len(hyperedges)))
    for col, edge in enumerate(hyperedges):
        h[list(edge), col] = 1.0
    return h


def _subset_score(abs_a: np.ndarray, subset: Sequence[int]) -> float:
    # exactly rounded, so the result does not depend on summation order
    return math.fsum(abs_a[np.ix_(subset, subset)].ravel())


def best_hyperedge(abs_a: np.ndarray, vertex: int, size: int) -> Tuple[int, ...]:
    m = abs_a.shape[0]
    others = [v for v in range(m) if v != vertex]
    candidates = [tuple(sorted(c + (vertex,))) for c in itertools.combinations(others, size - 1)]
    if len(candidates) == 1:
        return candidates[0]
    idx = np.array(candidates)
    # vectorised prefilter, then exact comparison among near-maximal subsets
    approx = abs_a[idx[:, :, None], idx[:, None, :]].sum(axis=(1, 2))
    top = approx.max()
    near = np.flatnonzero(approx >= top - 1e-9 * max(1.0, abs(top)))
    scored = [(_subset_score(abs_a, candidates[c]), candidates[c]) for c in near]
    best = max(s for s, _ in scored)
    return min(c for s, c in scored if s == best)


def search_hyperedges(a: np.ndarray, size: int, vertex_ids: Optional[Sequence[str]] = None) -> Hypergraph:
    """One best hyperedge per vertex (maximal entrywise L1 norm of the sub-affinity).

    Coinciding hyperedges are merged, keeping first-occurrence order; ties
    between subsets go to the lexicographically smallest one.
    """
    a = np.asarray(a, dtype=np.float64)
    m = a.shape[0]
    if a.shape != (m, m):
        raise ShapeMismatch(f"affinity must be square, got {a.shape}")
    if size < 1 or size > m:
        raise InvalidS(f"hyperedge size {size} not in [1, {m}]")
    abs_a = np.abs(a)
    edges: List[Tuple[int, ...]] = []
    seen = set()
    for v in range(m):
        e = best_hyperedge(abs_a, v, size)
        if e not in seen:
            seen.add(e)
            edges.append(e)
    ids = list(vertex_ids) if vertex_ids is not None else [str(i) for i in range(m)]
    return Hypergraph(vertices=ids, hyperedges=edges)


def message_pass(
    incidence: torch.Tensor,
    nodes: torch.Tensor,
    edge_fn: Callable[[torch.Tensor], torch.Tensor],
    node_fn: Callable[[torch.Tensor], torch.Tensor],
    iterations: int = 1,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Node -> hyperedge sum + edge_fn, then hyperedge -> node sum + node_fn on [v, agg].

    Returns the updated node embeddings and the last hyperedge embeddings.
    """
    if incidence.shape[0] != nodes.shape[0]:
        raise ShapeMismatch(f"incidence has {incidence.shape[0]} rows for {nodes.shape[0]} nodes")
    edges = None
    for _ in range(iterations):
        edges = edge_fn(incidence.transpose(0, 1) @ nodes)
        nodes = node_fn(torch.cat([nodes, incidence @ edges], dim=-1))
    return nodes, edges


def gated_fuse(r_high: torch.Tensor, r_low: torch.Tensor, gate_logits: torch.Tensor) -> torch.Tensor:
    if r_high.shape != r_low.shape or r_high.shape != gate_logits.shape:
        raise ShapeMismatch("gated_fuse inputs must share a shape")
    w = torch.sigmoid(gate_logits)
    return r_high * w + r_low * (1.0 - w)


def block_incidence(tau: torch.Tensor, scene_slices: Sequence[slice], size: int) -> Tuple[torch.Tensor, List[Hypergraph]]:
    """Block-diagonal incidence over a batch; topology is built from detached features."""
    feats = tau.detach().cpu().double().numpy()
    graphs = []
    cols: List[Tuple[int, ...]] = []
    for sl in scene_slices:
        m = sl.stop - sl.start
        g = search_hyperedges(affinity(feats[sl]), min(size, m))
        graphs.append(g)
        cols.extend(tuple(sl.start + v for v in e) for e in g.hyperedges)
    h = incidence_matrix(tau.shape[0], cols)
    return torch.as_tensor(h, dtype=tau.dtype, device=tau.device), graphs


class HyperInteractor(nn.Module):
    def __init__(self, hidden: int, hyperedge_size: int = 4, iterations: int = 1):
        super().__init__()
        self.hyperedge_size = hyperedge_size
        self.iterations = iterations
        self.fuse = MLP((2 * hidden, hidden, hidden))
        self.edge_mlp = MLP((hidden, hidden, hidden))
        self.node_mlp = MLP((2 * hidden, hidden, hidden))
        self.low_mlp = MLP((hidden, hidden, hidden))
        self.weight_mlp = MLP((hidden, hidden, hidden))

    def future_features(self, psi_local: torch.Tensor, psi_global: torch.Tensor) -> torch.Tensor:
        return self.fuse(torch.cat([psi_local, psi_global], dim=-1))

    def forward(self, psi_local: torch.Tensor, psi_global: torch.Tensor, scene_slices: Sequence[slice]):
        tau = self.future_features(psi_local, psi_global)
        h, graphs = block_incidence(tau, scene_slices, self.hyperedge_size)
        r_high, _ = message_pass(h, tau, self.edge_mlp, self.node_mlp, self.iterations)
        psi_hyper = gated_fuse(r_high, self.low_mlp(tau), self.weight_mlp(tau))
        return psi_hyper, tau, graphs
