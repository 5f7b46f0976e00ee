import math

import numpy as np
import pytest
import torch

from hypertraj.batching import collate, scene_arrays
from hypertraj.model import ModelConfig, TrajectoryPredictor
from hypertraj.scene import AgentTrack, LaneSegment, Scene


def random_scene(rng, m=3, t_obs=20, horizon=30, lanes=4, dyadic=False, spread=12.0):
    """Agents moving roughly straight with random headings and speeds.

    With ``dyadic`` every coordinate is a multiple of 1/64 so that integer
    translations are exact in floating point.
    """
    agents, gt = [], {}
    for i in range(m):
        start = rng.uniform(-spread, spread, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.5, 1.5)
        turn = rng.uniform(-0.03, 0.03)
        pts = [start]
        h = heading
        for _ in range(t_obs + horizon - 1):
            h += turn
            pts.append(pts[-1] + speed * np.array([math.cos(h), math.sin(h)]))
        pts = np.array(pts)
        if dyadic:
            pts = np.round(pts * 64) / 64
        agents.append(AgentTrack(f"a{i}", pts[:t_obs], [1.0 if i == 0 else 0.0, 0.0]))
        gt[f"a{i}"] = pts[t_obs:]
    segs = []
    for _ in range(lanes):
        s = rng.uniform(-spread, spread, size=2)
        e = s + rng.uniform(2.0, 6.0, size=2)
        if dyadic:
            s, e = np.round(s * 64) / 64, np.round(e * 64) / 64
        segs.append(LaneSegment(s, e, [float(rng.integers(0, 2)), 0.0]))
    return Scene(agents, segs, gt)


def tiny_config(**kw):
    base = dict(hidden=8, num_modes=3, t_obs=6, horizon=5, hyperedge_size=2)
    base.update(kw)
    return ModelConfig(**base)


def batch_for(scenes, cfg, dtype=torch.float64):
    arrays = [scene_arrays(s, cfg.neighbor_radius, cfg.horizon) for s in scenes]
    return collate(arrays, cfg.agent_attr_dim, cfg.lane_attr_dim, dtype)


def randomize(model, seed=0, scale=0.5):
    """Overwrite every parameter (including zero-initialised heads) with random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return TrajectoryPredictor(tiny_config(), seed=3).double()


def fd_check(params, scalar_fn, eps=1e-5, per_array=6, seed=0):
    """Central finite differences vs autograd on sampled entries of every array.

    Returns {name: relative error} with rel = ||g_fd - g_ad|| / max(||g_fd||, ||g_ad||, 1e-6).
    """
    g = np.random.default_rng(seed)
    named = list(params.items())
    for _, p in named:
        p.grad = None
    scalar_fn().backward()
    out = {}
    for name, p in named:
        ad = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        idx = g.choice(p.numel(), size=min(per_array, p.numel()), replace=False)
        fd = []
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = scalar_fn().item()
                flat[i] = orig - eps
                down = scalar_fn().item()
                flat[i] = orig
                fd.append((up - down) / (2 * eps))
        fd = np.array(fd)
        a = ad.numpy()[idx]
        out[name] = float(np.linalg.norm(fd - a) / max(np.linalg.norm(fd), np.linalg.norm(a), 1e-6))
    return out
