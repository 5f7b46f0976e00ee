import math

import numpy as np
import pytest
import torch

from conftest import batch_for, fd_check, randomize, random_scene, tiny_config
from hypertraj.errors import MissingComponent, NoGroundTruth
from hypertraj.losses import (
    LossReport,
    best_mode,
    compute_losses,
    confidence_ce,
    laplace_nll,
    smooth_l1,
    smooth_l1_reg,
    soft_confidence_target,
    stage_loss,
)
from hypertraj.model import TrajectoryPredictor
from oracles import best_mode_oracle, cross_entropy_oracle, laplace_nll_oracle, smooth_l1_oracle

D = torch.float64


def test_best_mode_examples():
    gt = torch.randn(5, 2, dtype=D)
    preds = gt.expand(4, 5, 2).clone()
    preds[[0, 1, 3]] += 0.5
    assert int(best_mode(preds, gt)) == 2
    assert int(best_mode(gt.expand(4, 5, 2), gt)) == 0


def test_best_mode_oracle(rng):
    for _ in range(30):
        p = rng.normal(size=(3, 6, 2))
        g = rng.normal(size=(6, 2))
        assert int(best_mode(torch.tensor(p), torch.tensor(g))) == best_mode_oracle(p.tolist(), g.tolist())


def test_best_mode_needs_valid_step():
    with pytest.raises(NoGroundTruth):
        best_mode(torch.zeros(1, 2, 3, 2), torch.zeros(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))


def test_laplace_closed_forms():
    gt = torch.randn(1, 7, 2, dtype=D)
    mu = gt.unsqueeze(1).expand(1, 3, 7, 2)
    k = torch.tensor([1])
    assert laplace_nll(mu, torch.ones_like(mu), gt, k).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert laplace_nll(mu, torch.full_like(mu, 0.5), gt, k).item() == pytest.approx(0.0, abs=1e-12)


def test_laplace_oracle(rng):
    for _ in range(10):
        mu = rng.normal(size=(1, 3, 6, 2))
        b = rng.uniform(0.2, 2.0, size=(1, 3, 6, 2))
        gt = rng.normal(size=(1, 6, 2))
        k = int(rng.integers(0, 3))
        got = laplace_nll(torch.tensor(mu), torch.tensor(b), torch.tensor(gt), torch.tensor([k])).item()
        assert got == pytest.approx(laplace_nll_oracle(mu[0, k], b[0, k], gt[0]), abs=1e-9)


def test_cross_entropy_examples(rng):
    pi = torch.zeros(1, 6, dtype=D)
    pi[0, 2] = 1.0
    assert confidence_ce(pi, torch.tensor([2])).item() == 0.0
    assert confidence_ce(torch.full((1, 6), 1 / 6, dtype=D), torch.tensor([4])).item() == pytest.approx(math.log(6), abs=1e-9)
    for _ in range(10):
        p = rng.dirichlet(np.ones(6))
        k = int(rng.integers(0, 6))
        got = confidence_ce(torch.tensor(p)[None], torch.tensor([k])).item()
        assert got == pytest.approx(cross_entropy_oracle(p, k), abs=1e-12)


def test_soft_target_is_a_distribution():
    mu = torch.randn(2, 4, 5, 2, dtype=D)
    gt = torch.randn(2, 5, 2, dtype=D)
    t = soft_confidence_target(mu, gt)
    assert torch.allclose(t.sum(-1), torch.ones(2, dtype=D))
    pi = torch.softmax(torch.randn(2, 4, dtype=D), -1)
    ce = confidence_ce(pi, torch.tensor([0, 0]), t)
    assert torch.allclose(ce, -(t * pi.log()).sum(-1))


@pytest.mark.parametrize("x,want", [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-1.0, 0.5), (0.0, 0.0), (-3.0, 2.5)])
def test_smooth_l1_values(x, want):
    assert smooth_l1(torch.tensor(x, dtype=D)).item() == want == smooth_l1_oracle(x)


def test_smooth_l1_reg_single_step():
    gt = torch.zeros(1, 1, 2, dtype=D)
    mu = torch.tensor([[[[0.5, 0.0]]]], dtype=D)
    assert smooth_l1_reg(mu, gt, torch.tensor([0])).item() == 0.125


def test_stage_totals():
    one = lambda v: torch.tensor(v, dtype=D)
    r = LossReport(reg_aux=one(1.0), cls_aux=one(2.0))
    assert stage_loss(1, r).item() == 3.0
    r.reg_base, r.cls_base = one(0.5), one(0.5)
    assert stage_loss(2, r, lambda1=1.0).item() == 4.0
    r.reg_refine, r.cls_refine = one(0.1), one(0.1)
    assert stage_loss(3, r, lambda1=1.0, lambda2=5.0).item() == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(MissingComponent):
        stage_loss(3, LossReport(reg_aux=one(1.0), cls_aux=one(1.0)))


def test_winner_takes_all_ignores_losing_modes():
    gt = torch.randn(1, 5, 2, dtype=D)
    mu = torch.randn(1, 3, 5, 2, dtype=D)
    mu[0, 1] = gt[0] + 0.01
    b = torch.ones_like(mu)
    k = best_mode(mu, gt)
    base_nll = laplace_nll(mu, b, gt, k)
    base_sl1 = smooth_l1_reg(mu, gt, k)
    mu2 = mu.clone()
    mu2[0, 0] += 0.3 * torch.randn(5, 2, dtype=D)
    mu2[0, 2] -= 0.2
    k2 = best_mode(mu2, gt)
    assert int(k2) == int(k) == 1
    assert torch.equal(laplace_nll(mu2, b, gt, k2), base_nll)
    assert torch.equal(smooth_l1_reg(mu2, gt, k2), base_sl1)


def test_no_ground_truth_rejected(tiny_model, rng):
    cfg = tiny_model.config
    batch = batch_for([random_scene(rng, m=2, t_obs=6, horizon=5)], cfg)
    out = tiny_model(batch, 1)
    with pytest.raises(NoGroundTruth):
        compute_losses(out, batch.gt, torch.zeros_like(batch.gt_present), 1)


def _loss_setup(stage):
    cfg = tiny_config(num_modes=3, t_obs=6, horizon=5, hyperedge_size=2)
    model = randomize(TrajectoryPredictor(cfg).double(), seed=21, scale=0.3)
    batch = batch_for([random_scene(np.random.default_rng(77), m=3, t_obs=6, horizon=5, spread=4.0)], cfg)
    return model, batch


@pytest.mark.parametrize("component", ["reg_aux", "cls_aux", "reg_base", "cls_base", "reg_refine", "cls_refine"])
def test_component_gradients(component):
    model, batch = _loss_setup(3)

    def scalar():
        return getattr(compute_losses(model(batch, 3), batch.gt, batch.gt_present, 3), component)

    errs = fd_check(dict(model.named_parameters()), scalar, per_array=3)
    bad = {k: e for k, e in errs.items() if e >= 1e-4}
    assert not bad, bad
