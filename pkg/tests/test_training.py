import json

import numpy as np
import pytest
import torch

from conftest import fd_check, randomize, tiny_config, batch_for, random_scene
from hypertraj import data as D
from hypertraj.batching import collate
from hypertraj.checkpoint import (
    decode_array,
    dumps,
    encode_array,
    model_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from hypertraj.errors import CheckpointStageMismatch, ConfigError
from hypertraj.losses import compute_losses
from hypertraj.model import STAGE_MODULES, TrajectoryPredictor
from hypertraj.training import Dataset, StageConfig, evaluate, run_stage, write_log_csv


def small_cfg(stage, **kw):
    model = dict(hidden=8, num_modes=3, hyperedge_size=3)
    base = dict(stage=stage, epochs=2, batch_size=4, lr=1e-3, seed=0, model=model)
    base.update(kw)
    return StageConfig.from_dict(base)


@pytest.fixture(scope="module")
def corpus():
    specs = D.generate_specs(10, seed=3)
    scenes = [D.generate(s) for s in specs]
    cfg = small_cfg(1)
    return Dataset.from_scenes(scenes[:8], cfg.model), Dataset.from_scenes(scenes[8:], cfg.model)


@pytest.fixture(scope="module")
def staged(corpus):
    train, ev = corpus
    r1 = run_stage(small_cfg(1), train, None, ev)
    r2 = run_stage(small_cfg(2), train, r1.checkpoint, ev)
    return r1, r2


def test_config_validation():
    with pytest.raises(ConfigError):
        StageConfig.from_dict({"stage": 1, "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        StageConfig.from_dict({"stage": 4})
    with pytest.raises(ConfigError):
        StageConfig.from_dict({"stage": 1, "model": {"width": 3}})
    with pytest.raises(ConfigError):
        StageConfig.from_dict({"stage": 1, "optimizer": "lbfgs"})
    assert StageConfig.from_dict({"stage": 2, "optimizer": "sgd"}).optimizer == "sgd"


def test_stage_requires_previous_checkpoint(corpus, staged):
    train, _ = corpus
    r1, r2 = staged
    with pytest.raises(CheckpointStageMismatch):
        run_stage(small_cfg(2), train, None)
    with pytest.raises(CheckpointStageMismatch):
        run_stage(small_cfg(3), train, r1.checkpoint)
    with pytest.raises(CheckpointStageMismatch):
        run_stage(small_cfg(1), train, r1.checkpoint)


def test_one_step_decreases_stage1_loss(corpus):
    train, _ = corpus
    cfg = small_cfg(1)
    model = TrajectoryPredictor(cfg.model, seed=0)
    batch = collate(train.arrays[:1], 2, 2)
    opt = torch.optim.SGD(model.stage_parameters(1).values(), lr=1e-3)
    before = compute_losses(model(batch, 1), batch.gt, batch.gt_present, 1).total
    opt.zero_grad()
    before.backward()
    opt.step()
    after = compute_losses(model(batch, 1), batch.gt, batch.gt_present, 1).total
    assert after.item() < before.item()


def test_smoothed_loss_decreases(corpus):
    train, _ = corpus
    res = run_stage(small_cfg(1, epochs=50, batch_size=10), train)
    totals = np.array([r["total"] for r in res.log_rows])
    smooth = np.convolve(totals, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) < 0)


def test_stage_trains_only_its_groups(corpus, staged):
    r1, r2 = staged
    before = model_from_checkpoint(r1.checkpoint)
    after = r2.model
    for name, p in before.stage_parameters(1).items():
        # stage 2 still updates stage-1 groups; the refiner is untouched
        assert p.shape == after.stage_parameters(2)[name].shape
    ref0 = TrajectoryPredictor(before.config, seed=0).refiner
    for (n, a), (_, b) in zip(ref0.named_parameters(), after.refiner.named_parameters()):
        assert torch.equal(a, b), n


def test_checkpoint_contents(staged):
    r1, r2 = staged
    groups1 = {k.split(".")[0] for k in r1.checkpoint["arrays"]}
    assert groups1 == set(STAGE_MODULES[1])
    assert {k.split(".")[0] for k in r2.checkpoint["arrays"]} == set(STAGE_MODULES[2])
    assert r1.checkpoint["stage"] == 1 and r1.checkpoint["version"] == 1


def test_checkpoint_round_trip(tmp_path, staged):
    r1, _ = staged
    save_checkpoint(r1.checkpoint, tmp_path / "c.json")
    back = read_checkpoint(tmp_path / "c.json")
    assert dumps(back) == dumps(r1.checkpoint)
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(decode_array(encode_array(a)), a)


def test_stage1_checkpoint_loads_into_later_stages(corpus, staged):
    r1, _ = staged
    train, _ = corpus
    model = model_from_checkpoint(r1.checkpoint)
    batch = collate(train.arrays[:2], 2, 2)
    out = model(batch, 3)
    assert torch.equal(out.aux.mu, out.base.mu)
    assert torch.equal(out.refined.mu, out.base.mu)


def test_stage2_start_main_equals_aux(corpus, staged):
    r1, _ = staged
    train, _ = corpus
    model = model_from_checkpoint(r1.checkpoint)
    out = model(collate(train.arrays, 2, 2), 2)
    for field in ("mu", "b", "pi"):
        assert torch.equal(getattr(out.aux, field), getattr(out.base, field))


def test_stage3_start_metrics_equal_stage2(corpus, staged):
    _, r2 = staged
    _, ev = corpus
    model = model_from_checkpoint(r2.checkpoint)
    m2 = evaluate(model, ev, 2)
    m3 = evaluate(model, ev, 3)
    assert (m2.min_ade, m2.min_fde, m2.miss_rate) == (m3.min_ade, m3.min_fde, m3.miss_rate)
    assert abs(m2.brier_min_fde - m3.brier_min_fde) < 1e-6


def test_determinism(corpus):
    train, ev = corpus
    a = run_stage(small_cfg(1), train, None, ev)
    b = run_stage(small_cfg(1), train, None, ev)
    assert dumps(a.checkpoint) == dumps(b.checkpoint)


def test_sgd_and_constant_schedule(corpus):
    train, _ = corpus
    res = run_stage(small_cfg(1, optimizer="sgd", schedule="constant", epochs=1), train)
    assert res.log_rows[0]["lr"] == pytest.approx(1e-3)


def test_log_csv(tmp_path, staged):
    r1, _ = staged
    write_log_csv(r1.log_rows, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("stage,epoch,lr") and len(lines) == 1 + len(r1.log_rows)


def test_full_stage3_loss_gradients():
    cfg = tiny_config(num_modes=3, t_obs=6, horizon=5, hyperedge_size=2)
    model = randomize(TrajectoryPredictor(cfg).double(), seed=31, scale=0.3)
    batch = batch_for([random_scene(np.random.default_rng(5), m=3, t_obs=6, horizon=5, spread=4.0)], cfg)

    def scalar():
        return compute_losses(model(batch, 3), batch.gt, batch.gt_present, 3, 1.0, 5.0).total

    params = {k: v for k, v in model.named_parameters() if k.startswith(("hyper", "refiner", "main_decoder"))}
    errs = fd_check(params, scalar, per_array=4)
    bad = {k: e for k, e in errs.items() if e >= 1e-4}
    assert not bad, bad
