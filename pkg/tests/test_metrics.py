import math

import numpy as np
import pytest

from hypertraj.errors import EmptyBatch, EmptyPrediction
from hypertraj.metrics import (
    aggregate,
    brier_min_fde,
    fde_per_mode,
    heading_change,
    interaction_level,
    is_miss,
    min_ade,
    min_fde,
    miss_rate,
)
from hypertraj.scene import AgentTrack, Scene
from oracles import metrics_oracle


def random_case(rng, k=6, n=30):
    gt = np.cumsum(rng.normal(0.0, 1.0, size=(n, 2)), axis=0)
    preds = gt + rng.normal(0.0, rng.uniform(0.1, 3.0), size=(k, n, 2))
    pi = rng.dirichlet(np.ones(k))
    return preds, pi, gt


def test_min_ade_examples():
    gt = np.zeros((30, 2))
    preds = np.stack([gt + 1.0, gt, gt - 2.0])
    assert min_ade(preds, gt) == 0.0
    assert min_ade((gt + np.array([3.0, 4.0]))[None], gt) == 5.0


def test_min_fde_examples():
    gt = np.zeros((5, 2))
    assert min_fde(gt[None], gt) == 0.0
    off = gt.copy()
    off[-1] = (0.0, 2.0)
    assert min_fde(off[None], gt) == 2.0


def test_miss_boundary():
    assert is_miss(2.1) and not is_miss(2.0)
    gt = np.zeros((3, 2))
    a = np.zeros((1, 3, 2))
    a[0, -1] = (1.9, 0.0)
    b = np.zeros((1, 3, 2))
    b[0, -1] = (2.5, 0.0)
    assert miss_rate([(a, gt), (b, gt)]) == 0.5
    c = np.zeros((1, 3, 2))
    c[0, -1] = (0.0, 2.0)
    assert miss_rate([(c, gt)]) == 0.0
    with pytest.raises(EmptyBatch):
        miss_rate([])


def test_brier_examples(rng):
    preds, _, gt = random_case(rng)
    k = int(np.argmin(fde_per_mode(preds, gt)))
    onehot = np.eye(6)[k]
    assert brier_min_fde(preds, onehot, gt) == min_fde(preds, gt)
    assert brier_min_fde(preds, np.full(6, 1 / 6), gt) == pytest.approx(min_fde(preds, gt) + (5 / 6) ** 2, abs=1e-12)


def test_empty_prediction():
    with pytest.raises(EmptyPrediction):
        min_ade(np.zeros((0, 3, 2)), np.zeros((3, 2)))


def test_batch_oracle(rng):
    cases = [random_case(rng) for _ in range(50)]
    got = aggregate([c[0] for c in cases], [c[1] for c in cases], [c[2] for c in cases]).to_dict()
    want = metrics_oracle([(p.tolist(), pi.tolist(), g.tolist()) for p, pi, g in cases])
    for key, val in want.items():
        assert abs(got[key] - val) <= 1e-9, key


def test_brier_bounds_and_fde_membership(rng):
    for _ in range(30):
        preds, pi, gt = random_case(rng)
        gap = brier_min_fde(preds, pi, gt) - min_fde(preds, gt)
        assert 0.0 <= gap <= 1.0
        assert min_fde(preds, gt) in fde_per_mode(preds, gt).tolist()


def test_rigid_invariance(rng):
    preds, pi, gt = random_case(rng)
    th = 0.83
    r = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    t = np.array([123.0, -45.0])
    p2, g2 = preds @ r.T + t, gt @ r.T + t
    assert min_ade(p2, g2) == pytest.approx(min_ade(preds, gt), abs=1e-9)
    assert brier_min_fde(p2, pi, g2) == pytest.approx(brier_min_fde(preds, pi, gt), abs=1e-9)


def test_buckets_partition(rng):
    cases = [random_case(rng) for _ in range(12)]
    levels = ["slight", "moderate", "strong"] * 4
    rep = aggregate([c[0] for c in cases], [c[1] for c in cases], [c[2] for c in cases], levels)
    assert sum(b.count for b in rep.buckets.values()) == 12
    mean = sum(b.min_fde * b.count for b in rep.buckets.values()) / 12
    assert mean == pytest.approx(rep.min_fde, abs=1e-12)


def straight(aid, y, speed=1.0, t_obs=20, n=30):
    xs = speed * np.arange(t_obs + n, dtype=float)
    pts = np.stack([xs, np.full_like(xs, y)], axis=1)
    return AgentTrack(aid, pts[:t_obs]), pts[t_obs:]


def scene_of(tracks):
    return Scene([t for t, _ in tracks], [], {t.id: g for t, g in tracks})


def test_lone_straight_agent_is_slight():
    assert interaction_level(scene_of([straight("a", 0.0)])) == "slight"


def test_six_neighbors_one_turning_is_strong():
    tracks = [straight("c", 0.0)] + [straight(f"n{i}", 3.0 * (i + 1)) for i in range(6)]
    obs, fut = tracks[3]
    # quarter-circle turn after the last observation
    ang = np.linspace(0, math.pi / 2, len(fut) + 1)[1:]
    start = obs.positions[-1]
    fut = start + 10.0 * np.stack([np.sin(ang), 1 - np.cos(ang)], axis=1)
    tracks[3] = (obs, fut)
    assert interaction_level(scene_of(tracks)) == "strong"


def test_three_straight_neighbors_is_moderate():
    tracks = [straight("c", 0.0)] + [straight(f"n{i}", 3.0 * (i + 1)) for i in range(3)]
    assert interaction_level(scene_of(tracks)) == "moderate"


def test_heading_change_straight_is_zero():
    obs = np.stack([np.arange(10.0), np.zeros(10)], axis=1)
    fut = np.stack([np.arange(10.0, 40.0), np.zeros(30)], axis=1)
    assert heading_change(obs, fut) == 0.0
