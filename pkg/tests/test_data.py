import json
import math

import numpy as np
import pandas as pd
import pytest

from hypertraj import data as D
from hypertraj.errors import InvalidSpec, MalformedCsv, SchemaViolation, TooShort
from hypertraj.metrics import interaction_level
from hypertraj.scene import AgentTrack, Scene


def all_tracks(scene):
    return [np.concatenate([a.positions, scene.ground_truth[a.id]]) for a in scene.agents]


def test_determinism():
    spec = D.ScenarioSpec("merge", 5, seed=42)
    a, b = D.generate(spec), D.generate(spec)
    assert D.scene_to_dict(a) == D.scene_to_dict(b)
    assert D.scene_to_dict(D.generate(D.ScenarioSpec("merge", 5, seed=43))) != D.scene_to_dict(a)


def test_straight_noise_free_is_collinear():
    s = D.generate(D.ScenarioSpec("straight", 1, seed=3, noise_std=0.0))
    tr = all_tracks(s)[0]
    d = tr - tr[0]
    u = d[-1] / np.linalg.norm(d[-1])
    cross = d[:, 0] * u[1] - d[:, 1] * u[0]
    assert np.abs(cross).max() < 1e-9


def test_agent_zero_is_central():
    s = D.generate(D.ScenarioSpec("head_on", 3, seed=1))
    assert s.agents[0].attributes[0] == 1.0 and all(a.attributes[0] == 0.0 for a in s.agents[1:])
    assert set(s.ground_truth) == {a.id for a in s.agents}


@pytest.mark.parametrize("kind", D.KINDS)
def test_speed_and_curvature_bounds(kind):
    for seed in range(8):
        s = D.generate(D.ScenarioSpec(kind, 6 if kind != "head_on" else 4, seed=seed, noise_std=0.0))
        for tr in all_tracks(s):
            d = np.diff(tr, axis=0)
            step = np.linalg.norm(d, axis=1)
            assert step.max() / s.dt <= D.MAX_SPEED + 1e-9
            ok = (step[1:] > 0.2) & (step[:-1] > 0.2)
            ang = np.arctan2(d[1:, 1], d[1:, 0]) - np.arctan2(d[:-1, 1], d[:-1, 0])
            ang = (ang + math.pi) % (2 * math.pi) - math.pi
            kappa = np.abs(ang[ok]) / (0.5 * (step[1:] + step[:-1]))[ok]
            assert kappa.max(initial=0.0) <= D.MAX_CURVATURE * 1.02
        for plan in D.plans_for(D.ScenarioSpec(kind, 6 if kind != "head_on" else 4, seed=seed)):
            assert all(abs(k) <= D.MAX_CURVATURE for _, _, k in plan.turns)


def test_intersection_six_agents_is_strong():
    levels = [interaction_level(D.generate(D.ScenarioSpec("intersection", 6, seed=s))) for s in range(30)]
    assert levels == ["strong"] * 30


def test_invalid_spec():
    with pytest.raises(InvalidSpec):
        D.generate(D.ScenarioSpec("roundabout", 3))
    with pytest.raises(InvalidSpec):
        D.generate(D.ScenarioSpec("straight", 0))


def test_generate_specs_deterministic():
    a = [D.spec_to_dict(s) for s in D.generate_specs(20, 7)]
    assert a == [D.spec_to_dict(s) for s in D.generate_specs(20, 7)]
    assert {s["kind"] for s in a} <= set(D.KINDS)


def test_json_round_trip(tmp_path):
    s = D.generate(D.ScenarioSpec("intersection", 4, seed=9))
    D.save_scene(s, tmp_path / "s.json")
    back = D.load_scene(tmp_path / "s.json")
    assert D.scene_to_dict(back) == D.scene_to_dict(s)


def test_json_unknown_field_rejected():
    payload = D.scene_to_dict(D.generate(D.ScenarioSpec("straight", 2, seed=1)))
    payload["agents"][0]["velocity"] = [1, 2]
    with pytest.raises(SchemaViolation):
        D.scene_from_dict(payload)
    payload = D.scene_to_dict(D.generate(D.ScenarioSpec("straight", 2, seed=1)))
    payload["weather"] = "rain"
    with pytest.raises(SchemaViolation):
        D.scene_from_dict(payload)


def test_json_empty_lanes_accepted():
    s = Scene([AgentTrack("a", [(0, 0), (1, 0)])])
    assert D.scene_from_dict(D.scene_to_dict(s)).lanes == []


def write_csv(path, rows):
    pd.DataFrame(rows, columns=list(D.CSV_COLUMNS)).to_csv(path, index=False)


def csv_rows(steps=50, t0=315967.3, others=True):
    rows = []
    for k in range(steps):
        t = t0 + 0.1 * k
        rows.append((t, "00000000-agent", "AGENT", 100.0 + k, 50.0, "PIT"))
        if others:
            rows.append((t + 0.01, "00000000-av", "AV", 90.0 + k, 46.5, "PIT"))
            if k < 30:
                rows.append((t, "zzz-other", "OTHERS", 120.0 - 0.5 * k, 53.5, "PIT"))
    return rows


def test_csv_split_convention(tmp_path):
    write_csv(tmp_path / "s.csv", csv_rows())
    s = D.load_argoverse_csv(tmp_path / "s.csv")
    assert s.t_obs == 20 and s.horizon == 30
    assert [a.id for a in s.agents] == ["00000000-agent", "00000000-av", "zzz-other"]
    assert s.agents[0].positions[-1].tolist() == [119.0, 50.0]
    assert s.ground_truth["00000000-agent"][0].tolist() == [120.0, 50.0]
    # the short track has no future, so it carries no ground truth
    assert "zzz-other" not in s.ground_truth


def test_csv_missing_column(tmp_path):
    pd.DataFrame(csv_rows()).iloc[:, [0, 1, 2, 3, 5]].set_axis(
        ["TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "CITY_NAME"], axis=1
    ).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(MalformedCsv):
        D.load_argoverse_csv(tmp_path / "bad.csv")


def test_csv_too_short(tmp_path):
    write_csv(tmp_path / "short.csv", csv_rows(steps=40))
    with pytest.raises(TooShort):
        D.load_argoverse_csv(tmp_path / "short.csv")


def test_csv_row_order_insensitive(tmp_path):
    rows = csv_rows()
    write_csv(tmp_path / "a.csv", rows)
    perm = np.random.default_rng(0).permutation(len(rows))
    write_csv(tmp_path / "b.csv", [rows[i] for i in perm])
    a = D.scene_to_dict(D.load_argoverse_csv(tmp_path / "a.csv"))
    b = D.scene_to_dict(D.load_argoverse_csv(tmp_path / "b.csv"))
    assert a == b
