"""Synthetic scenarios, the scene JSON format and the Argoverse-1 CSV loader."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import pandas as pd

from .errors import InvalidSpec, MalformedCsv, SchemaViolation, TooShort
from .scene import AgentTrack, LaneSegment, Scene

KINDS = ("straight", "lane_change", "merge", "intersection", "head_on")
LANE_WIDTH = 3.5
MAX_SPEED = 30.0
MAX_CURVATURE = 0.2
SUBSTEPS = 10

# ---------------------------------------------------------------- synthetic


@dataclass
class ScenarioSpec:
    kind: str = "straight"
    agent_count: int = 4
    seed: int = 0
    noise_std: float = 0.03
    dt: float = 0.1
    t_obs: int = 20
    horizon: int = 30

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.agent_count < 1:
            raise InvalidSpec("agent_count must be >= 1")
        if self.noise_std < 0:
            raise InvalidSpec("noise_std must be >= 0")
        if self.dt <= 0 or self.t_obs < 2 or self.horizon < 1:
            raise InvalidSpec("dt > 0, t_obs >= 2 and horizon >= 1 required")


@dataclass
class _Plan:
    """One agent's kinematic plan: start pose, speed profile, arc-length curvature pieces."""

    start: np.ndarray
    heading: float
    speed: float
    accel_obs: float
    accel_future: float
    turns: Tuple[Tuple[float, float, float], ...] = ()  # (s_start, s_end, curvature)


def _curvature(turns, s: float) -> float:
    for s0, s1, k in turns:
        if s0 <= s < s1:
            return k
    return 0.0


def integrate(plan: _Plan, steps: int, dt: float, t_obs: int) -> np.ndarray:
    """Unicycle integration along piecewise-constant curvature in arc length."""
    pos = np.array(plan.start, dtype=np.float64)
    heading, v, s = plan.heading, plan.speed, 0.0
    out = np.zeros((steps, 2))
    out[0] = pos
    h = dt / SUBSTEPS
    for t in range(1, steps):
        a = plan.accel_obs if t < t_obs else plan.accel_future
        for _ in range(SUBSTEPS):
            v = min(max(v + a * h, 0.0), MAX_SPEED)
            ds = v * h
            k = _curvature(plan.turns, s + 0.5 * ds)
            heading += k * ds
            pos = pos + ds * np.array([math.cos(heading - 0.5 * k * ds), math.sin(heading - 0.5 * k * ds)])
            s += ds
        out[t] = pos
    return out


def _arc_length_until(plan: _Plan, t_steps: int, dt: float, t_obs: int) -> float:
    """Distance travelled after ``t_steps`` steps under the plan's speed profile."""
    v, s = plan.speed, 0.0
    h = dt / SUBSTEPS
    for t in range(1, t_steps + 1):
        a = plan.accel_obs if t < t_obs else plan.accel_future
        for _ in range(SUBSTEPS):
            v = min(max(v + a * h, 0.0), MAX_SPEED)
            s += v * h
    return s


def _polyline_lanes(points: np.ndarray, attrs: Sequence[float]) -> List[LaneSegment]:
    return [LaneSegment(points[i], points[i + 1], np.asarray(attrs, dtype=float)) for i in range(len(points) - 1)]


def _straight_lane(y: float, heading_sign: int, x0: float = -80.0, x1: float = 120.0, step: float = 10.0):
    xs = np.arange(x0, x1 + 1e-9, step)
    if heading_sign < 0:
        xs = xs[::-1]
    return _polyline_lanes(np.stack([xs, np.full_like(xs, y)], axis=1), (0.0, 0.0))


def _road_lanes(same_dir: Sequence[float], opposite: Sequence[float]) -> List[LaneSegment]:
    lanes: List[LaneSegment] = []
    for y in same_dir:
        lanes += _straight_lane(y, +1)
    for y in opposite:
        lanes += _straight_lane(y, -1)
    return lanes


class _Builder:
    def __init__(self, spec: ScenarioSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.plans: List[_Plan] = []
        self.lanes: List[LaneSegment] = []
        self.occupied: List[Tuple[float, float]] = []  # (lane key, longitudinal position at T_obs)

    @property
    def obs_time(self) -> float:
        return (self.spec.t_obs - 1) * self.spec.dt

    def future_accel(self) -> float:
        # denser traffic -> less predictable longitudinal behaviour
        sigma = 0.3 + 0.15 * (self.spec.agent_count - 1)
        return float(np.clip(self.rng.normal(0.0, sigma), -3.0, 3.0))

    def free_slot(self, lane_key: float, lo: float, hi: float, gap: float = 9.0) -> Optional[float]:
        for _ in range(50):
            x = float(self.rng.uniform(lo, hi))
            if all(abs(x - ox) >= gap for k, ox in self.occupied if k == lane_key):
                self.occupied.append((lane_key, x))
                return x
        return None

    def road_agent(self, y: float, direction: int, x_at_obs: float, speed: float, turns=()) -> _Plan:
        """Agent on a straight road whose position at T_obs is roughly ``x_at_obs``."""
        x0 = x_at_obs - direction * speed * self.obs_time
        return _Plan(
            start=np.array([x0, y]),
            heading=0.0 if direction > 0 else math.pi,
            speed=speed,
            accel_obs=float(self.rng.normal(0.0, 0.1)),
            accel_future=self.future_accel(),
            turns=tuple(turns),
        )

    def fill_road(self, lanes_same: Sequence[float], lanes_opp: Sequence[float], count: int) -> None:
        options = [(y, +1) for y in lanes_same] + [(y, -1) for y in lanes_opp]
        for _ in range(count):
            for _attempt in range(20):
                y, d = options[int(self.rng.integers(len(options)))]
                x = self.free_slot(y, -25.0, 25.0)
                if x is not None:
                    break
            else:
                continue
            self.plans.append(self.road_agent(y, d, x, float(self.rng.uniform(7.0, 14.0))))


def _lane_change_turns(s0: float, length: float, dy: float) -> Tuple[Tuple[float, float, float], ...]:
    half = 0.5 * length
    c = dy / (half * half)
    return ((s0, s0 + half, c), (s0 + half, s0 + length, -c))


def _gen_straight(b: _Builder) -> None:
    same, opp = (0.0, LANE_WIDTH, 2 * LANE_WIDTH), (-LANE_WIDTH, -2 * LANE_WIDTH)
    b.lanes = _road_lanes(same, opp)
    b.occupied.append((0.0, 0.0))
    b.plans.append(b.road_agent(0.0, +1, 0.0, float(b.rng.uniform(7.0, 14.0))))
    b.fill_road(same, opp, b.spec.agent_count - 1)


def _gen_lane_change(b: _Builder) -> None:
    same, opp = (0.0, LANE_WIDTH, 2 * LANE_WIDTH), (-LANE_WIDTH,)
    b.lanes = _road_lanes(same, opp)
    speed = float(b.rng.uniform(8.0, 14.0))
    central = b.road_agent(LANE_WIDTH, +1, 0.0, speed)
    s_obs = _arc_length_until(central, b.spec.t_obs - 1, b.spec.dt, b.spec.t_obs)
    dy = LANE_WIDTH * (1 if b.rng.random() < 0.5 else -1)
    central.turns = _lane_change_turns(s_obs + float(b.rng.uniform(-5.0, 8.0)), float(b.rng.uniform(30.0, 42.0)), dy)
    b.occupied.append((LANE_WIDTH, 0.0))
    b.plans.append(central)
    b.fill_road(same, opp, b.spec.agent_count - 1)


def _gen_merge(b: _Builder) -> None:
    same = (0.0, LANE_WIDTH)
    b.lanes = _road_lanes(same, ())
    angle = math.radians(float(b.rng.uniform(15.0, 22.0)))
    merge_x, merge_y = 15.0, -LANE_WIDTH
    ramp_len = 60.0
    ramp_start = np.array([merge_x - ramp_len * math.cos(angle), merge_y - ramp_len * math.sin(angle)])
    ramp_pts = np.linspace(ramp_start, [merge_x, merge_y], 7)
    b.lanes += _polyline_lanes(ramp_pts, (0.0, 1.0))
    acc_lane = np.stack([np.arange(merge_x, 60.0 + 1e-9, 9.0), np.full(6, merge_y)], axis=1)
    b.lanes += _polyline_lanes(acc_lane, (0.0, 0.0))
    count = b.spec.agent_count
    n_ramp = max(1, count // 3)
    for r in range(n_ramp):
        speed = float(b.rng.uniform(8.0, 12.0))
        dist_before_merge = float(b.rng.uniform(5.0, 22.0)) + 12.0 * r
        x_obs = merge_x - dist_before_merge * math.cos(angle)
        y_obs = merge_y - dist_before_merge * math.sin(angle)
        start = np.array([x_obs, y_obs]) - speed * b.obs_time * np.array([math.cos(angle), math.sin(angle)])
        plan = _Plan(start, angle, speed, float(b.rng.normal(0.0, 0.1)), b.future_accel())
        s_obs = _arc_length_until(plan, b.spec.t_obs - 1, b.spec.dt, b.spec.t_obs)
        # merge onto the acceleration lane, then drift into the right main lane
        bend = 25.0
        s_bend = s_obs + dist_before_merge - 0.5 * bend
        plan.turns = ((s_bend, s_bend + bend, -angle / bend),) + _lane_change_turns(
            s_bend + bend + 5.0, 35.0, LANE_WIDTH
        )
        b.plans.append(plan)
    b.fill_road(same, (), count - n_ramp)


# intersection geometry: right-hand traffic, box |x|, |y| <= 7
_BOX = 7.0
_HALF = LANE_WIDTH / 2
_RIGHT_R = _BOX - _HALF
_LEFT_R = _BOX + _HALF


def _turn_turns(s_entry: float, maneuver: str):
    if maneuver == "right":
        return ((s_entry, s_entry + 0.5 * math.pi * _RIGHT_R, -1.0 / _RIGHT_R),)
    if maneuver == "left":
        return ((s_entry, s_entry + 0.5 * math.pi * _LEFT_R, 1.0 / _LEFT_R),)
    return ()


def _arm_rotation(arm: int) -> np.ndarray:
    a = 0.5 * math.pi * arm
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _intersection_lanes() -> List[LaneSegment]:
    lanes: List[LaneSegment] = []
    for arm in range(4):
        rot = _arm_rotation(arm)
        inbound = np.stack([np.linspace(-60.0, -_BOX, 6), np.full(6, -_HALF)], axis=1) @ rot.T
        outbound = np.stack([np.linspace(-_BOX, -60.0, 6), np.full(6, _HALF)], axis=1) @ rot.T
        lanes += _polyline_lanes(inbound, (0.0, 0.0))
        lanes += _polyline_lanes(outbound, (0.0, 0.0))
        straight = np.stack([np.linspace(-_BOX, _BOX, 4), np.full(4, -_HALF)], axis=1)
        ang = np.linspace(0.0, 0.5 * math.pi, 5)
        right = np.stack([-_BOX + _RIGHT_R * np.sin(ang), -_HALF - _RIGHT_R * (1 - np.cos(ang))], axis=1)
        left = np.stack([-_BOX + _LEFT_R * np.sin(ang), -_HALF + _LEFT_R * (1 - np.cos(ang))], axis=1)
        lanes += _polyline_lanes(straight @ rot.T, (1.0, 0.0))
        lanes += _polyline_lanes(right @ rot.T, (1.0, -1.0))
        lanes += _polyline_lanes(left @ rot.T, (1.0, 1.0))
    return lanes


def _gen_intersection(b: _Builder) -> None:
    b.lanes = _intersection_lanes()
    count = b.spec.agent_count
    # at most two vehicles per approach so the whole group stays within ~30 m
    pool = [1, 2, 3, 1, 2, 3, 0]
    arms = [0] + [pool[i] for i in b.rng.permutation(len(pool))[: count - 1]] if count <= 8 else [0] + [
        int(a) for a in b.rng.integers(0, 4, size=count - 1)
    ]
    forced = int(b.rng.integers(count))  # at least one agent turns early enough to count
    # the central agent and the forced turner lead their approaches; the rest queue behind
    queue: Dict[int, float] = {}
    gaps: Dict[int, float] = {}
    order = [0] + ([forced] if forced else []) + [i for i in range(1, count) if i != forced]
    for idx in order:
        arm = arms[idx]
        gaps[idx] = float(b.rng.uniform(0.0, 3.0)) + queue.get(arm, 0.0)
        queue[arm] = gaps[idx] + 6.5
    for idx, arm in enumerate(arms):
        maneuver = str(b.rng.choice(["left", "straight", "right"], p=[0.4, 0.2, 0.4]))
        if idx == forced and maneuver == "straight":
            maneuver = "left" if b.rng.random() < 0.5 else "right"
        gap = gaps[idx]
        if gap > 6.0 and idx != forced:
            maneuver = "straight"
        speed = float(b.rng.uniform(4.0, 6.5)) if maneuver != "straight" else float(b.rng.uniform(5.0, 9.0))
        plan = _Plan(np.zeros(2), 0.0, speed, float(b.rng.normal(0.0, 0.05)), b.future_accel() * 0.5)
        s_obs = _arc_length_until(plan, b.spec.t_obs - 1, b.spec.dt, b.spec.t_obs)
        start_x = -_BOX - gap - s_obs
        plan.turns = _turn_turns(s_obs + gap, maneuver)
        rot = _arm_rotation(arm)
        plan.start = rot @ np.array([start_x, -_HALF])
        plan.heading = 0.5 * math.pi * arm
        b.plans.append(plan)


def _gen_head_on(b: _Builder) -> None:
    same, opp = (-_HALF,), (_HALF,)
    b.lanes = _road_lanes(same, opp)
    speed = float(b.rng.uniform(8.0, 13.0))
    b.occupied.append((-_HALF, 0.0))
    b.plans.append(b.road_agent(-_HALF, +1, 0.0, speed))
    if b.spec.agent_count > 1:
        oncoming_x = float(b.rng.uniform(30.0, 45.0))
        b.occupied.append((_HALF, oncoming_x))
        plan = b.road_agent(_HALF, -1, oncoming_x, float(b.rng.uniform(8.0, 13.0)))
        s_obs = _arc_length_until(plan, b.spec.t_obs - 1, b.spec.dt, b.spec.t_obs)
        # oncoming vehicle drifts toward the centre line and back
        drift = float(b.rng.uniform(0.5, 1.5))
        plan.turns = _lane_change_turns(s_obs, 25.0, drift) + _lane_change_turns(s_obs + 25.0, 25.0, -drift)
        b.plans.append(plan)
        b.fill_road(same, opp, b.spec.agent_count - 2)


_GENERATORS = {
    "straight": _gen_straight,
    "lane_change": _gen_lane_change,
    "merge": _gen_merge,
    "intersection": _gen_intersection,
    "head_on": _gen_head_on,
}


def generate(spec: ScenarioSpec) -> Scene:
    """Deterministic synthetic scene; agent 0 is the central agent."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    b = _Builder(spec, rng)
    _GENERATORS[spec.kind](b)
    steps = spec.t_obs + spec.horizon
    tracks = np.stack([integrate(p, steps, spec.dt, spec.t_obs) for p in b.plans])
    if spec.noise_std > 0:
        tracks = tracks + rng.normal(0.0, spec.noise_std, size=tracks.shape)

    # random placement in the world so nothing depends on absolute pose
    angle = float(rng.uniform(-math.pi, math.pi))
    offset = rng.uniform(-500.0, 500.0, size=2)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    tracks = tracks @ rot.T + offset

    agents, gt = [], {}
    for i, tr in enumerate(tracks):
        aid = f"a{i}"
        attrs = np.array([1.0 if i == 0 else 0.0, 0.0])
        agents.append(AgentTrack(aid, tr[: spec.t_obs], attrs))
        gt[aid] = tr[spec.t_obs :]
    lanes = [LaneSegment(l.start @ rot.T + offset, l.end @ rot.T + offset, l.attributes) for l in b.lanes]
    return Scene(agents=agents, lanes=lanes, ground_truth=gt, dt=spec.dt)


def plans_for(spec: ScenarioSpec) -> List[_Plan]:
    """Noise-free kinematic plans behind ``generate`` (used by bound checks)."""
    spec.validate()
    b = _Builder(spec, np.random.default_rng(spec.seed))
    _GENERATORS[spec.kind](b)
    return b.plans


# ---------------------------------------------------------------- JSON

_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dt", "agents", "lanes"],
    "properties": {
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "agents": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "positions"],
                "properties": {
                    "id": {"type": ["string", "integer"]},
                    "positions": {"type": "array", "items": _POINT, "minItems": 2},
                    "mask": {"type": "array", "items": {"type": "boolean"}},
                    "attributes": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
        "lanes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["start", "end"],
                "properties": {
                    "start": _POINT,
                    "end": _POINT,
                    "attributes": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
        "ground_truth": {
            "type": ["object", "null"],
            "additionalProperties": {"type": "array", "items": _POINT, "minItems": 1},
        },
    },
}


def scene_to_dict(scene: Scene) -> dict:
    return {
        "dt": scene.dt,
        "agents": [
            {
                "id": a.id,
                "positions": a.positions.tolist(),
                "mask": a.mask.tolist(),
                "attributes": a.attributes.tolist(),
            }
            for a in scene.agents
        ],
        "lanes": [
            {"start": l.start.tolist(), "end": l.end.tolist(), "attributes": l.attributes.tolist()} for l in scene.lanes
        ],
        "ground_truth": None
        if scene.ground_truth is None
        else {k: np.asarray(v).tolist() for k, v in scene.ground_truth.items()},
    }


def scene_from_dict(payload: dict) -> Scene:
    try:
        jsonschema.validate(payload, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaViolation(exc.message) from None
    try:
        agents = [
            AgentTrack(a["id"], a["positions"], a.get("attributes", []), a.get("mask")) for a in payload["agents"]
        ]
        lanes = [LaneSegment(l["start"], l["end"], l.get("attributes", [])) for l in payload["lanes"]]
        return Scene(agents, lanes, payload.get("ground_truth"), float(payload["dt"]))
    except (ValueError, KeyError) as exc:
        raise SchemaViolation(str(exc)) from None


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- Argoverse CSV

CSV_COLUMNS = ("TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME")
_TYPE_ORDER = {"AGENT": 0, "AV": 1}


def load_argoverse_csv(path, t_obs: int = 20, horizon: int = 30, dt: float = 0.1) -> Scene:
    """Argoverse-1 forecasting CSV -> Scene (AGENT first, lanes empty).

    Rows snap to the 10 Hz grid anchored at the AGENT's first timestamp when
    within half a step; the AGENT must cover all ``t_obs + horizon`` steps.
    """
    df = pd.read_csv(path, dtype={"TRACK_ID": str, "OBJECT_TYPE": str, "CITY_NAME": str})
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise MalformedCsv(f"missing columns {missing}")
    agent_rows = df[df["OBJECT_TYPE"] == "AGENT"]
    if agent_rows.empty:
        raise MalformedCsv("no AGENT track")
    steps = t_obs + horizon
    t0 = float(agent_rows["TIMESTAMP"].min())
    k = np.rint((df["TIMESTAMP"].to_numpy(dtype=float) - t0) / dt).astype(int)
    err = np.abs(df["TIMESTAMP"].to_numpy(dtype=float) - (t0 + k * dt))
    df = df.assign(_k=k, _err=err)
    df = df[(df["_err"] <= 0.5 * dt + 1e-9) & (df["_k"] >= 0) & (df["_k"] < steps)]
    # keep the closest sample per grid cell; ties resolved by value, not row order
    df = df.sort_values(["TRACK_ID", "_k", "_err", "X", "Y"]).drop_duplicates(["TRACK_ID", "_k"], keep="first")

    tracks = []
    for track_id, rows in df.groupby("TRACK_ID", sort=True):
        obj = str(rows["OBJECT_TYPE"].iloc[0])
        pos = np.zeros((steps, 2))
        valid = np.zeros(steps, dtype=bool)
        pos[rows["_k"].to_numpy()] = rows[["X", "Y"]].to_numpy(dtype=float)
        valid[rows["_k"].to_numpy()] = True
        tracks.append((_TYPE_ORDER.get(obj, 2), str(track_id), obj, pos, valid))
    tracks.sort(key=lambda r: (r[0], r[1]))

    agents, gt = [], {}
    for prio, tid, obj, pos, valid in tracks:
        if obj == "AGENT" and not valid.all():
            raise TooShort(f"AGENT track has {int(valid.sum())} of {steps} aligned steps")
        if valid[:t_obs].sum() < 2:
            continue
        attrs = np.array([1.0 if obj == "AGENT" else 0.0, 1.0 if obj == "AV" else 0.0])
        agents.append(AgentTrack(tid, pos[:t_obs], attrs, valid[:t_obs]))
        if valid[t_obs:].all():
            gt[tid] = pos[t_obs:]
    return Scene(agents=agents, lanes=[], ground_truth=gt, dt=dt)


# ---------------------------------------------------------------- datasets


def default_mixture(rng: np.random.Generator) -> Tuple[str, int]:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    lo, hi = {"straight": (1, 8), "lane_change": (1, 8), "merge": (3, 8), "intersection": (3, 8), "head_on": (2, 6)}[kind]
    return kind, int(rng.integers(lo, hi + 1))


def generate_specs(count: int, seed: int, noise_std: float = 0.03, kinds: Optional[Sequence[str]] = None) -> List[ScenarioSpec]:
    """Scenario specs for a corpus; all randomness flows from one seeded generator."""
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(count):
        kind, n = default_mixture(rng)
        if kinds is not None:
            kind = str(kinds[int(rng.integers(len(kinds)))])
        specs.append(ScenarioSpec(kind=kind, agent_count=n, seed=int(rng.integers(2**31)), noise_std=noise_std))
    for s in specs:
        s.validate()
    return specs


def spec_to_dict(spec: ScenarioSpec) -> dict:
    return asdict(spec)
