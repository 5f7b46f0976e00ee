"""Prediction-conditioned motion planner.

The ego's most likely predicted trajectory is inverted through a kinematic
bicycle model into (acceleration, steering) controls; those seed a damped
Gauss-Newton (Levenberg-Marquardt) search over the control sequence that
minimises weighted comfort, lane-adherence and safety residuals against the
predicted neighbour positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import DegenerateTrajectory, NonFiniteCost

WHEELBASE = 2.8
D_SAFE = 3.0
MAX_ACCEL = 5.0
MAX_STEER = 0.6
MIN_SPEED_FOR_STEER = 0.1
MIN_SEGMENT = 1e-6


@dataclass
class EgoState:
    position: np.ndarray
    heading: float
    speed: float

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


@dataclass
class CostWeights:
    comfort: float = 1.0
    lane: float = 2.0
    safety: float = 10.0

    def __post_init__(self) -> None:
        if min(self.comfort, self.lane, self.safety) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass
class PlannerProblem:
    ego0: EgoState
    controls0: np.ndarray  # (N, 2): acceleration, steering
    neighbors: np.ndarray  # (P, N, 2) predicted positions
    lane_ref: np.ndarray  # (L, 2) centreline polyline
    weights: CostWeights = field(default_factory=CostWeights)
    dt: float = 0.1
    wheelbase: float = WHEELBASE
    d_safe: float = D_SAFE

    def __post_init__(self) -> None:
        self.controls0 = clamp_controls(np.asarray(self.controls0, dtype=np.float64).reshape(-1, 2))
        n = len(self.controls0)
        self.neighbors = np.asarray(self.neighbors, dtype=np.float64).reshape(-1, n, 2)
        self.lane_ref = np.asarray(self.lane_ref, dtype=np.float64).reshape(-1, 2)
        if len(self.lane_ref) < 2:
            raise ValueError("lane reference needs at least two points")

    @property
    def horizon(self) -> int:
        return len(self.controls0)


def clamp_controls(u: np.ndarray) -> np.ndarray:
    u = np.array(u, dtype=np.float64, copy=True)
    u[..., 0] = np.clip(u[..., 0], -MAX_ACCEL, MAX_ACCEL)
    u[..., 1] = np.clip(u[..., 1], -MAX_STEER, MAX_STEER)
    return u


def _wrap(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def rollout_states(u: np.ndarray, ego0: EgoState, dt: float = 0.1, wheelbase: float = WHEELBASE):
    """Positions (N, 2), headings (N,), speeds (N,) after each control step.

    Each step first updates speed, then heading with the new speed, then
    moves along the new heading; this ordering makes the inverse exact.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    n = len(u)
    pos = np.zeros((n, 2))
    head = np.zeros(n)
    spd = np.zeros(n)
    p = ego0.position.copy()
    psi, v = float(ego0.heading), float(ego0.speed)
    for k in range(n):
        a, delta = u[k]
        v = max(0.0, v + a * dt)
        psi = psi + v * math.tan(delta) / wheelbase * dt
        p = p + v * dt * np.array([math.cos(psi), math.sin(psi)])
        pos[k], head[k], spd[k] = p, psi, v
    return pos, head, spd


def rollout(u: np.ndarray, ego0: EgoState, dt: float = 0.1, wheelbase: float = WHEELBASE) -> np.ndarray:
    return rollout_states(u, ego0, dt, wheelbase)[0]


def trajectory_to_controls(traj: np.ndarray, ego0: EgoState, dt: float = 0.1, wheelbase: float = WHEELBASE) -> np.ndarray:
    """Inverse bicycle model: (N, 2) world positions -> clamped (N, 2) controls."""
    traj = np.asarray(traj, dtype=np.float64).reshape(-1, 2)
    if len(traj) == 0:
        raise DegenerateTrajectory("empty trajectory")
    pts = np.vstack([ego0.position, traj])
    seg = np.diff(pts, axis=0)
    speeds = np.hypot(seg[:, 0], seg[:, 1]) / dt
    headings = np.zeros(len(seg))
    prev_h = float(ego0.heading)
    for k, (dx, dy) in enumerate(seg):
        if math.hypot(dx, dy) >= MIN_SEGMENT:
            # unwrap relative to the previous heading
            prev_h = prev_h + float(_wrap(math.atan2(dy, dx) - prev_h))
        headings[k] = prev_h
    prev_v = np.concatenate([[ego0.speed], speeds[:-1]])
    prev_head = np.concatenate([[ego0.heading], headings[:-1]])
    accel = (speeds - prev_v) / dt
    rate = (headings - prev_head) / dt
    steer = np.arctan(wheelbase * rate / np.maximum(speeds, MIN_SPEED_FOR_STEER))
    return clamp_controls(np.stack([accel, steer], axis=1))


def _lane_geometry(points: np.ndarray, lane: np.ndarray):
    """Signed lateral offset and segment heading of the closest polyline point."""
    a, b = lane[:-1], lane[1:]
    ab = b - a
    length2 = np.maximum((ab**2).sum(-1), 1e-12)
    rel = points[:, None, :] - a[None]
    s = np.clip((rel * ab[None]).sum(-1) / length2, 0.0, 1.0)
    closest = a[None] + s[..., None] * ab[None]
    dist = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    seg = np.argmin(dist, axis=1)
    idx = np.arange(len(points))
    d = ab[seg]
    r = points - closest[idx, seg]
    cross = d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]
    lateral = np.sign(cross) * dist[idx, seg]
    heading = np.arctan2(d[:, 1], d[:, 0])
    return lateral, heading


def residual_terms(u: np.ndarray, problem: PlannerProblem) -> Dict[str, np.ndarray]:
    """Weighted residual blocks ``xi * C`` keyed by cost term."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    dt = problem.dt
    pos, head, _ = rollout_states(u, problem.ego0, dt, problem.wheelbase)
    accel, steer = u[:, 0], u[:, 1]
    comfort = np.concatenate([accel, np.diff(accel) / dt, steer, np.diff(steer) / dt])
    lateral, lane_heading = _lane_geometry(pos, problem.lane_ref)
    lane = np.concatenate([lateral, _wrap(head - lane_heading)])
    if len(problem.neighbors):
        dist = np.linalg.norm(pos[None] - problem.neighbors, axis=-1)  # (P, N)
        safety = np.maximum(0.0, problem.d_safe - dist).ravel()
    else:
        safety = np.zeros(0)
    w = problem.weights
    return {"comfort": w.comfort * comfort, "lane": w.lane * lane, "safety": w.safety * safety}


def residuals(u: np.ndarray, problem: PlannerProblem) -> np.ndarray:
    return np.concatenate(list(residual_terms(u, problem).values()))


def cost(u: np.ndarray, problem: PlannerProblem) -> float:
    r = residuals(u, problem)
    return 0.5 * float(r @ r)


def cost_breakdown(u: np.ndarray, problem: PlannerProblem) -> Dict[str, float]:
    return {k: 0.5 * float(v @ v) for k, v in residual_terms(u, problem).items()}


def jacobian_fd(u: np.ndarray, problem: PlannerProblem, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of the residual vector w.r.t. flattened controls."""
    x = np.asarray(u, dtype=np.float64).ravel()
    cols = []
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        cols.append((residuals(xp, problem) - residuals(xm, problem)) / (2 * eps))
    return np.stack(cols, axis=1)


@dataclass
class PlanResult:
    controls: np.ndarray
    positions: np.ndarray
    initial_positions: np.ndarray
    costs: List[float]  # accepted iterates, starting with the initial cost
    breakdowns: List[Dict[str, float]]
    iterations: int
    converged: bool

    def min_distance(self, neighbors: np.ndarray, which: str = "final") -> float:
        pos = self.positions if which == "final" else self.initial_positions
        if len(neighbors) == 0:
            return math.inf
        return float(np.linalg.norm(pos[None] - neighbors, axis=-1).min())

    def to_dict(self) -> dict:
        return {
            "controls": self.controls.tolist(),
            "positions": self.positions.tolist(),
            "initial_positions": self.initial_positions.tolist(),
            "iterations": [
                {"iteration": i, "cost": c, "terms": b} for i, (c, b) in enumerate(zip(self.costs, self.breakdowns))
            ],
            "converged": self.converged,
        }


def optimize(
    problem: PlannerProblem,
    max_iterations: int = 100,
    rel_tol: float = 1e-6,
    damping: float = 1e-3,
    max_damping: float = 1e10,
    abs_tol: float = 1e-12,
) -> PlanResult:
    """Levenberg-Marquardt over the control sequence with box bounds by clamping.

    A step is accepted only if it lowers the cost; otherwise damping grows
    tenfold. Stops when the relative decrease falls below ``rel_tol`` or the
    cost drops under ``abs_tol``.
    """
    x = problem.controls0.ravel().copy()
    r = residuals(x, problem)
    c = 0.5 * float(r @ r)
    if not math.isfinite(c):
        raise NonFiniteCost("initial cost is not finite")
    costs = [c]
    breakdowns = [cost_breakdown(x, problem)]
    lam = damping
    converged = c <= abs_tol
    it = 0
    while not converged and it < max_iterations:
        it += 1
        jac = jacobian_fd(x, problem)
        g = jac.T @ r
        a = jac.T @ jac
        diag = np.diag(a).copy() + 1e-9
        accepted = False
        while lam <= max_damping:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = clamp_controls(x.reshape(-1, 2) + step.reshape(-1, 2)).ravel()
            r_new = residuals(x_new, problem)
            c_new = 0.5 * float(r_new @ r_new)
            if not math.isfinite(c_new):
                raise NonFiniteCost("cost became non-finite")
            if c_new < c:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        decrease = (c - c_new) / max(c, 1e-300)
        x, r, c = x_new, r_new, c_new
        costs.append(c)
        breakdowns.append(cost_breakdown(x, problem))
        lam = max(lam / 10.0, 1e-12)
        if decrease < rel_tol or c <= abs_tol:
            converged = True
    controls = x.reshape(-1, 2)
    return PlanResult(
        controls=controls,
        positions=rollout(controls, problem.ego0, problem.dt, problem.wheelbase),
        initial_positions=rollout(problem.controls0, problem.ego0, problem.dt, problem.wheelbase),
        costs=costs,
        breakdowns=breakdowns,
        iterations=it,
        converged=converged,
    )


def _oncoming(n: int, dt: float, speed: float, lateral: np.ndarray) -> np.ndarray:
    t = dt * np.arange(1, n + 1)
    # starts 2 s of closing distance away
    return np.stack([4.0 * speed - speed * t, lateral], axis=1)[None]


def head_on_problem(n: int = 30, dt: float = 0.1, speed: float = 10.0) -> PlannerProblem:
    """Scripted head-on conflict: the ego's initial plan drifts into the opposing lane.

    The oncoming vehicle keeps its lane (3.5 m left of the ego centreline);
    the initial plan meets it 0.5 m apart.
    """
    t = dt * np.arange(1, n + 1)
    s = np.clip(t / 2.0, 0.0, 1.0)
    plan = np.stack([speed * t, 3.0 * (3 * s**2 - 2 * s**3)], axis=1)
    ego0 = EgoState(np.zeros(2), 0.0, speed)
    u0 = trajectory_to_controls(plan, ego0, dt)
    lane = np.stack([np.linspace(-20.0, 80.0, 11), np.zeros(11)], axis=1)
    return PlannerProblem(ego0, u0, _oncoming(n, dt, speed, np.full(n, 3.5)), lane, dt=dt)


def cut_in_problem(n: int = 30, dt: float = 0.1, speed: float = 10.0) -> PlannerProblem:
    """Oncoming vehicle briefly cuts into the ego lane while the ego keeps straight."""
    t = dt * np.arange(1, n + 1)
    lateral = 3.5 - 3.2 * np.exp(-0.5 * ((t - 2.0) / 0.35) ** 2)
    ego0 = EgoState(np.zeros(2), 0.0, speed)
    lane = np.stack([np.linspace(-20.0, 80.0, 11), np.zeros(11)], axis=1)
    return PlannerProblem(ego0, np.zeros((n, 2)), _oncoming(n, dt, speed, lateral), lane, dt=dt)


def ego_state_from_track(positions: np.ndarray, mask: np.ndarray, dt: float) -> EgoState:
    """Current pose and speed from the last two valid observed steps."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(idx) < 2:
        raise DegenerateTrajectory("need two valid observed steps")
    p0, p1 = positions[idx[-2]], positions[idx[-1]]
    d = p1 - p0
    step = (idx[-1] - idx[-2]) * dt
    heading = math.atan2(d[1], d[0]) if math.hypot(*d) >= MIN_SEGMENT else 0.0
    return EgoState(p1, heading, math.hypot(*d) / step)


def lane_reference(lanes, ego: EgoState, chain_tol: float = 0.5, back: float = 20.0) -> np.ndarray:
    """Centreline polyline through the ego: the nearest heading-aligned segment chained forward.

    Falls back to a straight line along the ego heading if no lane is aligned.
    """
    direction = np.array([math.cos(ego.heading), math.sin(ego.heading)])
    best, best_d = None, math.inf
    for i, seg in enumerate(lanes):
        ab = seg.end - seg.start
        length = float(np.hypot(*ab))
        if ab @ direction / length < 0.5:
            continue
        s = np.clip((ego.position - seg.start) @ ab / length**2, 0.0, 1.0)
        d = float(np.hypot(*(ego.position - (seg.start + s * ab))))
        if d < best_d:
            best, best_d = i, d
    if best is None:
        return ego.position + np.outer([-back, 200.0], direction)
    pts = [lanes[best].start, lanes[best].end]
    used = {best}
    while True:
        nxt = None
        for i, seg in enumerate(lanes):
            if i in used or np.hypot(*(seg.start - pts[-1])) > chain_tol:
                continue
            prev = pts[-1] - pts[-2]
            # prefer the straightest continuation
            ab = seg.end - seg.start
            cosang = float(ab @ prev / (np.hypot(*ab) * np.hypot(*prev)))
            if nxt is None or cosang > nxt[1]:
                nxt = (i, cosang)
        if nxt is None:
            break
        used.add(nxt[0])
        pts.append(lanes[nxt[0]].end)
    return np.asarray(pts)


def problem_from_prediction(
    scene,
    mu_world: np.ndarray,
    pi: np.ndarray,
    ego_index: int = 0,
    weights: CostWeights = None,
    neighbor_radius: float = 50.0,
) -> PlannerProblem:
    """Ego's most likely mode -> U0; each nearby neighbour's most likely mode -> predicted states."""
    agent = scene.agents[ego_index]
    ego0 = ego_state_from_track(agent.positions, agent.mask, scene.dt)
    u0 = trajectory_to_controls(mu_world[ego_index, int(np.argmax(pi[ego_index]))], ego0, scene.dt)
    nbrs = []
    for j, other in enumerate(scene.agents):
        if j == ego_index or not other.mask[-1]:
            continue
        if np.hypot(*(other.positions[-1] - ego0.position)) > neighbor_radius:
            continue
        nbrs.append(mu_world[j, int(np.argmax(pi[j]))])
    n = len(u0)
    neighbors = np.asarray(nbrs, dtype=np.float64).reshape(-1, n, 2)
    return PlannerProblem(ego0, u0, neighbors, lane_reference(scene.lanes, ego0), weights or CostWeights(), dt=scene.dt)
