"""Geometric domain types and rotation/translation-invariant feature construction.

Every learnable block consumes features expressed in the local frame of a
central agent: the frame is anchored at the agent's latest observed position
and rotated so that its latest displacement points along +x.  Features are
built only from differences of positions, so shifting a scene by a vector
that is exactly representable leaves them bitwise unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ShapeMismatch, TrackTooShort, UnknownAgent

MIN_DISPLACEMENT = 1e-6
DEFAULT_DT = 0.1
DEFAULT_T_OBS = 20
DEFAULT_N = 30
DEFAULT_NEIGHBOR_RADIUS = 50.0


@dataclass
class AgentTrack:
    id: str
    positions: np.ndarray  # (T_obs, 2)
    attributes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mask: Optional[np.ndarray] = None  # (T_obs,) bool

    def __post_init__(self) -> None:
        self.id = str(self.id)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.attributes = np.asarray(self.attributes, dtype=np.float64).reshape(-1)
        if self.mask is None:
            self.mask = np.ones(len(self.positions), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if len(self.mask) != len(self.positions):
            raise ShapeMismatch(f"agent {self.id}: mask length {len(self.mask)} != {len(self.positions)}")
        # masked steps are zero-filled so they never leak into features
        self.positions = np.where(self.mask[:, None], self.positions, 0.0)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"agent {self.id}: non-finite positions")

    @property
    def t_obs(self) -> int:
        return len(self.positions)

    def last_valid_index(self) -> int:
        idx = np.flatnonzero(self.mask)
        if len(idx) == 0:
            raise TrackTooShort(f"agent {self.id} has no valid steps")
        return int(idx[-1])

    @property
    def current_position(self) -> np.ndarray:
        return self.positions[self.last_valid_index()]


@dataclass
class LaneSegment:
    start: np.ndarray
    end: np.ndarray
    attributes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.start = np.asarray(self.start, dtype=np.float64).reshape(2)
        self.end = np.asarray(self.end, dtype=np.float64).reshape(2)
        self.attributes = np.asarray(self.attributes, dtype=np.float64).reshape(-1)
        if np.hypot(*(self.end - self.start)) < MIN_DISPLACEMENT:
            raise ValueError("lane segment has zero length")


@dataclass
class Scene:
    """Observed agent tracks plus lane segments in one shared 2D frame.

    By convention the first agent is the central (target) agent used for
    evaluation and planning; all agents with ground truth contribute to training.
    """

    agents: List[AgentTrack]
    lanes: List[LaneSegment] = field(default_factory=list)
    ground_truth: Optional[Dict[str, np.ndarray]] = None
    dt: float = DEFAULT_DT

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.agents:
            raise ValueError("scene needs at least one agent")
        t_obs = {a.t_obs for a in self.agents}
        if len(t_obs) != 1:
            raise ShapeMismatch(f"agents do not share a timebase: {sorted(t_obs)}")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate agent ids")
        if len({a.attributes.shape for a in self.agents}) != 1:
            raise ShapeMismatch("agent attribute vectors differ in length")
        if len({l.attributes.shape for l in self.lanes}) > 1:
            raise ShapeMismatch("lane attribute vectors differ in length")
        if self.ground_truth is not None:
            gt = {str(k): np.asarray(v, dtype=np.float64).reshape(-1, 2) for k, v in self.ground_truth.items()}
            unknown = set(gt) - set(ids)
            if unknown:
                raise UnknownAgent(f"ground truth for unknown agents {sorted(unknown)}")
            lengths = {len(v) for v in gt.values()}
            if len(lengths) > 1 or 0 in lengths:
                raise ShapeMismatch("ground truth horizons must agree and be non-empty")
            self.ground_truth = gt

    @property
    def t_obs(self) -> int:
        return self.agents[0].t_obs

    @property
    def horizon(self) -> Optional[int]:
        if not self.ground_truth:
            return None
        return len(next(iter(self.ground_truth.values())))

    @property
    def agent_ids(self) -> List[str]:
        return [a.id for a in self.agents]

    def index_of(self, agent_id: str) -> int:
        try:
            return self.agent_ids.index(str(agent_id))
        except ValueError:
            raise UnknownAgent(str(agent_id)) from None

    @property
    def agent_attr_dim(self) -> int:
        return len(self.agents[0].attributes)

    @property
    def lane_attr_dim(self) -> int:
        return len(self.lanes[0].attributes) if self.lanes else 0

    def transformed(self, rotation: float = 0.0, offset: Sequence[float] = (0.0, 0.0)) -> "Scene":
        """Copy of the scene under a rigid transform: rotate about the origin, then shift."""
        c, s = math.cos(rotation), math.sin(rotation)
        rot = np.array([[c, -s], [s, c]])
        off = np.asarray(offset, dtype=np.float64)

        def tf(p: np.ndarray) -> np.ndarray:
            p = np.asarray(p, dtype=np.float64)
            if rotation != 0.0:
                p = p @ rot.T
            return p + off

        agents = [
            AgentTrack(a.id, np.where(a.mask[:, None], tf(a.positions), 0.0), a.attributes.copy(), a.mask.copy())
            for a in self.agents
        ]
        lanes = [LaneSegment(tf(l.start), tf(l.end), l.attributes.copy()) for l in self.lanes]
        gt = None if self.ground_truth is None else {k: tf(v) for k, v in self.ground_truth.items()}
        return Scene(agents, lanes, gt, self.dt)


@dataclass(frozen=True)
class ReferenceFrame:
    origin: np.ndarray
    theta: float

    @property
    def R(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def to_local(self, vectors: np.ndarray) -> np.ndarray:
        """Apply R^T to displacement vectors (no translation)."""
        return rotate_inverse(vectors, self.theta)

    def points_to_local(self, points: np.ndarray) -> np.ndarray:
        return rotate_inverse(np.asarray(points) - self.origin, self.theta)

    def points_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.origin


def rotate_inverse(vectors: np.ndarray, theta: float) -> np.ndarray:
    """R(theta)^T v for an array of 2D vectors in the last axis."""
    v = np.asarray(vectors, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)
    x, y = v[..., 0], v[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def displacements(track: AgentTrack) -> np.ndarray:
    """Per-step displacements p^t - p^{t-1}; length T_obs - 1.

    A displacement touching a masked step is zero.
    """
    p = track.positions
    d = p[1:] - p[:-1]
    valid = track.mask[1:] & track.mask[:-1]
    return np.where(valid[:, None], d, 0.0)


def displacement_mask(track: AgentTrack) -> np.ndarray:
    """Validity of the zero-padded length-T_obs displacement sequence."""
    valid = np.zeros(track.t_obs, dtype=bool)
    valid[1:] = track.mask[1:] & track.mask[:-1]
    return valid


def build_reference_frame(track: AgentTrack) -> ReferenceFrame:
    if int(track.mask.sum()) < 2:
        raise TrackTooShort(f"agent {track.id} has fewer than 2 valid steps")
    origin = track.current_position.copy()
    d = displacements(track)
    valid = displacement_mask(track)[1:]
    theta = 0.0
    for k in range(len(d) - 1, -1, -1):
        if valid[k] and math.hypot(d[k, 0], d[k, 1]) >= MIN_DISPLACEMENT:
            theta = math.atan2(d[k, 1], d[k, 0])
            break
    return ReferenceFrame(origin=origin, theta=theta)


@dataclass
class GeomFeatures:
    """Inputs of the local encoder and global interactor for one central agent."""

    central: str
    frame: ReferenceFrame
    center_inputs: np.ndarray  # (T, 2 + A)
    center_mask: np.ndarray  # (T,)
    neighbor_ids: List[str]
    neighbor_inputs: np.ndarray  # (T, Q, 4 + A)
    neighbor_mask: np.ndarray  # (T, Q)
    lane_inputs: np.ndarray  # (L, 4 + A_lane)
    pair_inputs: np.ndarray  # (M, 4): against every agent of the scene, in scene order

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            "center_inputs": self.center_inputs,
            "center_mask": self.center_mask,
            "neighbor_inputs": self.neighbor_inputs,
            "neighbor_mask": self.neighbor_mask,
            "lane_inputs": self.lane_inputs,
            "pair_inputs": self.pair_inputs,
        }


def pair_input(frame_i: ReferenceFrame, frame_j: ReferenceFrame) -> np.ndarray:
    """[R_i^T (p_j - p_i), cos(theta_j - theta_i), sin(theta_j - theta_i)]."""
    rel = rotate_inverse(frame_j.origin - frame_i.origin, frame_i.theta)
    dtheta = frame_j.theta - frame_i.theta
    return np.array([rel[0], rel[1], math.cos(dtheta), math.sin(dtheta)])


def scene_frames(scene: Scene) -> List[ReferenceFrame]:
    return [build_reference_frame(a) for a in scene.agents]


def geom_features(
    scene: Scene,
    central: str,
    neighbor_radius: float = DEFAULT_NEIGHBOR_RADIUS,
    frames: Optional[List[ReferenceFrame]] = None,
) -> GeomFeatures:
    if neighbor_radius <= 0:
        raise ValueError("neighbor_radius must be positive")
    i = scene.index_of(central)
    if frames is None:
        frames = scene_frames(scene)
    agent = scene.agents[i]
    frame = frames[i]
    theta = frame.theta
    t_obs = scene.t_obs

    disp = np.zeros((t_obs, 2))
    disp[1:] = displacements(agent)
    center_mask = displacement_mask(agent)
    attrs = np.broadcast_to(agent.attributes, (t_obs, len(agent.attributes)))
    center_inputs = np.concatenate([rotate_inverse(disp, theta), attrs], axis=1)

    origin = frame.origin
    neighbor_idx = []
    for j, other in enumerate(scene.agents):
        if j == i:
            continue
        off = frames[j].origin - origin
        if math.hypot(off[0], off[1]) <= neighbor_radius:
            neighbor_idx.append(j)

    a_dim = scene.agent_attr_dim
    nbr_inputs = np.zeros((t_obs, len(neighbor_idx), 4 + a_dim))
    nbr_mask = np.zeros((t_obs, len(neighbor_idx)), dtype=bool)
    for q, j in enumerate(neighbor_idx):
        other = scene.agents[j]
        d_j = np.zeros((t_obs, 2))
        d_j[1:] = displacements(other)
        rel = other.positions - agent.positions
        both = other.mask & agent.mask
        rel = np.where(both[:, None], rel, 0.0)
        nbr_inputs[:, q, 0:2] = rotate_inverse(d_j, theta)
        nbr_inputs[:, q, 2:4] = rotate_inverse(rel, theta)
        nbr_inputs[:, q, 4:] = other.attributes
        nbr_mask[:, q] = both
    nbr_inputs[~nbr_mask] = 0.0

    lane_rows = []
    for lane in scene.lanes:
        off = lane.start - origin
        if math.hypot(off[0], off[1]) <= neighbor_radius:
            lane_rows.append(
                np.concatenate([rotate_inverse(lane.end - lane.start, theta), rotate_inverse(off, theta), lane.attributes])
            )
    lane_inputs = np.array(lane_rows).reshape(len(lane_rows), 4 + scene.lane_attr_dim)

    pair_inputs = np.stack([pair_input(frame, frames[j]) for j in range(len(scene.agents))])
    pair_inputs[i] = np.array([0.0, 0.0, 1.0, 0.0])

    return GeomFeatures(
        central=agent.id,
        frame=frame,
        center_inputs=center_inputs,
        center_mask=center_mask,
        neighbor_ids=[scene.agents[j].id for j in neighbor_idx],
        neighbor_inputs=nbr_inputs,
        neighbor_mask=nbr_mask,
        lane_inputs=lane_inputs,
        pair_inputs=pair_inputs,
    )
