"""Scenario types and rigid 2D frame transforms.

Coordinates are stored as numpy arrays rather than one object per state:
``AgentTrack.past`` is ``(T, 2)``, ``Scenario.scene_xy`` is ``(L, 2)``.
Every agent carries a single semantic code; the dataset format repeats it
per state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

VEHICLE, PEDESTRIAN, CYCLIST = 0, 1, 2
SEMANTIC_CODES = (VEHICLE, PEDESTRIAN, CYCLIST)

LANE_CENTERLINE, ROAD_BOUNDARY, CROSSWALK = 0, 1, 2
SCENE_ATTRIBUTES = (LANE_CENTERLINE, ROAD_BOUNDARY, CROSSWALK)

MIN_DISPLACEMENT = 1e-6


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if wrapped == -math.pi else wrapped


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading)):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, local: "Pose2") -> "Pose2":
        """Express ``local`` (given in this frame) in this frame's parent frame."""
        px, py = rotation(self.heading) @ local.position + self.position
        return Pose2(float(px), float(py), self.heading + local.heading)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Parent-frame points into this frame. Accepts ``(..., 2)`` arrays."""
        pts = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def to_parent(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([c * x - s * y + self.x, s * x + c * y + self.y], axis=-1)


@dataclass(frozen=True)
class TrajState:
    x: float
    y: float
    semantic: int = VEHICLE


@dataclass(frozen=True)
class SceneVector:
    x: float
    y: float
    attribute: int = LANE_CENTERLINE


def derive_heading(past: np.ndarray) -> tuple[float, bool]:
    """Heading of the most recent non-trivial displacement.

    Returns ``(heading, degenerate)``; a track that never moves more than
    1e-6 m between consecutive states gets heading 0 and ``degenerate=True``.
    """
    steps = np.diff(past, axis=0)
    norms = np.hypot(steps[:, 0], steps[:, 1])
    moving = np.nonzero(norms > MIN_DISPLACEMENT)[0]
    if moving.size == 0:
        return 0.0, True
    dx, dy = steps[moving[-1]]
    return wrap_angle(math.atan2(dy, dx)), False


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: str
    past: np.ndarray
    future: np.ndarray | None = None
    semantic: int = VEHICLE

    def __post_init__(self):
        past = np.array(self.past, dtype=np.float64)
        if past.ndim != 2 or past.shape[1] != 2 or past.shape[0] < 2:
            raise ValueError(f"agent {self.agent_id}: past must be (T>=2, 2), got {past.shape}")
        past.setflags(write=False)
        object.__setattr__(self, "past", past)
        if self.future is not None:
            fut = np.array(self.future, dtype=np.float64)
            if fut.ndim != 2 or fut.shape[1] != 2 or fut.shape[0] < 1:
                raise ValueError(f"agent {self.agent_id}: future must be (F>=1, 2), got {fut.shape}")
            fut.setflags(write=False)
            object.__setattr__(self, "future", fut)
        if self.semantic not in SEMANTIC_CODES:
            raise ValueError(f"agent {self.agent_id}: unknown semantic code {self.semantic}")
        object.__setattr__(self, "semantic", int(self.semantic))

    @property
    def current_pose(self) -> Pose2:
        heading, _ = derive_heading(self.past)
        x, y = self.past[-1]
        return Pose2(float(x), float(y), heading)

    @property
    def degenerate_heading(self) -> bool:
        return derive_heading(self.past)[1]

    def states(self) -> list[TrajState]:
        return [TrajState(float(x), float(y), self.semantic) for x, y in self.past]

    def transformed(self, frame: Pose2) -> "AgentTrack":
        fut = None if self.future is None else frame.to_local(self.future)
        return replace(self, past=frame.to_local(self.past), future=fut)

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        same_future = (self.future is None and other.future is None) or (
            self.future is not None and other.future is not None
            and np.array_equal(self.future, other.future))
        return (self.agent_id == other.agent_id and self.semantic == other.semantic
                and np.array_equal(self.past, other.past) and same_future)


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    agents: tuple[AgentTrack, ...]
    scene_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    scene_attr: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frame: Pose2 = Pose2()
    degenerate_heading: bool = False

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise ValueError("a scenario needs at least one agent")
        xy = np.array(self.scene_xy, dtype=np.float64).reshape(-1, 2)
        attr = np.array(self.scene_attr, dtype=np.int64).reshape(-1)
        if xy.shape[0] != attr.shape[0]:
            raise ValueError("scene_xy and scene_attr lengths differ")
        if not np.isfinite(xy).all():
            raise ValueError("scene coordinates must be finite")
        if attr.size and not np.isin(attr, SCENE_ATTRIBUTES).all():
            raise ValueError("unknown scene attribute code")
        for a in agents:
            if not np.isfinite(a.past).all() or (a.future is not None and not np.isfinite(a.future).all()):
                raise ValueError(f"agent {a.agent_id}: coordinates must be finite")
        xy.setflags(write=False)
        attr.setflags(write=False)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "scene_xy", xy)
        object.__setattr__(self, "scene_attr", attr)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def scene(self) -> list[SceneVector]:
        return [SceneVector(float(x), float(y), int(a))
                for (x, y), a in zip(self.scene_xy, self.scene_attr)]

    @property
    def target(self) -> AgentTrack:
        return self.agents[0]

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.scenario_id == other.scenario_id and self.frame == other.frame
                and len(self.agents) == len(other.agents)
                and all(a == b for a, b in zip(self.agents, other.agents))
                and np.array_equal(self.scene_xy, other.scene_xy)
                and np.array_equal(self.scene_attr, other.scene_attr))


def retarget(scenario: Scenario, target_index: int) -> Scenario:
    """Move agent ``target_index`` to position 0, keeping the others in order."""
    n = scenario.n_agents
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} agents")
    if target_index == 0:
        return scenario
    order = [target_index] + [i for i in range(n) if i != target_index]
    return replace(scenario, agents=tuple(scenario.agents[i] for i in order))


def to_agent_frame(scenario: Scenario, target_index: int = 0) -> Scenario:
    """Re-express a scenario so the chosen agent sits at the origin facing +x.

    Agent order is left untouched; combine with :func:`retarget` to make the
    chosen agent index 0.
    """
    if not 0 <= target_index < scenario.n_agents:
        raise IndexError(f"target index {target_index} out of range for {scenario.n_agents} agents")
    target = scenario.agents[target_index]
    heading, degenerate = derive_heading(target.past)
    x, y = target.past[-1]
    local = Pose2(float(x), float(y), heading)
    return Scenario(
        scenario_id=scenario.scenario_id,
        agents=tuple(a.transformed(local) for a in scenario.agents),
        scene_xy=local.to_local(scenario.scene_xy),
        scene_attr=scenario.scene_attr,
        frame=scenario.frame.compose(local),
        degenerate_heading=degenerate,
    )


def from_agent_frame(points: Sequence, frame: Pose2) -> np.ndarray:
    """Inverse of :func:`to_agent_frame` for raw ``(..., 2)`` point arrays."""
    pts = np.asarray(points, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    return frame.to_parent(pts)


def to_world(scenario: Scenario) -> Scenario:
    """Undo every frame change recorded in ``scenario.frame``."""
    f = scenario.frame
    agents = tuple(replace(a, past=f.to_parent(a.past),
                           future=None if a.future is None else f.to_parent(a.future))
                   for a in scenario.agents)
    return replace(scenario, agents=agents, scene_xy=f.to_parent(scenario.scene_xy),
                   frame=Pose2(), degenerate_heading=False)
