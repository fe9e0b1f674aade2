"""Synthetic multi-agent driving scenarios and dataset persistence.

A scenario is built from a road layout (a corridor of parallel lanes that is
either straight or a constant-curvature arc, one lane branching into a turn,
road boundaries and an optional crosswalk). Agents drive lane-consistent
kinematic paths executing one sampled maneuver each. Everything is a pure
function of ``(rng_seed, index)``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import (CROSSWALK, LANE_CENTERLINE, ROAD_BOUNDARY, SEMANTIC_CODES, VEHICLE,
                       AgentTrack, Pose2, Scenario)

SCHEMA_VERSION = 1
MANEUVERS = ("keep-lane", "lane-change", "turn", "slow-down", "accelerate")
LANE_WIDTH = 3.5
MAX_SPEED = 20.0
MAX_TURN_PER_STEP = 0.3
INTERACTION_DISTANCE = 15.0
_DENSE_STEP = 0.25


class DatasetFormatError(ValueError):
    """A dataset file line could not be parsed."""


@dataclass
class GeneratorConfig:
    rng_seed: int = 0
    n_scenarios: int = 100
    lanes_per_scene: tuple[int, int] = (2, 3)
    agents_per_scene: tuple[int, int] = (3, 5)
    lane_length: float = 120.0
    lane_sample_spacing: float = 3.0
    maneuver_mix: dict[str, float] = field(default_factory=lambda: {
        "keep-lane": 0.35, "lane-change": 0.15, "turn": 0.3, "slow-down": 0.1, "accelerate": 0.1})
    noise_sigma: float = 0.05
    past_steps: int = 20
    future_steps: int = 30
    step_dt: float = 0.1

    def validate(self) -> None:
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be ≥ 1")
        unknown = set(self.maneuver_mix) - set(MANEUVERS)
        if unknown:
            raise ValueError(f"unknown maneuvers: {sorted(unknown)}")
        if any(p < 0 for p in self.maneuver_mix.values()):
            raise ValueError("maneuver probabilities must be non-negative")
        if abs(sum(self.maneuver_mix.values()) - 1.0) > 1e-9:
            raise ValueError("maneuver probabilities must sum to 1")
        lo, hi = self.lanes_per_scene
        if lo < 1 or hi < lo:
            raise ValueError("lanes_per_scene must be a range with minimum ≥ 1")
        lo, hi = self.agents_per_scene
        if lo < 2 or hi < lo:
            raise ValueError("agents_per_scene must be a range with minimum ≥ 2")
        if self.past_steps < 2 or self.future_steps < 1:
            raise ValueError("need past_steps ≥ 2 and future_steps ≥ 1")
        if self.lane_sample_spacing <= 0 or self.step_dt <= 0 or self.noise_sigma < 0:
            raise ValueError("spacing and step_dt must be positive, noise_sigma non-negative")
        if self.lane_length < 40.0:
            raise ValueError("lane_length must be at least 40 m")


@dataclass
class DatasetSplit:
    train: list[Scenario] = field(default_factory=list)
    val: list[Scenario] = field(default_factory=list)
    test: list[Scenario] = field(default_factory=list)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "val", "test"):
            for s in getattr(self, name):
                if s.scenario_id in seen and seen[s.scenario_id] != name:
                    raise ValueError(f"scenario {s.scenario_id} appears in both "
                                     f"{seen[s.scenario_id]} and {name}")
                seen[s.scenario_id] = name


# ---------------------------------------------------------------- road layout


class Polyline:
    """Densely sampled polyline with arc-length interpolation."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def at(self, s: np.ndarray) -> np.ndarray:
        s = np.clip(s, 0.0, self.length)
        return np.stack([np.interp(s, self.s, self.points[:, 0]),
                         np.interp(s, self.s, self.points[:, 1])], axis=-1)

    def normal(self, s: np.ndarray) -> np.ndarray:
        """Left-pointing unit normal at arc length ``s``."""
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        d = self.points[idx + 1] - self.points[idx]
        d /= np.hypot(d[..., 0], d[..., 1])[..., None]
        return np.stack([-d[..., 1], d[..., 0]], axis=-1)

    def sample(self, spacing: float, start: float = 0.0) -> np.ndarray:
        return self.at(np.arange(start, self.length + 1e-9, spacing))

    def distance_to(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance from each point to the nearest polyline segment."""
        pts = np.atleast_2d(pts)
        a, b = self.points[:-1], self.points[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(-1), 1e-18)
        t = np.clip(((pts[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        return np.hypot(*(pts[:, None, :] - proj).transpose(2, 0, 1)).min(axis=1)


def _arc(start: np.ndarray, heading: float, curvature: float, length: float) -> np.ndarray:
    n = max(2, int(math.ceil(length / _DENSE_STEP)) + 1)
    s = np.linspace(0.0, length, n)
    theta = heading + curvature * s
    if abs(curvature) < 1e-12:
        x = start[0] + s * math.cos(heading)
        y = start[1] + s * math.sin(heading)
    else:
        x = start[0] + (np.sin(theta) - math.sin(heading)) / curvature
        y = start[1] - (np.cos(theta) - math.cos(heading)) / curvature
    return np.stack([x, y], axis=-1)


@dataclass
class RoadLayout:
    lanes: list[Polyline]
    branch_lane: int
    branch_s: float
    branch_route: Polyline
    boundaries: list[Polyline]
    crosswalk: np.ndarray  # (k, 2), may be empty
    world: Pose2

    def scene(self, spacing: float) -> tuple[np.ndarray, np.ndarray]:
        pts, attrs = [], []
        for lane in self.lanes:
            p = lane.sample(spacing)
            pts.append(p)
            attrs.append(np.full(len(p), LANE_CENTERLINE))
        tail = self.branch_route.sample(spacing, start=self.branch_s + spacing)
        pts.append(tail)
        attrs.append(np.full(len(tail), LANE_CENTERLINE))
        for b in self.boundaries:
            p = b.sample(spacing)
            pts.append(p)
            attrs.append(np.full(len(p), ROAD_BOUNDARY))
        pts.append(self.crosswalk)
        attrs.append(np.full(len(self.crosswalk), CROSSWALK))
        xy = np.concatenate(pts, axis=0)
        return self.world.to_parent(xy), np.concatenate(attrs).astype(np.int64)


def _build_layout(config: GeneratorConfig, rng: np.random.Generator) -> RoadLayout:
    n_lanes = int(rng.integers(config.lanes_per_scene[0], config.lanes_per_scene[1] + 1))
    length = config.lane_length
    curvature = 0.0 if rng.random() < 0.5 else float(rng.uniform(-1 / 150, 1 / 150))
    reference = Polyline(_arc(np.zeros(2), 0.0, curvature, length))
    s_dense = reference.s

    def offset(lat: float) -> Polyline:
        return Polyline(reference.at(s_dense) + lat * reference.normal(s_dense))

    lats = [(k - (n_lanes - 1) / 2.0) * LANE_WIDTH for k in range(n_lanes)]
    lanes = [offset(lat) for lat in lats]
    edge = (n_lanes / 2.0) * LANE_WIDTH
    boundaries = [offset(-edge), offset(edge)]

    # the outermost lane on the turning side branches off into the turn
    direction = 1.0 if rng.random() < 0.5 else -1.0
    branch_lane = n_lanes - 1 if direction > 0 else 0
    lane = lanes[branch_lane]
    branch_s = float(rng.uniform(0.35, 0.55) * lane.length)
    radius = float(rng.uniform(12.0, 25.0))
    idx = int(np.searchsorted(lane.s, branch_s))
    prefix = lane.points[:idx]
    start = lane.at(np.array(branch_s))
    tangent = lane.points[min(idx, len(lane.points) - 1)] - lane.points[max(idx - 1, 0)]
    heading = math.atan2(tangent[1], tangent[0])
    turn = _arc(start, heading, direction / radius, radius * math.pi / 2)
    straight = _arc(turn[-1], heading + direction * math.pi / 2, 0.0, 40.0)
    branch_route = Polyline(np.concatenate([prefix, turn, straight[1:]], axis=0))

    crosswalk = np.zeros((0, 2))
    if rng.random() < 0.5:
        s_c = float(rng.uniform(0.65, 0.9) * length)
        centre = reference.at(np.array(s_c))
        nrm = reference.normal(np.array(s_c))
        lat = np.arange(-edge, edge + 1e-9, config.lane_sample_spacing)
        crosswalk = centre[None] + lat[:, None] * nrm[None]

    world = Pose2(float(rng.uniform(-200, 200)), float(rng.uniform(-200, 200)),
                  float(rng.uniform(-math.pi, math.pi)))
    return RoadLayout(lanes, branch_lane, branch_s, branch_route, boundaries, crosswalk, world)


# ---------------------------------------------------------------- agents


@dataclass
class _AgentPlan:
    maneuver: str
    route: Polyline
    lateral_target: float
    speeds: np.ndarray      # per-step speed, length T+F-1
    lateral: np.ndarray     # per-state lateral offset, length T+F
    s_now: float


def _speed_profile(maneuver: str, total: int, now: int, dt: float, rng) -> np.ndarray:
    v0 = float(rng.uniform(4.0, 10.0 if maneuver == "turn" else 14.0))
    v = np.full(total - 1, v0)
    onset = now + int(rng.integers(-5, 11))
    k = np.arange(total - 1)
    if maneuver == "slow-down":
        a = float(rng.uniform(1.0, 3.0))
        v = np.maximum(v0 - a * dt * np.maximum(k - onset, 0), 1.0)
    elif maneuver == "accelerate":
        a = float(rng.uniform(0.5, 2.0))
        v = np.minimum(v0 + a * dt * np.maximum(k - onset, 0), MAX_SPEED)
    return v


def _arc_positions(speeds: np.ndarray, s_now: float, now: int, dt: float) -> np.ndarray:
    s = np.concatenate([[0.0], np.cumsum(speeds * dt)])
    return s - s[now] + s_now


def _plan_agent(layout: RoadLayout, config: GeneratorConfig, rng, maneuver: str,
                lane_idx: int | None = None, s_hint: float | None = None) -> _AgentPlan:
    T, F, dt = config.past_steps, config.future_steps, config.step_dt
    total, now = T + F, T - 1
    n_lanes = len(layout.lanes)
    if maneuver == "lane-change" and n_lanes < 2:
        maneuver = "keep-lane"
    if maneuver == "turn":
        lane_idx = layout.branch_lane
    elif lane_idx is None:
        lane_idx = int(rng.integers(n_lanes))
    route = layout.branch_route if maneuver == "turn" else layout.lanes[lane_idx]

    speeds = _speed_profile(maneuver, total, now, dt, rng)
    lateral = np.zeros(total)
    lateral_target = 0.0
    if maneuver == "lane-change":
        options = [d for d in (-1, 1) if 0 <= lane_idx + d < n_lanes]
        step = options[int(rng.integers(len(options)))]
        lateral_target = step * LANE_WIDTH
        start = now + int(rng.integers(-10, 6))
        u = np.clip((np.arange(total) - start) / 30.0, 0.0, 1.0)
        lateral = lateral_target * u * u * (3.0 - 2.0 * u)

    rel = _arc_positions(speeds, 0.0, now, dt)
    back, fwd = -rel[0], rel[-1]
    if maneuver == "turn":
        # the branch point must be ahead of the agent and reached within the horizon
        lo = max(back + 1.0, layout.branch_s - 0.8 * fwd)
        hi = layout.branch_s - 2.0
    else:
        lo, hi = back + 1.0, route.length - fwd - 1.0
    if hi <= lo:
        scale = max(0.2, 0.9 * (route.length - 2.0) / (back + fwd + 1e-9))
        speeds = speeds * min(scale, 1.0)
        rel = _arc_positions(speeds, 0.0, now, dt)
        back, fwd = -rel[0], rel[-1]
        lo, hi = back + 1.0, max(back + 1.0, route.length - fwd - 1.0)
    if s_hint is not None and lo <= s_hint <= hi:
        s_now = s_hint
    else:
        s_now = float(rng.uniform(lo, hi)) if hi > lo else lo
    return _AgentPlan(maneuver, route, lateral_target, speeds, lateral, s_now)


def _clean_path(plan: _AgentPlan, config: GeneratorConfig) -> np.ndarray:
    now = config.past_steps - 1
    s = _arc_positions(plan.speeds, plan.s_now, now, config.step_dt)
    return plan.route.at(s) + plan.lateral[:, None] * plan.route.normal(s)


def _plausible(path: np.ndarray, dt: float) -> bool:
    step = np.diff(path, axis=0)
    dist = np.hypot(step[:, 0], step[:, 1])
    if (dist / dt > MAX_SPEED + 1e-9).any():
        return False
    heading = np.arctan2(step[:, 1], step[:, 0])
    moving = dist > 1e-3
    dh = np.diff(heading)
    dh = np.abs((dh + np.pi) % (2 * np.pi) - np.pi)
    return bool((dh[moving[1:] & moving[:-1]] <= MAX_TURN_PER_STEP).all())


def _min_future_gap(paths: Sequence[np.ndarray], now: int) -> float:
    best = math.inf
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            d = np.hypot(*(paths[i][now + 1:] - paths[j][now + 1:]).T)
            best = min(best, float(d.min()))
    return best


def _sample_maneuver(config: GeneratorConfig, rng) -> str:
    names = [m for m in MANEUVERS if config.maneuver_mix.get(m, 0.0) > 0]
    probs = np.array([config.maneuver_mix[m] for m in names])
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def generate_layout(config: GeneratorConfig, index: int) -> RoadLayout:
    """The road layout used by ``generate_scenario(config, index)``."""
    return _build_layout(config, np.random.default_rng([config.rng_seed, index]))


def _simulate(config: GeneratorConfig, index: int):
    config.validate()
    rng = np.random.default_rng([config.rng_seed, index])
    layout = _build_layout(config, rng)
    now = config.past_steps - 1
    n_agents = int(rng.integers(config.agents_per_scene[0], config.agents_per_scene[1] + 1))
    for _ in range(100):
        target = _plan_agent(layout, config, rng, _sample_maneuver(config, rng))
        lane0 = layout.branch_lane if target.maneuver == "turn" else \
            layout.lanes.index(target.route)
        # the first neighbour shares the target's lane or an adjacent one, close by
        lane1 = int(np.clip(lane0 + rng.integers(-1, 2), 0, len(layout.lanes) - 1))
        man1 = _sample_maneuver(config, rng)
        if man1 == "turn" and lane1 != layout.branch_lane:
            man1 = "keep-lane"
        gap = float(rng.uniform(7.0, 11.0)) * (1 if rng.random() < 0.5 else -1)
        if lane1 != lane0:
            gap = float(rng.uniform(-9.0, 9.0))
        plans = [target, _plan_agent(layout, config, rng, man1, lane1, target.s_now + gap)]
        for _ in range(n_agents - 2):
            plans.append(_plan_agent(layout, config, rng, _sample_maneuver(config, rng)))
        paths = [_clean_path(p, config) for p in plans]
        if all(_plausible(p, config.step_dt) for p in paths) and \
                _min_future_gap(paths, now) < INTERACTION_DISTANCE:
            return rng, layout, plans, paths
    raise ValueError("could not generate a feasible scenario for this config")


def generate_scenario(config: GeneratorConfig, index: int) -> Scenario:
    rng, layout, _, paths = _simulate(config, index)
    T = config.past_steps
    agents = []
    for k, path in enumerate(paths):
        world_path = layout.world.to_parent(path)
        past = world_path[:T]
        if config.noise_sigma > 0:
            past = past + rng.normal(0.0, config.noise_sigma, size=(T, 2))
        agents.append(AgentTrack(f"a{k}", past, world_path[T:], VEHICLE))
    scene_xy, scene_attr = layout.scene(config.lane_sample_spacing)
    return Scenario(f"{config.rng_seed}-{index}", tuple(agents), scene_xy, scene_attr)


def agent_routes(config: GeneratorConfig, index: int) -> list[tuple[str, Polyline, Pose2]]:
    """Per agent: maneuver, the route polyline it follows, and the layout's world pose."""
    _, layout, plans, _ = _simulate(config, index)
    return [(p.maneuver, p.route, layout.world) for p in plans]


def generate_dataset(config: GeneratorConfig, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Generate ``n_scenarios`` scenarios and split them by index."""
    config.validate()
    scenarios = [generate_scenario(config, i) for i in range(config.n_scenarios)]
    n = len(scenarios)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return DatasetSplit(scenarios[:n_train], scenarios[n_train:n_train + n_val],
                        scenarios[n_train + n_val:])


# ---------------------------------------------------------------- JSONL persistence


def scenario_to_dict(s: Scenario) -> dict:
    def states(arr, sem):
        return [[float(x), float(y), sem] for x, y in arr]

    return {
        "v": SCHEMA_VERSION,
        "id": s.scenario_id,
        "frame": [s.frame.x, s.frame.y, s.frame.heading],
        "scene": [[float(x), float(y), int(a)] for (x, y), a in zip(s.scene_xy, s.scene_attr)],
        "agents": [{"id": a.agent_id, "past": states(a.past, a.semantic),
                    "future": None if a.future is None else states(a.future, a.semantic)}
                   for a in s.agents],
    }


def _field(obj, key, lineno, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetFormatError(f"line {lineno}: missing field '{key}'")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise DatasetFormatError(f"line {lineno}: field '{key}' has wrong type")
    return value


def _triples(rows, lineno, name):
    try:
        arr = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"line {lineno}: field '{name}' is not a list of [x, y, code]")
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DatasetFormatError(f"line {lineno}: field '{name}' is not a list of [x, y, code]")
    return arr


def scenario_from_dict(obj: Mapping, lineno: int = 1) -> Scenario:
    version = _field(obj, "v", lineno)
    if version != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"line {lineno}: schema version {version} is not supported (expected {SCHEMA_VERSION})")
    sid = _field(obj, "id", lineno, str)
    frame = _field(obj, "frame", lineno, list)
    if len(frame) != 3:
        raise DatasetFormatError(f"line {lineno}: field 'frame' must be [x, y, heading]")
    scene = _triples(_field(obj, "scene", lineno, list), lineno, "scene")
    agents = []
    for k, a in enumerate(_field(obj, "agents", lineno, list)):
        aid = _field(a, "id", lineno, str)
        past = _triples(_field(a, "past", lineno, list), lineno, f"agents[{k}].past")
        fut_raw = _field(a, "future", lineno)
        fut = None if fut_raw is None else _triples(fut_raw, lineno, f"agents[{k}].future")
        codes = past[:, 2] if fut is None else np.concatenate([past[:, 2], fut[:, 2]])
        if codes.size and (codes != codes[0]).any():
            raise DatasetFormatError(f"line {lineno}: agent '{aid}' changes semantic code")
        sem = int(codes[0]) if codes.size else VEHICLE
        try:
            agents.append(AgentTrack(aid, past[:, :2], None if fut is None else fut[:, :2], sem))
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
    try:
        return Scenario(sid, tuple(agents), scene[:, :2], scene[:, 2].astype(np.int64),
                        Pose2(*map(float, frame)))
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from None


def write_scenarios(scenarios: Iterable[Scenario], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_dict(s), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_scenarios(path) -> list[Scenario]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(scenario_from_dict(obj, lineno))
    return out


SPLITS = ("train", "val", "test")


def write_dataset(split: DatasetSplit, path, manifest: Mapping | None = None) -> dict:
    """Write ``train/val/test.jsonl`` plus ``manifest.json`` into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    counts = {name: write_scenarios(getattr(split, name), root / f"{name}.jsonl")
              for name in SPLITS}
    info = {"schema": SCHEMA_VERSION, "counts": counts, **(manifest or {})}
    (root / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def read_dataset(path) -> DatasetSplit:
    root = Path(path)
    parts = {}
    for name in SPLITS:
        f = root / f"{name}.jsonl"
        parts[name] = read_scenarios(f) if f.exists() else []
    return DatasetSplit(**parts)


# ---------------------------------------------------------------- CSV ingestion

TRACK_COLUMNS = ("scenario_id", "agent_id", "timestep", "x", "y", "semantic")
SCENE_COLUMNS = ("scenario_id", "x", "y", "attribute")


@dataclass
class IngestReport:
    scenarios: list[Scenario]
    dropped_agents: dict[str, int]  # scenario id -> number of agents dropped

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped_agents.values())


def parse_column_map(text: str | None) -> dict[str, str]:
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise ValueError(f"column map entry '{item}' is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_csv(path, required: Sequence[str], column_map: Mapping[str, str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        cols = {k: column_map.get(k, k) for k in required}
        missing = [f"{k} (column '{c}')" for k, c in cols.items() if c not in header]
        if missing:
            raise ValueError(f"{path}: missing required column(s): {', '.join(missing)}")
        return [{k: row[c] for k, c in cols.items()} for row in reader]


def ingest_csv(tracks_path, scene_path=None, column_map: Mapping[str, str] | None = None,
               past_steps: int = 20, future_steps: int = 30) -> IngestReport:
    """Group track rows into scenarios.

    Agents are ordered by id within a scenario (index 0 is the target) and
    scenarios by id. Agents with fewer than ``past_steps`` rows are dropped;
    agents with at least ``past_steps + future_steps`` rows get a future.
    """
    column_map = dict(column_map or {})
    rows = _read_csv(tracks_path, TRACK_COLUMNS, column_map)
    scene_rows = _read_csv(scene_path, SCENE_COLUMNS, column_map) if scene_path else []

    tracks: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        tracks[r["scenario_id"]][r["agent_id"]].append(
            (float(r["timestep"]), float(r["x"]), float(r["y"]), int(float(r["semantic"]))))
    scene: dict[str, list] = defaultdict(list)
    for r in scene_rows:
        scene[r["scenario_id"]].append((float(r["x"]), float(r["y"]), int(float(r["attribute"]))))

    scenarios, dropped = [], {}
    for sid in sorted(tracks):
        agents, n_drop = [], 0
        for aid in sorted(tracks[sid]):
            pts = sorted(tracks[sid][aid])
            times = [p[0] for p in pts]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"scenario {sid}, agent {aid}: timesteps are not strictly increasing")
            if len(pts) < past_steps:
                n_drop += 1
                continue
            sems = {p[3] for p in pts}
            if len(sems) != 1 or next(iter(sems)) not in SEMANTIC_CODES:
                raise ValueError(f"scenario {sid}, agent {aid}: invalid semantic codes {sorted(sems)}")
            xy = np.array([[p[1], p[2]] for p in pts])
            fut = xy[past_steps:past_steps + future_steps] \
                if len(pts) >= past_steps + future_steps else None
            agents.append(AgentTrack(aid, xy[:past_steps], fut, sems.pop()))
        dropped[sid] = n_drop
        if not agents:
            continue
        sc = sorted(scene.get(sid, []))
        scene_xy = np.array([[x, y] for x, y, _ in sc]).reshape(-1, 2)
        scene_attr = np.array([a for *_, a in sc], dtype=np.int64)
        scenarios.append(Scenario(sid, tuple(agents), scene_xy, scene_attr))
    return IngestReport(scenarios, dropped)
