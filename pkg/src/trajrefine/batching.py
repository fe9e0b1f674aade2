"""Pack a list of scenarios into padded dense arrays.

Agents are padded to the largest agent count ``N`` in the batch and scene
vectors to the largest scene size. Per-agent arrays use a flattened row
axis ``R = B * N`` when they feed the network, so every tensor stays within
rank 4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import SCENE_ATTRIBUTES, SEMANTIC_CODES, Scenario, derive_heading

# Positions enter linear projections in units of 10 m.
POSITION_SCALE = 0.1


@dataclass
class Batch:
    scenarios: list[Scenario]
    valid: np.ndarray          # (B, N) real agent slots
    pose: np.ndarray           # (B, N, 3) x, y, heading in the scenario frame
    rot: np.ndarray            # (B, N, 2, 2) own frame -> scenario frame rotation
    hist: np.ndarray           # (B, N, T-1, 2) past displacements in each agent's own frame
    semantic: np.ndarray       # (B, N, 3) one-hot agent class
    future: np.ndarray         # (B, N, F, 2) ground truth in each agent's own frame (0 if absent)
    has_future: np.ndarray     # (B, N)
    scene_valid: np.ndarray    # (B, L)
    scene_onehot: np.ndarray   # (B, L, 3)
    own_scene: np.ndarray      # (B, N, L, 2) scene points in each agent's own frame
    rel: np.ndarray            # (B, N, N, 4) neighbour j seen from agent i: dx, dy, cos, sin
    future_steps: int

    @property
    def B(self) -> int:
        return self.valid.shape[0]

    @property
    def N(self) -> int:
        return self.valid.shape[1]

    @property
    def L(self) -> int:
        return self.scene_valid.shape[1]

    @property
    def rows(self) -> int:
        return self.B * self.N

    def row_scene_features(self, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scene inputs per row restricted to ``keep`` ``(R, L)``.

        Returns compacted features ``(R, Lk, 5)`` (scaled x, y, one-hot attribute)
        and the index map ``(R, Lk)`` into the scene (``-1`` for padding).
        """
        R, L = keep.shape
        counts = keep.sum(axis=1)
        width = int(counts.max()) if R else 0
        index = np.full((R, width), -1, dtype=np.int64)
        feats = np.zeros((R, width, 5))
        if width == 0:
            return feats, index
        own = self.own_scene.reshape(R, L, 2)
        onehot = np.repeat(self.scene_onehot, self.N, axis=0)
        for r in np.nonzero(counts)[0]:
            idx = np.nonzero(keep[r])[0]
            index[r, :len(idx)] = idx
            feats[r, :len(idx), :2] = own[r, idx] * POSITION_SCALE
            feats[r, :len(idx), 2:] = onehot[r, idx]
        return feats, index


def _onehot(code: int, vocab: Sequence[int]) -> np.ndarray:
    v = np.zeros(len(vocab))
    v[list(vocab).index(code)] = 1.0
    return v


def make_batch(scenarios: Sequence[Scenario], future_steps: int | None = None) -> Batch:
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("cannot batch an empty scenario list")
    B = len(scenarios)
    N = max(s.n_agents for s in scenarios)
    L = max(len(s.scene_xy) for s in scenarios)
    T = scenarios[0].agents[0].past.shape[0]
    if future_steps is None:
        fut = [a.future for s in scenarios for a in s.agents if a.future is not None]
        if not fut:
            raise ValueError("future_steps is required when no agent has a future")
        future_steps = fut[0].shape[0]
    F = future_steps

    valid = np.zeros((B, N), dtype=bool)
    pose = np.zeros((B, N, 3))
    hist = np.zeros((B, N, T - 1, 2))
    semantic = np.zeros((B, N, 3))
    future = np.zeros((B, N, F, 2))
    has_future = np.zeros((B, N), dtype=bool)
    scene_valid = np.zeros((B, L), dtype=bool)
    scene_onehot = np.zeros((B, L, 3))
    scene_xy = np.zeros((B, L, 2))

    for b, s in enumerate(scenarios):
        n_scene = len(s.scene_xy)
        scene_valid[b, :n_scene] = True
        scene_xy[b, :n_scene] = s.scene_xy
        for l, attr in enumerate(s.scene_attr):
            scene_onehot[b, l] = _onehot(int(attr), SCENE_ATTRIBUTES)
        for i, a in enumerate(s.agents):
            if a.past.shape[0] != T:
                raise ValueError(f"scenario {s.scenario_id}: agent {a.agent_id} has "
                                 f"{a.past.shape[0]} past states, expected {T}")
            valid[b, i] = True
            heading, _ = derive_heading(a.past)
            pose[b, i] = (a.past[-1, 0], a.past[-1, 1], heading)
            semantic[b, i] = _onehot(a.semantic, SEMANTIC_CODES)
            if a.future is not None:
                if a.future.shape[0] != F:
                    raise ValueError(f"scenario {s.scenario_id}: agent {a.agent_id} has "
                                     f"{a.future.shape[0]} future states, expected {F}")
                has_future[b, i] = True

    c, s_ = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    rot = np.stack([np.stack([c, -s_], -1), np.stack([s_, c], -1)], -2)  # R(h)

    def to_own(points, b, i):
        # R(h)^T (p - origin) for (..., 2) points
        return (points - pose[b, i, :2]) @ rot[b, i]

    own_scene = np.zeros((B, N, L, 2))
    rel = np.zeros((B, N, N, 4))
    for b, s in enumerate(scenarios):
        n = s.n_agents
        for i, a in enumerate(s.agents):
            hist[b, i] = np.diff(a.past, axis=0) @ rot[b, i]
            if a.future is not None:
                future[b, i] = to_own(a.future, b, i)
            if len(s.scene_xy):
                own_scene[b, i, :len(s.scene_xy)] = to_own(s.scene_xy, b, i)
            rel_pos = to_own(pose[b, :n, :2], b, i) * POSITION_SCALE
            dh = pose[b, :n, 2] - pose[b, i, 2]
            rel[b, i, :n] = np.column_stack([rel_pos, np.cos(dh), np.sin(dh)])

    return Batch(scenarios, valid, pose, rot, hist, semantic, future, has_future,
                 scene_valid, scene_onehot, own_scene, rel, F)
