"""First stage: per-agent multimodal trajectory proposals.

Each agent is processed in its own frame. A GRU summarises its past
displacements, one attention block reads the surrounding map, another reads
the other agents, and ``M`` per-mode heads turn the fused feature into
proposal features, trajectories (integrated per-step offsets), Laplace
scales and confidence logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import attention_block, init_attention
from .autodiff import Tensor
from .batching import POSITION_SCALE, Batch, make_batch
from .geometry import SEMANTIC_CODES, AgentTrack, Scenario
from .params import ParameterStore

SCALE_FLOOR = 1e-3


@dataclass
class ProposerConfig:
    d: int = 128
    modes: int = 6
    history_depth: int = 1
    scene_radius: float = 50.0
    heads: int = 4
    dropout: float = 0.1
    decoder_hidden: int | None = None
    past_steps: int = 20
    future_steps: int = 30

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.modes < 1 or self.history_depth < 1 or self.scene_radius < 0:
            raise ValueError("modes and history_depth must be >= 1, scene_radius >= 0")


@dataclass
class ProposalSet:
    """Proposals for all ``N`` agents of one scenario.

    ``trajectories`` are in the scenario's frame, ``local_trajectories`` in
    each agent's own frame; ``poses`` holds each own frame's (x, y, heading).
    """
    trajectories: Tensor        # (N, M, F, 2)
    local_trajectories: Tensor  # (N, M, F, 2)
    scales: Tensor              # (N, M, F, 2), own frame axes
    confidences: Tensor         # (N, M)
    features: Tensor            # (N, M, d)
    poses: np.ndarray           # (N, 3)

    @property
    def n_agents(self) -> int:
        return self.confidences.shape[0]

    @property
    def modes(self) -> int:
        return self.confidences.shape[1]


@dataclass
class ProposalOutput:
    """Batched first-stage output over ``R = B * N`` rows."""
    local: Tensor       # (R, M, F, 2)
    common: Tensor      # (R, M, F, 2)
    scales: Tensor      # (R, M, F, 2)
    logits: Tensor      # (R, M)
    features: Tensor    # (R, M, d)

    def confidences(self) -> Tensor:
        return ad.softmax(self.logits, axis=-1)


def init_proposer(store: ParameterStore, cfg: ProposerConfig, prefix: str = "proposer") -> None:
    cfg.validate()
    d, M, F = cfg.d, cfg.modes, cfg.future_steps
    hidden = cfg.decoder_hidden or d
    for layer in range(cfg.history_depth):
        fan_in = 2 + len(SEMANTIC_CODES) if layer == 0 else d
        store.linear(f"{prefix}.gru.{layer}.x", fan_in, 3 * d)
        store.linear(f"{prefix}.gru.{layer}.h", d, 3 * d, bias=False)
    store.linear(f"{prefix}.scene_embed", 5, d)
    init_attention(store, f"{prefix}.scene_attn", d)
    store.linear(f"{prefix}.rel_embed", 4, d)
    init_attention(store, f"{prefix}.agent_attn", d)
    store.linear(f"{prefix}.mode", d, d, stack=M)
    store.linear(f"{prefix}.decoder.0", d, hidden, stack=M)
    store.linear(f"{prefix}.decoder.1", hidden, 4 * F, stack=M)
    store.linear(f"{prefix}.score.0", d, hidden)
    store.linear(f"{prefix}.score.1", hidden, 1)


def _gru_layer(store: ParameterStore, name: str, inputs: list[Tensor], d: int) -> list[Tensor]:
    wx, bx, wh = store[f"{name}.x.weight"], store[f"{name}.x.bias"], store[f"{name}.h.weight"]
    R = inputs[0].shape[0]
    h = Tensor(np.zeros((R, d)))
    outputs = []
    for x in inputs:
        gx = ad.linear(x, wx, bx)
        gh = ad.matmul(h, wh)
        z = ad.sigmoid(gx[:, :d] + gh[:, :d])
        r = ad.sigmoid(gx[:, d:2 * d] + gh[:, d:2 * d])
        n = ad.tanh(gx[:, 2 * d:] + r * gh[:, 2 * d:])
        h = (1.0 - z) * n + z * h
        outputs.append(h)
    return outputs


def history_features(store: ParameterStore, cfg: ProposerConfig, hist: np.ndarray,
                     semantic: np.ndarray, prefix: str = "proposer") -> Tensor:
    """GRU over ``hist`` ``(R, T-1, 2)`` displacements; returns ``(R, d)``."""
    R, steps, _ = hist.shape
    seq = [Tensor(np.concatenate([hist[:, t], semantic], axis=-1)) for t in range(steps)]
    for layer in range(cfg.history_depth):
        seq = _gru_layer(store, f"{prefix}.gru.{layer}", seq, cfg.d)
    return seq[-1]


def encode_history(track: AgentTrack, store: ParameterStore, cfg: ProposerConfig,
                   prefix: str = "proposer") -> Tensor:
    """Feature of one track that is already expressed in its own frame."""
    if track.past.shape[0] < cfg.past_steps:
        raise ValueError(f"history has {track.past.shape[0]} states, need {cfg.past_steps}")
    hist = np.diff(track.past[-cfg.past_steps:], axis=0)[None]
    sem = np.zeros((1, len(SEMANTIC_CODES)))
    sem[0, SEMANTIC_CODES.index(track.semantic)] = 1.0
    return history_features(store, cfg, hist, sem, prefix).reshape(cfg.d)


def scene_within(points: np.ndarray, radius: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.hypot(points[:, 0], points[:, 1]) < radius


def encode_scene_global(scene_xy: np.ndarray, scene_attr: np.ndarray, store: ParameterStore,
                        cfg: ProposerConfig, prefix: str = "proposer") -> Tensor:
    """Embeddings ``(L', d)`` of the scene vectors strictly inside ``scene_radius``."""
    scene_xy = np.asarray(scene_xy, dtype=np.float64).reshape(-1, 2)
    keep = scene_within(scene_xy, cfg.scene_radius)
    feats = np.zeros((int(keep.sum()), 5))
    feats[:, :2] = scene_xy[keep] * POSITION_SCALE
    feats[np.arange(len(feats)), 2 + np.asarray(scene_attr)[keep].astype(int)] = 1.0
    if not len(feats):
        return Tensor(np.zeros((0, cfg.d)))
    return ad.linear(Tensor(feats), store[f"{prefix}.scene_embed.weight"],
                     store[f"{prefix}.scene_embed.bias"])


def propose_batch(store: ParameterStore, cfg: ProposerConfig, batch: Batch,
                  training: bool = False, rng: np.random.Generator | None = None,
                  prefix: str = "proposer") -> ProposalOutput:
    B, N, R = batch.B, batch.N, batch.rows
    d, M, F = cfg.d, cfg.modes, batch.future_steps
    if F != cfg.future_steps:
        raise ValueError(f"batch has {F} future steps, model expects {cfg.future_steps}")
    p = lambda name: store[f"{prefix}.{name}"]

    hist = batch.hist.reshape(R, -1, 2)
    if hist.shape[1] != cfg.past_steps - 1:
        raise ValueError(f"batch has {hist.shape[1] + 1} past steps, model expects {cfg.past_steps}")
    h = history_features(store, cfg, hist, batch.semantic.reshape(R, -1), prefix)

    # map context inside the radius around each agent
    own = batch.own_scene.reshape(R, batch.L, 2)
    near = (np.hypot(own[..., 0], own[..., 1]) < cfg.scene_radius) \
        & np.repeat(batch.scene_valid, N, axis=0) & batch.valid.reshape(R, 1)
    feats, index = batch.row_scene_features(near)
    query = h.reshape(R, 1, d)
    if feats.shape[1]:
        ctx = ad.linear(Tensor(feats), p("scene_embed.weight"), p("scene_embed.bias"))
        query = attention_block(store, f"{prefix}.scene_attn", query, ctx,
                                (index >= 0)[:, None, :], cfg.heads, cfg.dropout, training, rng)

    # other agents: their history feature plus where they are relative to us
    if N > 1:
        keys = h.reshape(B, 1, N, d) + ad.linear(Tensor(batch.rel), p("rel_embed.weight"),
                                                  p("rel_embed.bias"))
        nbr = batch.valid[:, None, :] & batch.valid[:, :, None] & ~np.eye(N, dtype=bool)[None]
        query = attention_block(store, f"{prefix}.agent_attn", query, keys.reshape(R, N, d),
                                nbr.reshape(R, 1, N), cfg.heads, cfg.dropout, training, rng)

    fused = query.reshape(R, 1, 1, d)
    feat = ad.relu(ad.linear(fused, p("mode.weight"), p("mode.bias")))           # (R, M, 1, d)
    hidden = ad.relu(ad.linear(feat, p("decoder.0.weight"), p("decoder.0.bias")))
    out = ad.linear(hidden, p("decoder.1.weight"), p("decoder.1.bias")).reshape(R, M, F, 4)
    local = ad.cumsum(out[..., :2], axis=2)
    scales = ad.softplus(out[..., 2:]) + SCALE_FLOOR
    features = feat.reshape(R, M, d)
    logits = ad.mlp_forward(features, store.layers(f"{prefix}.score", 2)).reshape(R, M)

    rot_t = np.swapaxes(batch.rot, -1, -2).reshape(R, 1, 2, 2)
    common = ad.matmul(local, Tensor(rot_t)) + Tensor(batch.pose[..., :2].reshape(R, 1, 1, 2))
    return ProposalOutput(local, common, scales, logits, features)


def propose(scenario: Scenario, store: ParameterStore, cfg: ProposerConfig,
            training: bool = False, rng: np.random.Generator | None = None,
            prefix: str = "proposer") -> ProposalSet:
    batch = make_batch([scenario], cfg.future_steps)
    out = propose_batch(store, cfg, batch, training, rng, prefix)
    return proposal_set_from_rows(out, batch, 0)


def proposal_set_from_rows(out: ProposalOutput, batch: Batch, b: int) -> ProposalSet:
    N = batch.N
    n = batch.scenarios[b].n_agents
    rows = slice(b * N, b * N + n)
    return ProposalSet(
        trajectories=out.common[rows],
        local_trajectories=out.local[rows],
        scales=out.scales[rows],
        confidences=ad.softmax(out.logits[rows], axis=-1),
        features=out.features[rows],
        poses=batch.pose[b, :n].copy(),
    )
