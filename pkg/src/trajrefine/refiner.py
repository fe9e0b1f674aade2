"""Second stage: refine each proposal with context gathered around it.

Per proposal ``m`` of a target agent:

* scene context: embeddings of the scene vectors lying within ``tau`` of any
  proposal waypoint (the union of disks along the proposal, a "tube");
* interaction context: features of other agents' proposals that are
  confident enough (``> min_confidence``) and come within ``group_distance``
  of the target proposal at some common time step.

Both feed gated cross-attention blocks queried by the proposal feature; the
concatenated results drive a regression head (offsets added to the proposal
plus Laplace scales) and a classification head over all modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import attention_block, gated_cross_attention, init_attention
from .autodiff import Tensor
from .batching import POSITION_SCALE, Batch, make_batch
from .geometry import Scenario
from .params import ParameterStore
from .proposer import SCALE_FLOOR, ProposalSet

__all__ = [
    "RefinerConfig", "SceneEmbeddings", "TubePool", "ProposalGroup", "RefinedPrediction",
    "embed_scene", "tubular_region_pooling", "gated_cross_attention", "trajectory_min_distance",
    "distance_proposal_grouping", "refine", "refine_batch", "init_refiner",
]


@dataclass
class RefinerConfig:
    tau: float = 20.0
    group_distance: float = 10.0
    min_confidence: float = 0.1
    d: int = 128
    heads: int = 4
    dropout: float = 0.1
    head_hidden: int | None = None
    modes: int = 6
    future_steps: int = 30
    use_scene: bool = True
    use_interaction: bool = True

    def validate(self) -> None:
        if self.tau <= 0 or self.group_distance <= 0:
            raise ValueError("tau and group_distance must be positive")
        if not 0.0 <= self.min_confidence < 1.0:
            raise ValueError("min_confidence must lie in [0, 1)")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")


@dataclass
class SceneEmbeddings:
    psi: Tensor               # (L, d)
    xy: np.ndarray            # (L, 2)
    attr: np.ndarray          # (L,)

    def __len__(self) -> int:
        return self.xy.shape[0]


@dataclass
class TubePool:
    member_indices: np.ndarray
    proposal_mode: int = 0


@dataclass
class ProposalGroup:
    member_features: Tensor
    member_refs: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class RefinedPrediction:
    means: Tensor            # (M, F, 2) target frame
    scales: Tensor           # (M, F, 2)
    confidences: Tensor      # (M,)
    tube_pools: list[np.ndarray] = field(default_factory=list)
    groups: list[list[tuple[int, int]]] = field(default_factory=list)


@dataclass
class RefinerOutput:
    means: Tensor            # (R, M, F, 2) each row in its own frame
    scales: Tensor
    logits: Tensor           # (R, M)
    pool: np.ndarray         # (R, M, L) tube membership
    group: np.ndarray        # (B, N*M, N*M) proposal grouping

    def confidences(self) -> Tensor:
        return ad.softmax(self.logits, axis=-1)


def init_refiner(store: ParameterStore, cfg: RefinerConfig, prefix: str = "refiner") -> None:
    cfg.validate()
    d, M, F = cfg.d, cfg.modes, cfg.future_steps
    hidden = cfg.head_hidden or 2 * d
    store.linear(f"{prefix}.scene_embed", 5, d)
    init_attention(store, f"{prefix}.tube_attn", d)
    init_attention(store, f"{prefix}.interaction_attn", d)
    store.linear(f"{prefix}.reg.0", 2 * d, hidden)
    store.linear(f"{prefix}.reg.1", hidden, 4 * F)
    store.linear(f"{prefix}.cls.0", 2 * d * M, hidden)
    store.linear(f"{prefix}.cls.1", hidden, M)


def output_parameter_names(prefix: str = "refiner") -> list[str]:
    """Final regression-layer parameters; zeroing them turns the stage into identity."""
    return [f"{prefix}.reg.1.weight", f"{prefix}.reg.1.bias"]


# ---------------------------------------------------------------- geometry helpers


def pool_mask(trajectories: np.ndarray, scene_xy: np.ndarray, tau: float,
              scene_valid: np.ndarray | None = None) -> np.ndarray:
    """Tube membership for ``trajectories`` ``(..., M, F, 2)`` against ``scene_xy`` ``(..., L, 2)``.

    Returns ``(..., M, L)``: scene vector ``l`` is in the tube of proposal ``m``
    iff some waypoint lies strictly closer than ``tau``.
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    scene = np.asarray(scene_xy, dtype=np.float64)
    F = traj.shape[-2]
    sx = scene[..., None, :, 0]
    sy = scene[..., None, :, 1]
    best = None
    for f in range(F):
        dx = traj[..., :, f, None, 0] - sx
        dy = traj[..., :, f, None, 1] - sy
        d2 = dx * dx + dy * dy
        best = d2 if best is None else np.minimum(best, d2)
    tau2 = tau * tau
    out = best < tau2 * (1.0 - 1e-9)
    # squared distances can disagree with hypot by an ulp right at the boundary
    band = np.nonzero(~out & (best < tau2 * (1.0 + 1e-9)))
    if band[0].size:
        lead = band[:-1]
        pts = traj[lead]                                   # (k, F, 2)
        sp = scene[(*band[:-2], band[-1])] if scene.ndim > 2 else scene[band[-1]]
        exact = np.hypot(pts[..., 0] - sp[:, None, 0], pts[..., 1] - sp[:, None, 1])
        out[band] = (exact < tau).any(axis=-1)
    if scene_valid is not None:
        out &= np.asarray(scene_valid, dtype=bool)[..., None, :]
    return out


def trajectory_min_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"trajectory lengths differ: {a.shape} vs {b.shape}")
    return float(np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]).min())


def group_mask(common: np.ndarray, confidences: np.ndarray, valid: np.ndarray,
               max_distance: float, min_confidence: float) -> np.ndarray:
    """Proposal grouping for every (agent, mode) query at once.

    ``common`` ``(B, N, M, F, 2)`` in one shared frame per scenario,
    ``confidences`` ``(B, N, M)``, ``valid`` ``(B, N)``.
    Returns ``(B, N*M, N*M)``: query ``(i, m)`` groups key ``(j, m')``.
    """
    B, N, M, F, _ = common.shape
    flat = common.reshape(B, N * M, F, 2)
    dx = flat[:, :, None, :, 0] - flat[:, None, :, :, 0]
    dy = flat[:, :, None, :, 1] - flat[:, None, :, :, 1]
    close = np.hypot(dx, dy).min(axis=-1) < max_distance
    agent = np.repeat(np.arange(N), M)
    other = agent[:, None] != agent[None, :]
    key_ok = ((confidences > min_confidence) & valid[..., None]).reshape(B, 1, N * M)
    query_ok = np.repeat(valid, M, axis=1)[:, :, None]
    return close & other[None] & key_ok & query_ok


# ---------------------------------------------------------------- single-instance ops


def embed_scene(scene_xy: np.ndarray, scene_attr: np.ndarray, store: ParameterStore,
                prefix: str = "refiner") -> SceneEmbeddings:
    xy = np.asarray(scene_xy, dtype=np.float64).reshape(-1, 2)
    attr = np.asarray(scene_attr).astype(np.int64).reshape(-1)
    w = store[f"{prefix}.scene_embed.weight"]
    if not len(xy):
        return SceneEmbeddings(Tensor(np.zeros((0, w.shape[1]))), xy, attr)
    feats = np.zeros((len(xy), 5))
    feats[:, :2] = xy * POSITION_SCALE
    feats[np.arange(len(xy)), 2 + attr] = 1.0
    psi = ad.linear(Tensor(feats), w, store[f"{prefix}.scene_embed.bias"])
    return SceneEmbeddings(psi, xy, attr)


def tubular_region_pooling(proposal, scene, tau: float, mode: int = 0) -> TubePool:
    """Indices of scene vectors within ``tau`` of any waypoint of ``proposal`` ``(F, 2)``.

    ``scene`` is a :class:`SceneEmbeddings` or an ``(L, 2)`` array of positions.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    xy = scene.xy if isinstance(scene, SceneEmbeddings) else np.asarray(scene, dtype=np.float64)
    xy = xy.reshape(-1, 2)
    if not len(xy):
        return TubePool(np.zeros(0, dtype=np.int64), mode)
    member = pool_mask(np.asarray(proposal)[None], xy, tau)[0]
    return TubePool(np.nonzero(member)[0], mode)


def distance_proposal_grouping(target_mode: int, proposals: ProposalSet,
                               max_distance: float, min_confidence: float) -> ProposalGroup:
    """Group other agents' proposals around proposal ``target_mode`` of agent 0."""
    N, M = proposals.n_agents, proposals.modes
    common = proposals.trajectories.data[None]
    conf = proposals.confidences.data[None]
    mask = group_mask(common, conf, np.ones((1, N), dtype=bool), max_distance, min_confidence)
    keys = np.nonzero(mask[0, target_mode])[0]
    refs = [(int(k // M), int(k % M)) for k in keys]
    d = proposals.features.shape[-1]
    if not refs:
        return ProposalGroup(Tensor(np.zeros((0, d))), [])
    flat = proposals.features.reshape(N * M, d)
    return ProposalGroup(flat[keys], refs)


# ---------------------------------------------------------------- batched refinement


def refine_batch(store: ParameterStore, cfg: RefinerConfig, batch: Batch, local: Tensor,
                 common: np.ndarray, confidences: np.ndarray, features: Tensor,
                 training: bool = False, rng: np.random.Generator | None = None,
                 prefix: str = "refiner") -> RefinerOutput:
    """Refine every agent's proposals, each agent acting as target in its own frame.

    ``local`` ``(R, M, F, 2)`` and ``features`` ``(R, M, d)`` carry gradients;
    ``common`` ``(R, M, F, 2)`` and ``confidences`` ``(R, M)`` are plain arrays
    used only to pick context.
    """
    B, N, R, L = batch.B, batch.N, batch.rows, batch.L
    M, F, d = cfg.modes, cfg.future_steps, cfg.d
    p = lambda name: store[f"{prefix}.{name}"]

    own_scene = batch.own_scene.reshape(R, L, 2)
    scene_valid = np.repeat(batch.scene_valid, N, axis=0) & batch.valid.reshape(R, 1)
    pool = pool_mask(local.data, own_scene, cfg.tau, scene_valid)          # (R, M, L)
    group = group_mask(common.reshape(B, N, M, F, 2), confidences.reshape(B, N, M),
                       batch.valid, cfg.group_distance, cfg.min_confidence)

    scene_ctx = features
    if cfg.use_scene:
        feats, index = batch.row_scene_features(pool.any(axis=1))
        if feats.shape[1]:
            psi = ad.linear(Tensor(feats), p("scene_embed.weight"), p("scene_embed.bias"))
            rows = np.arange(R)[:, None]
            mask = pool[rows[:, None], np.arange(M)[None, :, None], np.maximum(index, 0)[:, None, :]]
            mask &= (index >= 0)[:, None, :]
            scene_ctx = attention_block(store, f"{prefix}.tube_attn", features, psi, mask,
                                        cfg.heads, cfg.dropout, training, rng)
    inter_ctx = features
    if cfg.use_interaction:
        flat = features.reshape(B, N * M, d)
        inter_ctx = attention_block(store, f"{prefix}.interaction_attn", flat, flat, group, cfg.heads,
                                    cfg.dropout, training, rng).reshape(R, M, d)

    joint = ad.concat([scene_ctx, inter_ctx], axis=-1)                      # (R, M, 2d)
    out = ad.mlp_forward(joint, store.layers(f"{prefix}.reg", 2)).reshape(R, M, F, 4)
    means = local + out[..., :2]
    scales = ad.softplus(out[..., 2:]) + SCALE_FLOOR
    logits = ad.mlp_forward(joint.reshape(R, M * 2 * d), store.layers(f"{prefix}.cls", 2))
    return RefinerOutput(means, scales, logits, pool, group)


def refine(proposals: ProposalSet, scenario: Scenario, store: ParameterStore, cfg: RefinerConfig,
           training: bool = False, rng: np.random.Generator | None = None,
           prefix: str = "refiner") -> RefinedPrediction:
    """Refine the proposals of agent 0 of ``scenario``."""
    batch = make_batch([scenario], cfg.future_steps)
    if proposals.n_agents != batch.N:
        raise ValueError("proposal set and scenario disagree on the number of agents")
    out = refine_batch(store, cfg, batch, proposals.local_trajectories,
                       proposals.trajectories.data, proposals.confidences.data,
                       proposals.features, training, rng, prefix)
    M = cfg.modes
    pools = [np.nonzero(out.pool[0, m])[0] for m in range(M)]
    groups = [[(int(k // M), int(k % M)) for k in np.nonzero(out.group[0, m])[0]]
              for m in range(M)]
    return RefinedPrediction(out.means[0], out.scales[0],
                             ad.softmax(out.logits[0:1], axis=-1).reshape(M), pools, groups)
