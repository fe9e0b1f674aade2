"""The two-stage network: parameters, batched forward pass and training loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batching import Batch, make_batch
from .geometry import Scenario
from .losses import LossBreakdown, combine, row_losses, scenario_weights
from .params import ParameterStore
from .proposer import ProposalOutput, ProposerConfig, init_proposer, propose_batch
from .refiner import RefinerConfig, RefinerOutput, init_refiner, refine_batch


@dataclass
class ModelConfig:
    proposer: ProposerConfig = field(default_factory=ProposerConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    use_refiner: bool = True

    def __post_init__(self):
        if isinstance(self.proposer, dict):
            self.proposer = ProposerConfig(**self.proposer)
        if isinstance(self.refiner, dict):
            self.refiner = RefinerConfig(**self.refiner)
        # the refiner consumes proposer outputs, so shapes must agree
        self.refiner.d = self.proposer.d
        self.refiner.modes = self.proposer.modes
        self.refiner.future_steps = self.proposer.future_steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    batch: Batch
    proposal: ProposalOutput
    refined: RefinerOutput | None

    def final(self) -> tuple[Tensor, Tensor, Tensor]:
        """Means, scales and confidences of the last stage that ran."""
        if self.refined is not None:
            return self.refined.means, self.refined.scales, self.refined.confidences()
        return self.proposal.local, self.proposal.scales, self.proposal.confidences()


class TwoStageModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = int(seed)
        self.params = ParameterStore(self.seed)
        init_proposer(self.params, self.config.proposer)
        if self.config.use_refiner:
            init_refiner(self.params, self.config.refiner)

    def forward(self, scenarios: Sequence[Scenario] | Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        batch = scenarios if isinstance(scenarios, Batch) else \
            make_batch(scenarios, self.config.proposer.future_steps)
        if training and rng is None:
            rng = np.random.default_rng(self.seed)
        prop = propose_batch(self.params, self.config.proposer, batch, training, rng)
        refined = None
        if self.config.use_refiner:
            refined = refine_batch(self.params, self.config.refiner, batch, prop.local,
                                   prop.common.data, prop.confidences().data, prop.features,
                                   training, rng)
        return ForwardOutput(batch, prop, refined)

    def loss(self, out: ForwardOutput, weights=(1.0, 1.0, 1.0, 1.0)) -> LossBreakdown:
        return total_loss(out.batch, out.proposal, out.refined, weights)


def total_loss(batch: Batch, proposal: ProposalOutput, refined: RefinerOutput | None,
               weights=(1.0, 1.0, 1.0, 1.0)) -> LossBreakdown:
    """Weighted sum of both stages' WTA regression and classification losses.

    Each stage picks its own winning mode. Losses average over the agents of
    a scenario that have a ground-truth future, then over scenarios.
    """
    if not batch.has_future[:, 0].all():
        missing = [s.scenario_id for s, ok in zip(batch.scenarios, batch.has_future[:, 0]) if not ok]
        raise ValueError(f"target agent has no ground-truth future in scenarios {missing[:5]}")
    use = (batch.valid & batch.has_future).reshape(-1)
    rows = np.nonzero(use)[0]
    w = Tensor(scenario_weights((batch.valid & batch.has_future))[rows])
    gt = batch.future.reshape(batch.rows, batch.future_steps, 2)

    nll, ce = row_losses(proposal.local, proposal.scales, proposal.logits, gt, rows)
    reg_pro, cls_pro = (nll * w).sum(), (ce * w).sum()
    if refined is not None:
        nll, ce = row_losses(refined.means, refined.scales, refined.logits, gt, rows)
        reg_ref, cls_ref = (nll * w).sum(), (ce * w).sum()
    else:
        reg_ref = cls_ref = Tensor(0.0)
    return combine((reg_pro, cls_pro, reg_ref, cls_ref), weights)


@dataclass
class TargetPrediction:
    """Numpy view of one scenario's target-agent outputs (target frame)."""
    proposals: np.ndarray        # (M, F, 2)
    proposal_conf: np.ndarray    # (M,)
    means: np.ndarray            # (M, F, 2) final stage
    scales: np.ndarray
    confidences: np.ndarray
    gt: np.ndarray | None


def predict_targets(model: TwoStageModel, scenarios: Sequence[Scenario],
                    batch_size: int = 64) -> list[TargetPrediction]:
    """Eval-mode predictions for agent 0 of every scenario."""
    preds: list[TargetPrediction] = []
    for start in range(0, len(scenarios), batch_size):
        chunk = list(scenarios[start:start + batch_size])
        out = model.forward(chunk, training=False)
        N = out.batch.N
        means, scales, conf = out.final()
        pconf = out.proposal.confidences().data
        for b, s in enumerate(chunk):
            r = b * N
            preds.append(TargetPrediction(
                proposals=out.proposal.local.data[r].copy(),
                proposal_conf=pconf[r].copy(),
                means=means.data[r].copy(),
                scales=scales.data[r].copy(),
                confidences=conf.data[r].copy(),
                gt=out.batch.future[b, 0].copy() if out.batch.has_future[b, 0] else None,
            ))
    return preds
