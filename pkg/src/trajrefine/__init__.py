"""Two-stage multimodal trajectory prediction: proposals, then context-aware refinement.

The network and its training run on a small reverse-mode autodiff engine
built on numpy (:mod:`trajrefine.autodiff`).
"""

from .checkpoint import ModelCheckpoint
from .geometry import AgentTrack, Pose2, Scenario, to_agent_frame
from .metrics import EvalReport, evaluate, min_ade, min_fde, miss_rate, brier_fde
from .model import ModelConfig, TwoStageModel, predict_targets
from .proposer import ProposerConfig, propose
from .refiner import RefinerConfig, distance_proposal_grouping, refine, tubular_region_pooling
from .synth import GeneratorConfig, generate_dataset, generate_scenario
from .training import TrainConfig, cosine_lr, train

__version__ = "0.1.0"

__all__ = [
    "AgentTrack", "EvalReport", "GeneratorConfig", "ModelCheckpoint", "ModelConfig", "Pose2",
    "ProposerConfig", "RefinerConfig", "Scenario", "TrainConfig", "TwoStageModel", "brier_fde",
    "cosine_lr", "distance_proposal_grouping", "evaluate", "generate_dataset", "generate_scenario",
    "min_ade", "min_fde", "miss_rate", "predict_targets", "propose", "refine", "to_agent_frame",
    "train", "tubular_region_pooling",
]
