"""scikit-learn style wrapper: ``fit`` on scenarios, ``predict`` target-agent futures."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import Scenario
from .metrics import evaluate
from .model import ModelConfig, TwoStageModel, predict_targets
from .proposer import ProposerConfig
from .refiner import RefinerConfig
from .training import TrainConfig, train


def check_scenarios(X, require_future: bool = False, past_steps: int | None = None) -> list[Scenario]:
    """Validate a non-empty sequence of :class:`Scenario` objects and return it as a list."""
    if isinstance(X, Scenario):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of Scenario objects, got {type(X).__name__}") from None
    if not items:
        raise ValueError("expected at least one scenario")
    for i, s in enumerate(items):
        if not isinstance(s, Scenario):
            raise TypeError(f"item {i} is {type(s).__name__}, not Scenario")
        if past_steps is not None and s.agents[0].past.shape[0] != past_steps:
            raise ValueError(f"scenario {s.scenario_id}: target has {s.agents[0].past.shape[0]} "
                             f"past states, expected {past_steps}")
        if require_future and s.agents[0].future is None:
            raise ValueError(f"scenario {s.scenario_id}: target agent has no ground-truth future")
    return items


class TrajectoryPredictor(BaseEstimator):
    """Two-stage multimodal predictor with sklearn's ``get_params``/``set_params``.

    ``predict`` returns the target agent's ``(n, M, F, 2)`` mode means in the
    target's own frame; ``predict_proba`` the ``(n, M)`` mode confidences.
    ``score`` is the negative minFDE over the top ``k`` modes (higher is better).
    """

    def __init__(self, d=64, modes=6, heads=4, dropout=0.1, past_steps=20, future_steps=30,
                 tau=20.0, group_distance=10.0, min_confidence=0.1, use_refiner=True,
                 use_scene=True, use_interaction=True, epochs=64, batch_size=32, lr=5e-4,
                 weight_decay=0.01, k=6, random_state=0):
        self.d = d
        self.modes = modes
        self.heads = heads
        self.dropout = dropout
        self.past_steps = past_steps
        self.future_steps = future_steps
        self.tau = tau
        self.group_distance = group_distance
        self.min_confidence = min_confidence
        self.use_refiner = use_refiner
        self.use_scene = use_scene
        self.use_interaction = use_interaction
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.k = k
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            ProposerConfig(d=self.d, modes=self.modes, heads=self.heads, dropout=self.dropout,
                           past_steps=self.past_steps, future_steps=self.future_steps),
            RefinerConfig(tau=self.tau, group_distance=self.group_distance,
                          min_confidence=self.min_confidence, heads=self.heads, dropout=self.dropout,
                          use_scene=self.use_scene, use_interaction=self.use_interaction),
            use_refiner=self.use_refiner)

    def fit(self, X, y=None, X_val=None):
        """Train on scenarios ``X``; ``y`` is unused (futures live inside the scenarios)."""
        X = check_scenarios(X, require_future=True, past_steps=self.past_steps)
        val = check_scenarios(X_val, require_future=True) if X_val is not None else []
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          weight_decay=self.weight_decay, eval_k=min(self.k, self.modes),
                          seed=self.random_state)
        result = train(X, val, cfg, self._model_config())
        self.model_ = result.model
        self.history_ = result.history
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_scenarios(X, past_steps=self.past_steps)
        return np.stack([p.means for p in predict_targets(self.model_, X)])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_scenarios(X, past_steps=self.past_steps)
        return np.stack([p.confidences for p in predict_targets(self.model_, X)])

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        X = check_scenarios(X, require_future=True, past_steps=self.past_steps)
        k = min(self.k, self.modes)
        return -evaluate(self.model_, X, ks=(k,))[f"minfde{k}"]

    @classmethod
    def from_model(cls, model: TwoStageModel) -> "TrajectoryPredictor":
        """Wrap an already trained network (e.g. one restored from a checkpoint)."""
        p, r = model.config.proposer, model.config.refiner
        est = cls(d=p.d, modes=p.modes, heads=p.heads, dropout=p.dropout, past_steps=p.past_steps,
                  future_steps=p.future_steps, tau=r.tau, group_distance=r.group_distance,
                  min_confidence=r.min_confidence, use_refiner=model.config.use_refiner,
                  use_scene=r.use_scene, use_interaction=r.use_interaction, random_state=model.seed)
        est.model_ = model
        return est
