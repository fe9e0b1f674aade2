"""Optimizer, learning-rate schedule and the end-to-end training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .checkpoint import ModelCheckpoint
from .geometry import Scenario
from .losses import LossBreakdown
from .metrics import EvalReport, evaluate
from .model import ModelConfig, TwoStageModel
from .params import ParameterStore

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training aborted at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass
class TrainConfig:
    epochs: int = 64
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    horizon: int | None = None          # cosine horizon in epochs; defaults to ``epochs``
    grad_clip: float | None = None      # global L2 norm, off by default
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    eval_k: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be ≥ 0 and batch_size ≥ 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("betas must lie in [0, 1) and eps must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be ≥ 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights needs four entries")


def cosine_lr(epoch: float, base_lr: float, horizon: float) -> float:
    """``base_lr * (1 + cos(pi * epoch / horizon)) / 2``, held at 0 past the horizon."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    t = min(max(epoch, 0.0), horizon)
    return base_lr * (1.0 + math.cos(math.pi * t / horizon)) / 2.0


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases or norm gains)."""
    return name.endswith(".weight")


@dataclass
class OptimizerState:
    """Adam moments with decoupled weight decay."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    base_lr: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    horizon: int = 64
    dropout: float = 0.1

    @classmethod
    def for_store(cls, store: ParameterStore, **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        for name, t in store.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state

    def apply(self, store: ParameterStore, lr: float) -> None:
        """One AdamW update using the gradients currently held by ``store``."""
        self.step += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, t in store.items():
            if t.grad is None:
                continue
            g = t.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if decays(name):
                t.data = t.data * (1.0 - lr * self.weight_decay)
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def export(self) -> dict:
        return {"step": self.step, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def restore(self, blob: dict) -> None:
        if set(blob["m"]) != set(self.m) or set(blob["v"]) != set(self.v):
            raise ValueError("optimizer state does not match the model parameters")
        self.step = int(blob["step"])
        self.m = {k: np.array(a, dtype=np.float64) for k, a in blob["m"].items()}
        self.v = {k: np.array(a, dtype=np.float64) for k, a in blob["v"].items()}


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    grads = [t.grad for t in store.tensors() if t.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for t in store.tensors():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


class Trainer:
    """Owns a model and its optimizer state; one call to :meth:`step` is one update."""

    def __init__(self, model: TwoStageModel, config: TrainConfig | None = None):
        self.model = model
        self.config = config or TrainConfig()
        self.config.validate()
        cfg = self.config
        self.optimizer = OptimizerState.for_store(
            model.params, base_lr=cfg.lr, weight_decay=cfg.weight_decay,
            betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, horizon=cfg.horizon or max(cfg.epochs, 1),
            dropout=model.config.proposer.dropout)

    def lr_at(self, epoch: float) -> float:
        return cosine_lr(epoch, self.config.lr, self.optimizer.horizon)

    def step(self, scenarios: Sequence[Scenario], lr: float,
             rng: np.random.Generator | None = None) -> LossBreakdown:
        n = self.optimizer.step + 1
        try:
            out = self.model.forward(scenarios, training=True, rng=rng)
            losses = self.model.loss(out, self.config.loss_weights)
            if not np.isfinite(losses.total.data):
                raise TrainingAborted(n, f"non-finite loss {losses.as_dict()}")
            self.model.params.zero_grad()
            ad.backward(losses.total)
        except NonFiniteError as exc:
            raise TrainingAborted(n, str(exc)) from exc
        bad = [name for name, t in self.model.params.items()
               if t.grad is not None and not np.isfinite(t.grad).all()]
        if bad:
            raise TrainingAborted(n, f"non-finite gradient in {bad[:3]}")
        if self.config.grad_clip is not None:
            clip_gradients(self.model.params, self.config.grad_clip)
        self.optimizer.apply(self.model.params, lr)
        self.model.params.zero_grad()
        return losses

    def run_epoch(self, scenarios: Sequence[Scenario], epoch: int) -> float:
        """One shuffled pass; returns the mean total loss over batches."""
        cfg = self.config
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scenarios))
        dropout_rng = np.random.default_rng([cfg.seed, epoch, 1])
        lr = self.lr_at(epoch)
        totals = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenarios[i] for i in order[start:start + cfg.batch_size]]
            totals.append(self.step(batch, lr, dropout_rng).total.item())
        return float(np.mean(totals))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_total: float
    val: EvalReport

    def row(self, k: int) -> list:
        return [self.epoch, repr(self.lr), repr(self.train_total), repr(self.val[f"minade{k}"]),
                repr(self.val[f"minfde{k}"]), repr(self.val[f"mr{k}"])]


@dataclass
class TrainResult:
    model: TwoStageModel
    history: list[EpochLog]
    last: ModelCheckpoint
    best: ModelCheckpoint


def run_config_snapshot(model: TwoStageModel, config: TrainConfig, extra: dict | None = None) -> dict:
    return {"model": model.config.to_dict(), "training": asdict(config), "seed": model.seed,
            **(extra or {})}


def train(train_set: Sequence[Scenario], val_set: Sequence[Scenario] = (),
          config: TrainConfig | None = None, model_config: ModelConfig | None = None,
          out_dir=None, resume: ModelCheckpoint | None = None,
          snapshot_extra: dict | None = None) -> TrainResult:
    """Train both stages jointly and keep the best-validation and last checkpoints.

    The model seed equals ``config.seed``. Validation uses minFDE over the
    target agents of ``val_set`` (the training split when ``val_set`` is
    empty). With ``out_dir`` the files ``best.ckpt``, ``last.ckpt`` and
    ``metrics.csv`` are written after every epoch.
    """
    config = config or TrainConfig()
    config.validate()
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    val_set = list(val_set) or list(train_set)

    if resume is not None:
        model = resume.build_model()
        snapshot = resume.config
        config = TrainConfig(**{**asdict(config), "seed": snapshot.get("seed", config.seed)})
    else:
        model = TwoStageModel(model_config or ModelConfig(), seed=config.seed)
        snapshot = run_config_snapshot(model, config, snapshot_extra)
    k = min(config.eval_k, model.config.proposer.modes)
    trainer = Trainer(model, config)
    start = 0
    best_score = math.inf
    if resume is not None:
        if resume.optimizer is not None:
            trainer.optimizer.restore(resume.optimizer)
        start = resume.epoch
        best_score = resume.metrics.get(f"minfde{k}", math.inf)

    out = Path(out_dir) if out_dir is not None else None
    csv_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        if resume is None or not csv_path.exists():
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "lr", "train_total", f"val_minade{k}",
                                         f"val_minfde{k}", f"val_mr{k}"])

    def checkpoint(epoch: int, report: EvalReport) -> ModelCheckpoint:
        return ModelCheckpoint(snapshot, model.params.state(), trainer.optimizer.export(), epoch,
                               dict(report.values))

    history: list[EpochLog] = []
    last = best = resume
    for epoch in range(start, config.epochs):
        lr = trainer.lr_at(epoch)
        train_total = trainer.run_epoch(train_set, epoch)
        report = evaluate(model, val_set, ks=(k,))
        entry = EpochLog(epoch + 1, lr, train_total, report)
        history.append(entry)
        log.info("epoch %d lr %.3g loss %.4f val minADE%d %.4f minFDE%d %.4f", epoch + 1, lr,
                 train_total, k, report[f"minade{k}"], k, report[f"minfde{k}"])
        last = checkpoint(epoch + 1, report)
        if report[f"minfde{k}"] < best_score or best is None:
            best_score = report[f"minfde{k}"]
            best = last
        if out is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(entry.row(k))
            last.save(out / "last.ckpt")
            best.save(out / "best.ckpt")

    if last is None:
        # zero epochs requested on a fresh model: checkpoint the initialisation
        last = best = checkpoint(0, evaluate(model, val_set, ks=(k,)))
        if out is not None:
            last.save(out / "last.ckpt")
            best.save(out / "best.ckpt")
    return TrainResult(model, history, last, best)
