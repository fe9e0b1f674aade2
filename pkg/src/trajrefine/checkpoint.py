"""Model checkpoints: parameters, configuration snapshot and training state in one file."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import CheckpointFormatError, pack, unpack

KIND = "two-stage-checkpoint"


@dataclass
class ModelCheckpoint:
    config: dict                                   # run configuration snapshot (JSON-able)
    params: dict[str, np.ndarray]
    optimizer: dict | None = None                  # {"step": int, "m": {...}, "v": {...}}
    epoch: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {"kind": KIND, "config": self.config, "epoch": int(self.epoch),
                "metrics": self.metrics, "optimizer_step": None}
        records = {f"param/{k}": v for k, v in self.params.items()}
        if self.optimizer is not None:
            meta["optimizer_step"] = int(self.optimizer["step"])
            records.update({f"adam_m/{k}": v for k, v in self.optimizer["m"].items()})
            records.update({f"adam_v/{k}": v for k, v in self.optimizer["v"].items()})
        return pack(records, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        meta, records = unpack(blob)
        if meta.get("kind") != KIND:
            raise CheckpointFormatError("file holds bare parameters, not a model checkpoint")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for name, arr in records.items():
            group, _, key = name.partition("/")
            if group not in groups:
                raise CheckpointFormatError(f"unknown record group in '{name}'")
            groups[group][key] = arr
        optimizer = None
        if meta.get("optimizer_step") is not None:
            optimizer = {"step": meta["optimizer_step"], "m": groups["adam_m"], "v": groups["adam_v"]}
        return cls(meta["config"], groups["param"], optimizer, meta["epoch"], meta["metrics"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self):
        """Instantiate the network described by ``config["model"]`` with these parameters."""
        from .model import ModelConfig, TwoStageModel

        model = TwoStageModel(ModelConfig(**self.config["model"]), seed=self.config.get("seed", 0))
        model.params.load_state(self.params)
        return model
