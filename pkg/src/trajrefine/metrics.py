"""Displacement metrics for multimodal forecasts and split-level reports.

All per-sample functions take ``predictions`` of shape ``(M, F, 2)`` and a
ground truth ``(F, 2)`` expressed in the same frame. When ``k < M`` the
``k`` most confident modes are evaluated (ties keep the lower index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MISS_THRESHOLD = 2.0


def top_k_modes(confidences: np.ndarray | None, M: int, k: int | None) -> np.ndarray:
    """Indices of the ``k`` most confident modes, in decreasing confidence."""
    k = M if k is None else int(k)
    if k < 1:
        raise ValueError("k must be ≥ 1")
    if k > M:
        raise ValueError(f"k={k} exceeds the number of modes M={M}")
    if confidences is None:
        return np.arange(k)
    return np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")[:k]


def _displacements(predictions, gt) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[1:] != gt.shape:
        raise ValueError(f"predictions {pred.shape} do not match ground truth {gt.shape}")
    return np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1])   # (M, F)


def min_ade(predictions, gt, k: int | None = None, confidences=None) -> float:
    err = _displacements(predictions, gt)
    sel = top_k_modes(confidences, err.shape[0], k)
    return float(err[sel].mean(axis=1).min())


def min_fde(predictions, gt, k: int | None = None, confidences=None) -> float:
    err = _displacements(predictions, gt)
    sel = top_k_modes(confidences, err.shape[0], k)
    return float(err[sel, -1].min())


def best_endpoint_mode(predictions, gt, k: int | None = None, confidences=None) -> int:
    """Mode (index into all ``M``) achieving ``min_fde``; lowest index on ties."""
    err = _displacements(predictions, gt)[:, -1]
    sel = np.sort(top_k_modes(confidences, err.shape[0], k))
    return int(sel[np.argmin(err[sel])])


def miss_rate(predictions: Sequence, gts: Sequence, k: int | None = None,
              confidences: Sequence | None = None, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of samples whose best endpoint is at least ``threshold`` metres off."""
    if len(predictions) == 0:
        raise ValueError("miss rate of an empty evaluation set is undefined")
    confs = confidences if confidences is not None else [None] * len(predictions)
    misses = [min_fde(p, g, k, c) >= threshold for p, g, c in zip(predictions, gts, confs)]
    return float(np.mean(misses))


def brier_fde(predictions, confidences, gt, k: int | None = None) -> float:
    """``min_fde + (1 - p)^2`` with ``p`` the confidence of the min-FDE mode."""
    conf = np.asarray(confidences, dtype=np.float64)
    m = best_endpoint_mode(predictions, gt, k, conf)
    return min_fde(predictions, gt, k, conf) + (1.0 - float(conf[m])) ** 2


@dataclass
class SampleMetrics:
    min_ade: dict[int, float]
    min_fde: dict[int, float]
    brier_fde: dict[int, float]


def sample_metrics(predictions, confidences, gt, ks: Sequence[int]) -> SampleMetrics:
    return SampleMetrics(
        {k: min_ade(predictions, gt, k, confidences) for k in ks},
        {k: min_fde(predictions, gt, k, confidences) for k in ks},
        {k: brier_fde(predictions, confidences, gt, k) for k in ks},
    )


@dataclass
class EvalReport:
    """Split-level averages. ``values`` maps keys like ``minfde6`` to floats."""
    ks: tuple[int, ...]
    values: dict[str, float] = field(default_factory=dict)
    n: int = 0

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> dict:
        return {**self.values, "n": self.n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        rows = [("metric", *[f"k={k}" for k in self.ks])]
        for name, key in (("minADE", "minade"), ("minFDE", "minfde"), ("MR", "mr"),
                          ("brierFDE", "brierfde")):
            rows.append((name, *[f"{self.values[f'{key}{k}']:.4f}" for k in self.ks]))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.append(f"samples: {self.n}")
        return "\n".join(lines)

    def violations(self) -> list[str]:
        """Broken metric invariants (empty when the report is consistent)."""
        out = []
        for k in self.ks:
            ade, fde = self.values[f"minade{k}"], self.values[f"minfde{k}"]
            mr, brier = self.values[f"mr{k}"], self.values[f"brierfde{k}"]
            if ade < 0 or fde < 0:
                out.append(f"negative displacement at k={k}")
            if not 0.0 <= mr <= 1.0:
                out.append(f"mr{k}={mr} outside [0, 1]")
            if not 0.0 <= brier - fde <= 1.0:
                out.append(f"brierfde{k} - minfde{k} = {brier - fde} outside [0, 1]")
        for a, b in zip(self.ks, self.ks[1:]):
            if self.values[f"minfde{b}"] > self.values[f"minfde{a}"]:
                out.append(f"minfde increases from k={a} to k={b}")
        return out


def aggregate(samples: Sequence[SampleMetrics], ks: Sequence[int]) -> EvalReport:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    ks = tuple(sorted(set(int(k) for k in ks)))
    values: dict[str, float] = {}
    for k in ks:
        fde = np.array([s.min_fde[k] for s in samples])
        values[f"minade{k}"] = float(np.mean([s.min_ade[k] for s in samples]))
        values[f"minfde{k}"] = float(fde.mean())
        values[f"mr{k}"] = float(np.mean(fde >= MISS_THRESHOLD))
        values[f"brierfde{k}"] = float(np.mean([s.brier_fde[k] for s in samples]))
    return EvalReport(ks, values, len(samples))


def evaluate(model, scenarios: Sequence, ks: Sequence[int] = (6,), stage: str = "final",
             batch_size: int = 64, check: bool = True) -> EvalReport:
    """Evaluate the target agent (index 0) of every scenario in eval mode.

    ``stage`` is ``"final"`` (refined output when the model has a refiner)
    or ``"proposal"``. With ``check`` the report's invariants are verified and
    a violation raises ``ArithmeticError``.
    """
    from .model import predict_targets

    if len(scenarios) == 0:
        raise ValueError("cannot evaluate an empty split")
    if stage not in ("final", "proposal"):
        raise ValueError(f"unknown stage '{stage}'")
    preds = predict_targets(model, scenarios, batch_size)
    samples = []
    for s, p in zip(scenarios, preds):
        if p.gt is None:
            raise ValueError(f"scenario {s.scenario_id}: target agent has no ground-truth future")
        traj, conf = (p.means, p.confidences) if stage == "final" else (p.proposals, p.proposal_conf)
        samples.append(sample_metrics(traj, conf, p.gt, ks))
    report = aggregate(samples, ks)
    if check:
        bad = report.violations()
        if bad:
            raise ArithmeticError("metric invariants violated: " + "; ".join(bad))
    return report
