"""Command-line interface: ``gen-data``, ``train``, ``eval``, ``predict``, ``ingest``.

Configuration is merged from three layers, later ones winning: built-in
defaults, a TOML file given with ``--config`` (sections ``[generator]``,
``[proposer]``, ``[refiner]``, ``[training]``, ``[metrics]`` plus top-level
``seed`` and ``out``), and command-line flags.

Exit codes: 0 success, 2 invalid input or configuration, 3 I/O failure,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomli

from .checkpoint import ModelCheckpoint
from .geometry import Pose2, Scenario
from .metrics import evaluate
from .model import ModelConfig, TwoStageModel
from .proposer import ProposerConfig
from .refiner import RefinerConfig
from .synth import (SPLITS, GeneratorConfig, generate_dataset, ingest_csv, parse_column_map,
                    read_scenarios, write_dataset, write_scenarios)
from .training import TrainConfig, TrainingAborted, train

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SECTIONS = {"generator": GeneratorConfig, "proposer": ProposerConfig, "refiner": RefinerConfig,
            "training": TrainConfig}

log = logging.getLogger("trajrefine")


@dataclass
class MetricsConfig:
    ks: tuple[int, ...] = (1, 6)
    stage: str = "final"


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    proposer: ProposerConfig = field(default_factory=ProposerConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    use_refiner: bool = True
    seed: int = 0
    out: str = "."
    config_path: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(ProposerConfig(**asdict(self.proposer)),
                           RefinerConfig(**asdict(self.refiner)), self.use_refiner)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(cls, values: dict[str, Any], section: str) -> dict[str, Any]:
    """Check keys against the dataclass and turn TOML lists into tuples where needed."""
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown key '{key}' in [{section}]")
        if isinstance(value, list):
            value = tuple(value)
        out[key] = value
    return out


def build_run_config(file_values: dict | None = None, overrides: dict | None = None,
                     config_path: str | None = None) -> RunConfig:
    """Defaults, then ``file_values``, then ``overrides`` (same nested layout)."""
    merged: dict[str, dict] = {name: {} for name in (*SECTIONS, "metrics")}
    top: dict[str, Any] = {}
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key in merged:
                if not isinstance(value, dict):
                    raise ValueError(f"[{key}] must be a table")
                merged[key].update(value)
            elif key in ("seed", "out", "use_refiner"):
                top[key] = value
            else:
                raise ValueError(f"unknown top-level config key '{key}'")
    kwargs = {name: cls(**_coerce(cls, merged[name], name)) for name, cls in SECTIONS.items()}
    kwargs["metrics"] = MetricsConfig(**_coerce(MetricsConfig, merged["metrics"], "metrics"))
    return RunConfig(**kwargs, **top, config_path=config_path)


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ValueError(f"{path}: invalid TOML ({exc})") from None


def _set(tree: dict, section: str | None, key: str, value) -> None:
    if value is None:
        return
    if section is None:
        tree[key] = value
    else:
        tree.setdefault(section, {})[key] = value


# flag name -> (section, config key); ``None`` section means top level
FLAG_MAP = {
    "seed": (None, "seed"), "out": (None, "out"),
    "n": ("generator", "n_scenarios"), "past_steps": ("generator", "past_steps"),
    "future_steps": ("generator", "future_steps"),
    "epochs": ("training", "epochs"), "batch_size": ("training", "batch_size"),
    "lr": ("training", "lr"), "weight_decay": ("training", "weight_decay"),
    "grad_clip": ("training", "grad_clip"),
    "d": ("proposer", "d"), "modes": ("proposer", "modes"), "heads": ("proposer", "heads"),
    "dropout": ("proposer", "dropout"), "tau": ("refiner", "tau"),
    "group_distance": ("refiner", "group_distance"), "min_confidence": ("refiner", "min_confidence"),
    "k": ("metrics", "ks"), "stage": ("metrics", "stage"),
}

PROFILES = {
    "full": {},
    "desk": {"proposer": {"d": 64}, "training": {"batch_size": 64}},
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    profile = PROFILES[getattr(args, "profile", None) or "full"]
    base: dict = {}
    for layer in (profile, file_values):
        for key, value in layer.items():
            if isinstance(value, dict):
                base.setdefault(key, {}).update(value)
            else:
                base[key] = value
    overrides: dict = {}
    for flag, (section, key) in FLAG_MAP.items():
        _set(overrides, section, key, getattr(args, flag, None))
    if getattr(args, "no_refiner", False):
        overrides["use_refiner"] = False
    if getattr(args, "no_scene", False):
        _set(overrides, "refiner", "use_scene", False)
    if getattr(args, "no_interaction", False):
        _set(overrides, "refiner", "use_interaction", False)
    cfg = build_run_config(base, overrides, getattr(args, "config", None))
    # one seed drives data generation and model/training randomness
    cfg.generator.rng_seed = cfg.seed
    cfg.training.seed = cfg.seed
    cfg.refiner.dropout = cfg.proposer.dropout
    cfg.refiner.heads = cfg.proposer.heads
    cfg.proposer.past_steps = cfg.generator.past_steps
    cfg.proposer.future_steps = cfg.generator.future_steps
    return cfg


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    cfg.generator.validate()
    split = generate_dataset(cfg.generator)
    gen = asdict(cfg.generator)
    info = write_dataset(split, cfg.out, {"seed": cfg.seed, "generator": gen})
    print(json.dumps(info["counts"], sort_keys=True))
    return EXIT_OK


def _read_split_dir(root: Path, name: str) -> list[Scenario]:
    path = root / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return read_scenarios(path)


def cmd_train(args, cfg: RunConfig) -> int:
    root = Path(args.data)
    train_set = _read_split_dir(root, "train")
    val_path = root / "val.jsonl"
    val_set = read_scenarios(val_path) if val_path.exists() else []
    resume = ModelCheckpoint.load(args.resume) if args.resume else None
    result = train(train_set, val_set, cfg.training, cfg.model_config(), out_dir=cfg.out,
                   resume=resume, snapshot_extra={"metrics": asdict(cfg.metrics)})
    print(json.dumps(result.last.metrics, sort_keys=True))
    return EXIT_OK


def _load_eval_split(args) -> list[Scenario]:
    if args.input:
        return read_scenarios(args.input)
    return _read_split_dir(Path(args.data), args.split)


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    model = ckpt.build_model()
    scenarios = _load_eval_split(args)
    M = model.config.proposer.modes
    ks = tuple(sorted({min(int(k), M) for k in cfg.metrics.ks}))
    stage = cfg.metrics.stage if model.config.use_refiner else "proposal"
    report = evaluate(model, scenarios, ks=ks, stage=stage)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(report.to_json())
    print(report.table())
    return EXIT_OK


def _world(frame: Pose2, points: np.ndarray) -> list:
    return frame.to_parent(points).tolist()


def export_predictions(model: TwoStageModel, scenarios: Sequence[Scenario],
                       batch_size: int = 32) -> dict:
    """Plot-ready predictions in world coordinates for every scenario."""
    cfg = model.config
    docs = []
    for start in range(0, len(scenarios), batch_size):
        chunk = list(scenarios[start:start + batch_size])
        out = model.forward(chunk, training=False)
        batch = out.batch
        N, M = batch.N, cfg.proposer.modes
        prop_conf = out.proposal.confidences().data
        if out.refined is not None:
            ref_conf = out.refined.confidences().data
        for b, s in enumerate(chunk):
            agents = []
            for i, a in enumerate(s.agents):
                r = b * N + i
                agents.append({
                    "agent_id": a.agent_id,
                    "semantic": int(a.semantic),
                    "past": _world(s.frame, a.past),
                    "future": None if a.future is None else _world(s.frame, a.future),
                    "proposals": _world(s.frame, out.proposal.common.data[r]),
                    "proposal_confidences": prop_conf[r].tolist(),
                })
            r = b * N
            target_frame = s.frame.compose(Pose2(*batch.pose[b, 0]))
            target = {"agent_id": s.agents[0].agent_id,
                      "pose": [target_frame.x, target_frame.y, target_frame.heading],
                      "proposals": _world(target_frame, out.proposal.local.data[r])}
            if out.refined is not None:
                n_scene = len(s.scene_xy)
                target.update({
                    "means": _world(target_frame, out.refined.means.data[r]),
                    "scales": out.refined.scales.data[r].tolist(),
                    "confidences": ref_conf[r].tolist(),
                    "tube_pools": [[int(l) for l in np.nonzero(out.refined.pool[r, m, :n_scene])[0]]
                                   for m in range(M)],
                    "groups": [[[int(k // M), int(k % M)] for k in np.nonzero(out.refined.group[b, m])[0]]
                               for m in range(M)],
                })
            else:
                target.update({"means": target["proposals"],
                               "scales": out.proposal.scales.data[r].tolist(),
                               "confidences": prop_conf[r].tolist(),
                               "tube_pools": None, "groups": None})
            docs.append({
                "scenario_id": s.scenario_id,
                "scene": {"xy": _world(s.frame, s.scene_xy), "attr": s.scene_attr.tolist()},
                "agents": agents,
                "target": target,
            })
    return {
        "format": 1,
        "frame": "world",
        "scales_frame": "target",
        "tau": cfg.refiner.tau,
        "group_distance": cfg.refiner.group_distance,
        "min_confidence": cfg.refiner.min_confidence,
        "scenarios": docs,
    }


def cmd_predict(args, cfg: RunConfig) -> int:
    model = ModelCheckpoint.load(args.checkpoint).build_model()
    scenarios = read_scenarios(args.input)
    doc = export_predictions(model, scenarios)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
    print(f"wrote {len(scenarios)} scenario(s) to {out}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    report = ingest_csv(args.tracks, args.scene, parse_column_map(args.col_map),
                        cfg.generator.past_steps, cfg.generator.future_steps)
    if not report.scenarios:
        raise ValueError("no scenario has an agent with enough history")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_scenarios(report.scenarios, out)
    print(json.dumps({"scenarios": n, "dropped_agents": report.n_dropped}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="random seed (data, init, shuffling, dropout)")
    p.add_argument("--out", help="output directory (file path for predict/ingest)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="preset sizes: full (default) or desk")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, help="feature width")
    p.add_argument("--modes", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--tau", type=float, help="tube radius in metres")
    p.add_argument("--group-distance", type=float)
    p.add_argument("--min-confidence", type=float)
    p.add_argument("--no-refiner", action="store_true", help="train the proposal stage alone")
    p.add_argument("--no-scene", action="store_true", help="drop tube scene attention")
    p.add_argument("--no-interaction", action="store_true", help="drop proposal interaction attention")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of scenarios")
    p.add_argument("--past-steps", type=int)
    p.add_argument("--future-steps", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl and val.jsonl")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--resume", help="continue from a checkpoint (e.g. last.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="val", choices=SPLITS)
    p.add_argument("--input", help="scenario JSONL file (instead of --data/--split)")
    p.add_argument("--k", type=int, nargs="+", help="top-k values to report")
    p.add_argument("--stage", choices=("final", "proposal"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export plot-ready predictions")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="scenario JSONL file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ingest", help="convert CSV tracks (and scene points) to scenario JSONL")
    _common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--scene")
    p.add_argument("--col-map", help="rename columns, e.g. 'x=pos_x,y=pos_y'")
    p.add_argument("--past-steps", type=int)
    p.add_argument("--future-steps", type=int)
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "eval" and not (args.data or args.input):
        parser.error("eval needs --data or --input")
    if args.command in ("predict", "ingest") and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (TrainingAborted, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
