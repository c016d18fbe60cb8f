"""Experiment configuration and master-seed splitting.

A config is one JSON object; every section is optional and falls back to
the defaults below::

    {
      "seed": 0,
      "paths": {"out": "run", "spec": null, "data": null},
      "data": {"n_train": 3000, "n_test": 600, "size": 32},
      "controller": {"h_dim": 64, "e_dim": 64, "ratio_mode": "continuous",
                     "search_mode": "joint"},
      "rl": {"episodes": 310, "lr": 0.001, "baseline_decay": 0.9,
             "lam": 10000.0, "flops_unit": 1000.0},
      "child": {"epochs": 15, "batch_size": 64, "lr": 0.003,
                "finetune_lr": 0.03, "weight_decay": 0.0005,
                "decay_epochs": 3, "decay_factor": 0.1},
      "evaluator": {"kind": "child"}
    }

``paths.spec`` names an ``abcp-arch/1`` file (default: the reference
residual net sized to the data). ``paths.data`` names a dataset manifest
(default: the built-in shapes task generated from the data stream).
``evaluator.kind`` is ``child``, ``synthetic`` (with ``landscape``:
``optimum``, ``weights`` and optional ``base_loss``) or ``external``
(with ``command``: an argv list).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .child.model import ChildConfig
from .controller import RATIO_MODES, SEARCH_MODES, ControllerConfig
from .errors import InvalidArgument
from .rl import RewardConfig, SearchConfig

EVALUATOR_KINDS = ("child", "synthetic", "external")
SEED_STREAMS = ("controller", "evaluator", "pretrain", "retrain", "data")

# Desk-scale reward preset for the shapes task: the unpruned reference net
# pays about 1.5 loss units of FLOPs penalty.
SHAPES_LAMBDA = 1e4


@dataclass(frozen=True)
class Paths:
    out: str = "run"
    spec: str | None = None
    data: str | None = None


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 3000
    n_test: int = 600
    size: int = 32


@dataclass(frozen=True)
class RLConfig:
    episodes: int = 310
    lr: float = 1e-3
    baseline_decay: float = 0.9
    lam: float = SHAPES_LAMBDA
    flops_unit: float = 1e3


@dataclass(frozen=True)
class EvaluatorConfig:
    kind: str = "child"
    command: tuple[str, ...] = ()
    landscape: dict | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    data: DataConfig = field(default_factory=DataConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    child: ChildConfig = field(default_factory=lambda: ChildConfig(
        epochs=15, batch_size=64, lr=3e-3, finetune_lr=3e-2, decay_epochs=3))
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)

    def __post_init__(self):
        problems = config_violations(self)
        if problems:
            raise InvalidArgument("bad config: " + "; ".join(problems))

    def search_config(self) -> SearchConfig:
        return SearchConfig(episodes=self.rl.episodes, lr=self.rl.lr,
                            baseline_decay=self.rl.baseline_decay,
                            reward=RewardConfig(self.rl.lam, self.rl.flops_unit),
                            controller=self.controller)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["evaluator"]["command"] = list(self.evaluator.command)
        return doc

    @classmethod
    def from_dict(cls, doc: Any) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise InvalidArgument("config must be a JSON object")
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw: dict[str, Any] = {}
        if "seed" in doc:
            kw["seed"] = doc["seed"]
        for name, typ in (("paths", Paths), ("data", DataConfig), ("controller", ControllerConfig),
                          ("rl", RLConfig), ("child", ChildConfig),
                          ("evaluator", EvaluatorConfig)):
            if name in doc:
                kw[name] = _section(typ, getattr(base, name), doc[name], name)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _section(typ, default, doc, name):
    if not isinstance(doc, dict):
        raise InvalidArgument(f"config section {name!r} must be an object")
    known = {f.name for f in fields(typ)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidArgument(f"unknown keys in {name!r}: {sorted(unknown)}")
    merged = {**asdict(default), **doc}
    if typ is EvaluatorConfig:
        merged["command"] = tuple(merged["command"] or ())
    try:
        return typ(**merged)
    except (TypeError, ValueError) as exc:
        raise InvalidArgument(f"config section {name!r}: {exc}") from exc


def _is_int(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def config_violations(cfg: ExperimentConfig) -> list[str]:
    out = []
    if not _is_int(cfg.seed) or cfg.seed < 0:
        out.append("seed must be a non-negative integer")
    for name in ("n_train", "n_test", "size"):
        v = getattr(cfg.data, name)
        if not _is_int(v) or v <= 0:
            out.append(f"data.{name} must be a positive integer")
    c = cfg.controller
    for name in ("h_dim", "e_dim", "num_layers"):
        v = getattr(c, name)
        if not _is_int(v) or v <= 0:
            out.append(f"controller.{name} must be a positive integer")
    if c.ratio_mode not in RATIO_MODES:
        out.append(f"controller.ratio_mode must be one of {RATIO_MODES}")
    if c.search_mode not in SEARCH_MODES:
        out.append(f"controller.search_mode must be one of {SEARCH_MODES}")
    r = cfg.rl
    if not _is_int(r.episodes) or r.episodes <= 0:
        out.append("rl.episodes must be a positive integer")
    for name in ("lr", "lam", "flops_unit"):
        v = getattr(r, name)
        if not _is_num(v) or not v > 0:
            out.append(f"rl.{name} must be positive")
    if not _is_num(r.baseline_decay) or not 0 < r.baseline_decay < 1:
        out.append("rl.baseline_decay must lie in (0, 1)")
    ch = cfg.child
    for name in ("epochs", "batch_size", "decay_epochs"):
        if not _is_int(getattr(ch, name)):
            out.append(f"child.{name} must be an integer")
    e = cfg.evaluator
    if e.kind not in EVALUATOR_KINDS:
        out.append(f"evaluator.kind must be one of {EVALUATOR_KINDS}")
    if e.kind == "external" and not e.command:
        out.append("evaluator.command is required for an external evaluator")
    if e.kind == "synthetic" and not (isinstance(e.landscape, dict)
                                      and {"optimum", "weights"} <= set(e.landscape)):
        out.append("evaluator.landscape needs 'optimum' and 'weights'")
    return out


def split_seed(master: int) -> dict[str, int]:
    """Independent 32-bit seeds for each consumer of randomness.

    Stream ``i`` is ``SeedSequence(master).spawn(5)[i]`` in the order of
    ``SEED_STREAMS``, so changing how one stage draws numbers never shifts
    another stage.
    """
    children = np.random.SeedSequence(master).spawn(len(SEED_STREAMS))
    return {name: int(ss.generate_state(1)[0]) for name, ss in zip(SEED_STREAMS, children)}
