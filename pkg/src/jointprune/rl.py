"""Reward, moving-average baseline, REINFORCE updates and the search loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Protocol, Sequence

import numpy as np

from .arch import NetworkSpec, PruningAction, check_network, enforce_group_constraint
from .controller import (ControllerConfig, ControllerParams, SampleTrace, grad_log_prob,
                         init_params, sample_action)
from .errors import EvaluatorFailure, InvalidArgument, NumericalFault, VersionMismatch
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

CTRL_SCHEMA = "abcp-ctrl/1"


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 1e6
    flops_unit: float = 1e3

    def __post_init__(self):
        if not (self.lam > 0 and self.flops_unit > 0):
            raise InvalidArgument("lambda and flops_unit must be positive")


def reward(L_test: float, F: float, cfg: RewardConfig) -> float:
    """``-L_test - (F / flops_unit) / lambda``."""
    if not math.isfinite(L_test):
        raise NumericalFault(f"non-finite test loss {L_test}")
    if F < 0:
        raise InvalidArgument(f"negative FLOPs {F}")
    return -L_test - (F / cfg.flops_unit) / cfg.lam


@dataclass(frozen=True)
class BaselineState:
    b: float = 0.0
    decay: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise InvalidArgument("baseline decay must lie in [0, 1)")


def update_baseline(state: BaselineState, R: float) -> BaselineState:
    if not state.initialized:
        return BaselineState(R, state.decay, True)
    return BaselineState(state.decay * state.b + (1.0 - state.decay) * R, state.decay, True)


def reinforce_step(params: ControllerParams, trace: SampleTrace, R: float,
                   baseline: BaselineState, adam: AdamState):
    """Single-sample policy-gradient ascent step, ``grad log pi * (R - b)``.

    An uninitialised baseline counts as ``b = R``. A zero advantage leaves
    both the parameters and the optimizer state untouched.
    """
    b = baseline.b if baseline.initialized else R
    advantage = R - b
    if advantage == 0.0:
        return params, adam
    g = grad_log_prob(params, trace)
    # optimizer minimizes; ascend J by descending on the negated estimate
    neg = {k: -advantage * v for k, v in g.items()}
    if not all(np.all(np.isfinite(v)) for v in neg.values()):
        raise NumericalFault("non-finite policy gradient")
    arrays, adam = adam_step(params.arrays, neg, adam)
    return params.replace(arrays), adam


# --- episode log --------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    action: list
    loss: float | None
    flops: int | None
    reward: float | None
    baseline: float | None
    seed: int
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        return cls(**json.loads(line))


def read_log(path: str | Path) -> list[EpisodeRecord]:
    with open(path) as fh:
        return [EpisodeRecord.from_json(line) for line in fh if line.strip()]


def best_record(records: Sequence[EpisodeRecord]) -> EpisodeRecord:
    scored = [r for r in records if r.reward is not None]
    if not scored:
        raise InvalidArgument("no scored episodes in log")
    best = scored[0]
    for r in scored[1:]:
        if r.reward > best.reward:
            best = r
    return best


def best_action(records: Sequence[EpisodeRecord]) -> PruningAction:
    """Action of the highest-reward episode; the earliest wins ties."""
    return PruningAction(best_record(records).action)


# --- search loop --------------------------------------------------------------

class Evaluator(Protocol):
    def evaluate(self, action: PruningAction, seed: int) -> tuple[float, int]:
        """Return ``(test loss, raw FLOPs)`` for an already-constrained action."""


@dataclass(frozen=True)
class SearchConfig:
    episodes: int = 310
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    baseline_decay: float = 0.9
    checkpoint_every: int = 10
    reward: RewardConfig = field(default_factory=RewardConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)


def episode_seed(eval_seed: int, episode: int) -> int:
    """Evaluator seed of one episode, independent of the controller stream."""
    return int(np.random.SeedSequence([eval_seed, episode]).generate_state(1)[0])


@dataclass
class SearchState:
    params: ControllerParams
    adam: AdamState
    baseline: BaselineState
    rng: np.random.Generator
    seed: int
    eval_seed: int
    episode: int = 0
    best_reward: float | None = None
    best_episode: int | None = None

    @classmethod
    def fresh(cls, spec: NetworkSpec, cfg: SearchConfig, seed: int,
              eval_seed: int | None = None) -> "SearchState":
        rng = np.random.default_rng(seed)
        params = init_params(spec, cfg.controller, rng)
        adam = AdamState.zeros_like(params.arrays, lr=cfg.lr, beta1=cfg.beta1,
                                    beta2=cfg.beta2, eps=cfg.eps)
        return cls(params, adam, BaselineState(decay=cfg.baseline_decay), rng, seed,
                   seed if eval_seed is None else eval_seed)

    def to_dict(self) -> dict:
        return {
            "schema": CTRL_SCHEMA,
            "seed": self.seed,
            "eval_seed": self.eval_seed,
            "episode": self.episode,
            "rng_state": self.rng.bit_generator.state,
            "params": self.params.to_dict(),
            "adam": self.adam.to_dict(),
            "baseline": asdict(self.baseline),
            "best": {"reward": self.best_reward, "episode": self.best_episode},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchState":
        if doc.get("schema") != CTRL_SCHEMA:
            raise VersionMismatch(
                f"expected controller checkpoint {CTRL_SCHEMA!r}, got {doc.get('schema')!r}")
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng_state"]
        return cls(ControllerParams.from_dict(doc["params"]),
                   AdamState.from_dict(doc["adam"]),
                   BaselineState(**doc["baseline"]), rng, doc["seed"], doc["eval_seed"],
                   doc["episode"], doc["best"]["reward"], doc["best"]["episode"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def loads(cls, text: str) -> "SearchState":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise VersionMismatch(f"not a controller checkpoint: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "SearchState":
        return cls.loads(Path(path).read_text())


class SearchAborted(RuntimeError):
    def __init__(self, msg: str, records: list[EpisodeRecord]):
        super().__init__(msg)
        self.records = records


def run_search(spec: NetworkSpec, evaluator: Evaluator, cfg: SearchConfig,
               state: SearchState, *, log_file: IO[str] | None = None,
               checkpoint_dir: str | Path | None = None) -> list[EpisodeRecord]:
    """Run episodes ``state.episode .. cfg.episodes - 1``; ``state`` is advanced in place.

    Each episode samples an action, applies the group constraint, scores it
    with ``evaluator``, converts the result to a reward and takes one policy
    gradient step. Records are written to ``log_file`` as they complete.
    """
    check_network(spec)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    records: list[EpisodeRecord] = []

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(rec.to_json() + "\n")
            log_file.flush()

    for ep in range(state.episode, cfg.episodes):
        action, trace = sample_action(state.params, spec, state.rng)
        action = enforce_group_constraint(spec, action)
        seed = episode_seed(state.eval_seed, ep)
        try:
            loss, flops = evaluator.evaluate(action, seed)
            loss, flops = float(loss), int(flops)
            R = reward(loss, flops, cfg.reward)
        except Exception as exc:
            emit(EpisodeRecord(ep, action.to_list(), None, None, None, None, seed, "failed"))
            raise SearchAborted(f"episode {ep}: evaluation failed: {exc}", records) from exc
        b = state.baseline.b if state.baseline.initialized else R
        status = "ok"
        try:
            state.params, state.adam = reinforce_step(state.params, trace, R,
                                                      state.baseline, state.adam)
        except NumericalFault as exc:
            log.warning("episode %d discarded: %s", ep, exc)
            status = "discarded"
        state.baseline = update_baseline(state.baseline, R)
        state.episode = ep + 1
        emit(EpisodeRecord(ep, action.to_list(), loss, flops, R, b, seed, status))
        log.debug("episode %d  R=%.5f  loss=%.4f  flops=%d", ep, R, loss, flops)

        new_best = state.best_reward is None or R > state.best_reward
        if new_best:
            state.best_reward, state.best_episode = R, ep
        if ckpt is not None:
            if new_best:
                state.save(ckpt / "ctrl_best.json")
            if cfg.checkpoint_every and state.episode % cfg.checkpoint_every == 0:
                state.save(ckpt / f"ctrl_ep{state.episode:04d}.json")
    return records
