"""Evaluators turning a pruning action into ``(test loss, raw FLOPs)``.

``ChildEvaluator`` prunes a pre-trained child, fine-tunes its head and scores
it. ``Landscape`` is a closed-form stand-in for controller tests.
``ExternalEvaluator`` talks to any process speaking the line-delimited JSON
protocol implemented by ``serve``::

    request   {"action": [...], "seed": 123}
    response  {"loss": 0.42, "flops": 1234567}   or   {"error": "..."}
"""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from ..arch import (PRUNE, NetworkSpec, PruningAction, check_action, is_block_choice,
                    resolve_mask, total_flops)
from ..errors import EvaluatorFailure, InvalidArgument
from .data import Dataset
from .model import ChildConfig, ChildModel, bn_gammas, fine_tune, mask_model, test_loss


class ChildEvaluator:
    """Scores actions against a fixed pre-trained parent model."""

    def __init__(self, model: ChildModel, data: Dataset, cfg: ChildConfig):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.spec = model.spec
        self._gammas = [g.copy() for g in bn_gammas(model)]

    def mask_for(self, action: PruningAction):
        return resolve_mask(self.spec, action, self._gammas)

    def evaluate(self, action: PruningAction, seed: int) -> tuple[float, int]:
        mask = self.mask_for(action)
        pruned = mask_model(self.model, mask)
        tuned = fine_tune(pruned, mask, self.data, self.cfg, np.random.default_rng(seed))
        return test_loss(tuned, self.data), total_flops(self.spec, mask)


def action_coords(action: PruningAction) -> np.ndarray:
    """Numeric view of an action: pruned block = 1, kept-block choice = 0."""
    return np.array([float(x) if not is_block_choice(x) else (1.0 if x == PRUNE else 0.0)
                     for x in action], dtype=np.float64)


@dataclass(frozen=True)
class Landscape:
    """Pseudo-loss ``base_loss + sum_i w_i (x_i - x*_i)^2`` around a designated optimum."""
    spec: NetworkSpec
    optimum: PruningAction
    weights: tuple[float, ...]
    base_loss: float = 1.0

    def __post_init__(self):
        check_action(self.spec, self.optimum)
        if len(self.weights) != self.spec.T:
            raise InvalidArgument("one landscape weight per layer required")

    def pseudo_loss(self, action: PruningAction) -> float:
        d = action_coords(action) - action_coords(self.optimum)
        return float(self.base_loss + np.dot(self.weights, d * d))

    def flops(self, action: PruningAction) -> int:
        ones = [np.ones(l.out_ch) for l in self.spec.layers]
        return total_flops(self.spec, resolve_mask(self.spec, action, ones))

    def evaluate(self, action: PruningAction, seed: int = 0) -> tuple[float, int]:
        return self.pseudo_loss(action), self.flops(action)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "optimum": self.optimum.to_list(),
                "weights": list(self.weights), "base_loss": self.base_loss}

    @classmethod
    def from_dict(cls, doc) -> "Landscape":
        return cls(NetworkSpec.from_dict(doc["spec"]), PruningAction(doc["optimum"]),
                   tuple(float(w) for w in doc["weights"]), float(doc.get("base_loss", 1.0)))


def synthetic_eval(action: PruningAction, landscape: Landscape) -> tuple[float, int]:
    return landscape.evaluate(action)


class ExternalEvaluator:
    """Client side of the line-JSON protocol over a child process' stdio."""

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE, text=True, bufsize=1)

    def evaluate(self, action: PruningAction, seed: int) -> tuple[float, int]:
        request = json.dumps({"action": action.to_list(), "seed": int(seed)})
        try:
            self.proc.stdin.write(request + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise EvaluatorFailure(f"evaluator process died: {exc}") from exc
        if not line:
            raise EvaluatorFailure(f"evaluator process closed (exit {self.proc.poll()})")
        reply = json.loads(line)
        if "error" in reply:
            raise EvaluatorFailure(reply["error"])
        return float(reply["loss"]), int(reply["flops"])

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(evaluator, instream: IO[str], outstream: IO[str]) -> int:
    """Answer protocol requests until end of input; returns the count served."""
    served = 0
    for line in instream:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            loss, flops = evaluator.evaluate(PruningAction(req["action"]), int(req.get("seed", 0)))
            reply = {"loss": float(loss), "flops": int(flops)}
        except Exception as exc:  # reported to the client, never fatal for the server
            reply = {"error": f"{type(exc).__name__}: {exc}"}
        outstream.write(json.dumps(reply) + "\n")
        outstream.flush()
        served += 1
    return served
