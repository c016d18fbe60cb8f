"""Adam over dicts of numpy arrays.

The update is written out by hand so the same code drives both the
controller (functional, copy-on-write) and the child network (in place).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})

    def to_dict(self) -> dict:
        def pack(d):
            return {k: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
                    for k, a in d.items()}
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "m": pack(self.m), "v": pack(self.v)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AdamState":
        def unpack(d):
            return {k: np.asarray(a["data"], dtype=np.float64).reshape(a["shape"])
                    for k, a in d.items()}
        return cls(doc["lr"], doc["beta1"], doc["beta2"], doc["eps"], int(doc["t"]),
                   unpack(doc["m"]), unpack(doc["v"]))


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, inplace: bool = False):
    """One descent step. Returns ``(params, state)``; copies unless ``inplace``."""
    if not inplace:
        state = state.copy()
        params = {k: p.copy() for k, p in params.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[k]
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
