"""Recurrent sampling controller for joint block/channel pruning actions.

A stacked LSTM is unrolled over the prunable layers of a network. Each
executed cell feeds its top hidden state to per-cell heads:

* a 2-way softmax head deciding whether a residual block is pruned,
* a ratio head, either a Gaussian (mean, log-variance) over ``[0, 0.9]`` or
  a 5-way softmax over a fixed ratio grid.

The element chosen at cell ``i`` is embedded and fed to cell ``i + 1``. When
a block is pruned its second cell is skipped: the recurrent state passes
through unchanged and the pruning choice is embedded into the following cell.

Parameters live in a flat ``name -> ndarray`` dict so that gradients, the
optimizer and checkpoints can treat them uniformly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from .arch import (BLOCK_FIRST, BLOCK_SECOND, KEEP, MAX_RATIO, PRUNE, NetworkSpec,
                   PruningAction, check_network, is_block_choice)
from .errors import InvalidArgument, NumericalFault

DISCRETE_RATIOS = (0.0, 0.225, 0.45, 0.675, 0.9)
N_RATIO_BINS = 10
RATIO_MODES = ("continuous", "discrete")
SEARCH_MODES = ("joint", "block-only", "channel-only")

BLOCK = "block"
RATIO_CONT = "ratio-continuous"
RATIO_DISC = "ratio-discrete"

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ControllerConfig:
    h_dim: int = 64
    e_dim: int = 64
    num_layers: int = 2
    ratio_mode: str = "continuous"
    search_mode: str = "joint"
    init_range: float = 0.1
    rho_min: float = -10.0
    rho_max: float = 2.0

    def __post_init__(self):
        if self.h_dim < 1 or self.e_dim < 1 or self.num_layers < 1:
            raise InvalidArgument("h_dim, e_dim and num_layers must be >= 1")
        if self.ratio_mode not in RATIO_MODES:
            raise InvalidArgument(f"ratio_mode must be one of {RATIO_MODES}")
        if self.search_mode not in SEARCH_MODES:
            raise InvalidArgument(f"search_mode must be one of {SEARCH_MODES}")
        if not self.rho_min < self.rho_max:
            raise InvalidArgument("rho_min must be below rho_max")


@dataclass
class ControllerParams:
    config: ControllerConfig
    T: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ControllerParams":
        return ControllerParams(self.config, self.T,
                                {k: v.copy() for k, v in self.arrays.items()})

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ControllerParams":
        return ControllerParams(self.config, self.T, dict(arrays))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "T": self.T,
            "arrays": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
                       for k, v in self.arrays.items()},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ControllerParams":
        cfg = ControllerConfig(**doc["config"])
        arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["arrays"].items()}
        return cls(cfg, int(doc["T"]), arrays)


def _layout(spec: NetworkSpec, cfg: ControllerConfig) -> dict[str, tuple[int, ...]]:
    h, e = cfg.h_dim, cfg.e_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for k in range(cfg.num_layers):
        n_in = e if k == 0 else h
        shapes[f"lstm.{k}.W"] = (4 * h, n_in + h)
        shapes[f"lstm.{k}.b"] = (4 * h,)
    shapes["embed_block"] = (2, e)
    shapes["embed_ratio"] = (N_RATIO_BINS, e)
    shapes["start_embed"] = (e,)
    for i, layer in enumerate(spec.layers):
        if layer.kind == BLOCK_FIRST:
            shapes[f"block.{i}.W"] = (2, h)
            shapes[f"block.{i}.b"] = (2,)
    for i in range(spec.T):
        if cfg.ratio_mode == "continuous":
            shapes[f"mu.{i}.W"] = (1, h)
            shapes[f"mu.{i}.b"] = (1,)
            shapes[f"rho.{i}.W"] = (1, h)
            shapes[f"rho.{i}.b"] = (1,)
        else:
            shapes[f"ratio.{i}.W"] = (len(DISCRETE_RATIOS), h)
            shapes[f"ratio.{i}.b"] = (len(DISCRETE_RATIOS),)
    return shapes


def init_params(spec: NetworkSpec, config: ControllerConfig,
                rng: np.random.Generator) -> ControllerParams:
    """Draw every weight i.i.d. from ``U[-init_range, init_range]``."""
    r = config.init_range
    arrays = {name: rng.uniform(-r, r, size=shape)
              for name, shape in _layout(spec, config).items()}
    return ControllerParams(config, spec.T, arrays)


# --- distributions ----------------------------------------------------------

class Draw(NamedTuple):
    value: int | float
    logp: float
    raw: float
    dist: tuple[float, ...]


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _finite(z, what):
    if not np.all(np.isfinite(z)):
        raise NumericalFault(f"non-finite {what} head output: {z}")


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def _head(h, head):
    W, b = head
    return W @ h + b


def sample_block_choice(h: np.ndarray, head, rng: np.random.Generator) -> Draw:
    """Sample ``0`` (keep) or ``1`` (prune); logit index equals the choice."""
    z = _head(h, head)
    _finite(z, "block")
    p = softmax(z)
    k = _categorical(p, rng)
    return Draw(k, float(np.log(p[k])), float(k), tuple(p.tolist()))


def sample_ratio_discrete(h: np.ndarray, head, rng: np.random.Generator) -> Draw:
    z = _head(h, head)
    _finite(z, "ratio")
    p = softmax(z)
    k = _categorical(p, rng)
    return Draw(DISCRETE_RATIOS[k], float(np.log(p[k])), float(k), tuple(p.tolist()))


def gaussian_logpdf(x: float, mu: float, rho: float) -> float:
    """log N(x; mu, exp(rho))."""
    return -0.5 * (_LOG_2PI + rho + (x - mu) ** 2 / math.exp(rho))


def _gauss_params(h, heads, rho_bounds):
    mu = float(_head(h, heads[0])[0])
    rho = float(_head(h, heads[1])[0])
    _finite([mu, rho], "ratio")
    return mu, min(max(rho, rho_bounds[0]), rho_bounds[1])


def sample_ratio_continuous(h: np.ndarray, heads, rng: np.random.Generator,
                            rho_bounds: tuple[float, float] = (-10.0, 2.0)) -> Draw:
    """Gaussian draw clipped to ``[0, 0.9]``; log-density taken at the raw draw."""
    mu, rho = _gauss_params(h, heads, rho_bounds)
    x = mu + math.exp(0.5 * rho) * float(rng.standard_normal())
    value = min(max(x, 0.0), MAX_RATIO)
    return Draw(value, gaussian_logpdf(x, mu, rho), x, (mu, rho))


def ratio_bin(ratio: float) -> int:
    """0.1-wide bin of a ratio; 0.9 shares the last bin."""
    return min(int(math.floor(ratio * N_RATIO_BINS + 1e-9)), N_RATIO_BINS - 1)


def embed_index(element) -> tuple[str, int]:
    if is_block_choice(element):
        return "embed_block", int(element)
    return "embed_ratio", ratio_bin(float(element))


def embed_action(element, tables: Mapping[str, np.ndarray]) -> np.ndarray:
    table, row = embed_index(element)
    return tables[table][row]


# --- recurrent core -----------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(arrays: Mapping[str, np.ndarray], n_layers: int, e: np.ndarray,
              c: tuple, h: tuple):
    """One step of the stacked LSTM; returns new (c, h) and per-layer caches."""
    x = e
    new_c, new_h, caches = [], [], []
    for k in range(n_layers):
        W, b = arrays[f"lstm.{k}.W"], arrays[f"lstm.{k}.b"]
        xh = np.concatenate([x, h[k]])
        z = W @ xh + b
        n = h[k].shape[0]
        i, f, o = _sigmoid(z[:n]), _sigmoid(z[n:2 * n]), _sigmoid(z[2 * n:3 * n])
        g = np.tanh(z[3 * n:])
        ck = f * c[k] + i * g
        tc = np.tanh(ck)
        hk = o * tc
        caches.append((xh, i, f, o, g, c[k], tc))
        new_c.append(ck)
        new_h.append(hk)
        x = hk
    return tuple(new_c), tuple(new_h), caches


# --- rollouts ---------------------------------------------------------------

@dataclass(frozen=True)
class CellRecord:
    cell: int
    embed: tuple[str, int]
    e: np.ndarray
    c: tuple
    h: tuple


@dataclass(frozen=True)
class Step:
    cell: int
    kind: str
    dist: tuple[float, ...]
    raw: float
    element: int | float
    logp: float


@dataclass(frozen=True)
class SampleTrace:
    cells: tuple[CellRecord, ...]
    steps: tuple[Step, ...]

    @property
    def log_prob(self) -> float:
        return math.fsum(s.logp for s in self.steps)


Chooser = Callable[[str, int, np.ndarray], Step]


def _rollout(params: ControllerParams, spec: NetworkSpec, choose: Chooser):
    cfg = params.config
    if spec.T != params.T:
        raise InvalidArgument(f"controller built for T={params.T}, network has T={spec.T}")
    arrays = params.arrays
    L, hd = cfg.num_layers, cfg.h_dim
    c = tuple(np.zeros(hd) for _ in range(L))
    h = tuple(np.zeros(hd) for _ in range(L))
    blocks_on = cfg.search_mode != "channel-only"
    ratios_on = cfg.search_mode != "block-only"
    ratio_kind = RATIO_CONT if cfg.ratio_mode == "continuous" else RATIO_DISC

    elements: list = []
    cells, steps = [], []
    for i, layer in enumerate(spec.layers):
        if i == 0:
            emb = ("start_embed", 0)
            e = arrays["start_embed"]
        else:
            emb = embed_index(elements[i - 1])
            e = arrays[emb[0]][emb[1]]
        if blocks_on and layer.kind == BLOCK_SECOND and elements[i - 1] == PRUNE \
                and is_block_choice(elements[i - 1]):
            # skipped cell: state passes through, the choice is mirrored
            elements.append(PRUNE)
            continue
        cells.append(CellRecord(i, emb, e, c, h))
        c, h, _ = lstm_step(arrays, L, e, c, h)
        top = h[-1]
        if blocks_on and layer.kind == BLOCK_FIRST:
            step = choose(BLOCK, i, top)
            steps.append(step)
            if step.element == PRUNE:
                elements.append(PRUNE)
                continue
            if not ratios_on:
                elements.append(KEEP)
                continue
        elif not ratios_on:
            elements.append(KEEP if layer.kind == BLOCK_SECOND else 0.0)
            continue
        step = choose(ratio_kind, i, top)
        steps.append(step)
        elements.append(step.element)
    return PruningAction(elements), SampleTrace(tuple(cells), tuple(steps))


def _heads(arrays, kind, cell):
    if kind == BLOCK:
        return (arrays[f"block.{cell}.W"], arrays[f"block.{cell}.b"])
    if kind == RATIO_DISC:
        return (arrays[f"ratio.{cell}.W"], arrays[f"ratio.{cell}.b"])
    return ((arrays[f"mu.{cell}.W"], arrays[f"mu.{cell}.b"]),
            (arrays[f"rho.{cell}.W"], arrays[f"rho.{cell}.b"]))


def sample_action(params: ControllerParams, spec: NetworkSpec,
                  rng: np.random.Generator) -> tuple[PruningAction, SampleTrace]:
    """Roll the controller over ``spec`` and sample a full pruning action."""
    check_network(spec)
    arrays = params.arrays
    bounds = (params.config.rho_min, params.config.rho_max)

    def choose(kind, cell, h):
        heads = _heads(arrays, kind, cell)
        if kind == BLOCK:
            d = sample_block_choice(h, heads, rng)
        elif kind == RATIO_DISC:
            d = sample_ratio_discrete(h, heads, rng)
        else:
            d = sample_ratio_continuous(h, heads, rng, bounds)
        return Step(cell, kind, d.dist, d.raw, d.value, d.logp)

    return _rollout(params, spec, choose)


def _discrete_index(value: float) -> int:
    for k, r in enumerate(DISCRETE_RATIOS):
        if abs(r - value) < 1e-12:
            return k
    raise InvalidArgument(f"ratio {value} is not on the discrete grid {DISCRETE_RATIOS}")


def _scored_step(arrays, bounds, kind, cell, h, raw) -> Step:
    heads = _heads(arrays, kind, cell)
    if kind == RATIO_CONT:
        mu, rho = _gauss_params(h, heads, bounds)
        value = min(max(raw, 0.0), MAX_RATIO)
        return Step(cell, kind, (mu, rho), raw, value, gaussian_logpdf(raw, mu, rho))
    z = _head(h, heads)
    _finite(z, kind)
    p = softmax(z)
    k = int(raw)
    value = k if kind == BLOCK else DISCRETE_RATIOS[k]
    return Step(cell, kind, tuple(p.tolist()), float(k), value, float(np.log(p[k])))


def score_action(params: ControllerParams, spec: NetworkSpec, action: PruningAction) -> float:
    """log pi(action) by re-running the controller with the decisions forced.

    Continuous ratios are scored at the stored value, which equals the raw
    draw unless the draw was clipped.
    """
    arrays = params.arrays
    bounds = (params.config.rho_min, params.config.rho_max)

    def choose(kind, cell, h):
        x = action[cell]
        if kind == BLOCK:
            raw = 1 if action.block_pruned(cell) else 0
        elif kind == RATIO_DISC:
            raw = _discrete_index(action.ratio(cell))
        else:
            raw = action.ratio(cell)
        return _scored_step(arrays, bounds, kind, cell, h, raw)

    replayed, trace = _rollout(params, spec, choose)
    if replayed.elements != action.elements:
        raise InvalidArgument("action is not reachable by this controller")
    return trace.log_prob


def replay_log_prob(params: ControllerParams, trace: SampleTrace) -> float:
    """Summed log-probability of the trace's decisions under ``params``."""
    return _replay(params, trace)[0]


def _replay(params: ControllerParams, trace: SampleTrace):
    cfg = params.config
    arrays = params.arrays
    bounds = (cfg.rho_min, cfg.rho_max)
    by_cell: dict[int, list[Step]] = {}
    for s in trace.steps:
        by_cell.setdefault(s.cell, []).append(s)
    L, hd = cfg.num_layers, cfg.h_dim
    c = tuple(np.zeros(hd) for _ in range(L))
    h = tuple(np.zeros(hd) for _ in range(L))
    total = []
    tape = []
    try:
        for rec in trace.cells:
            table, row = rec.embed
            e = arrays[table] if table == "start_embed" else arrays[table][row]
            c, h, caches = lstm_step(arrays, L, e, c, h)
            scored = [_scored_step(arrays, bounds, s.kind, s.cell, h[-1], s.raw)
                      for s in by_cell.get(rec.cell, [])]
            total.extend(s.logp for s in scored)
            tape.append((rec, caches, h[-1], scored))
    except KeyError as exc:
        raise InvalidArgument(f"trace references unknown parameter {exc}") from exc
    return math.fsum(total), tape


def grad_log_prob(params: ControllerParams, trace: SampleTrace) -> dict[str, np.ndarray]:
    """Exact gradient of the trace's summed log-probability w.r.t. every parameter."""
    cfg = params.config
    arrays = params.arrays
    logp, tape = _replay(params, trace)
    if not math.isclose(logp, trace.log_prob, rel_tol=1e-9, abs_tol=1e-9):
        raise InvalidArgument("trace was not produced under these parameters")
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    L, hd = cfg.num_layers, cfg.h_dim
    dh_next = [np.zeros(hd) for _ in range(L)]
    dc_next = [np.zeros(hd) for _ in range(L)]

    for rec, caches, top, scored in reversed(tape):
        dtop = np.zeros(hd)
        for s in scored:
            dtop += _head_backward(arrays, grads, s, top, cfg)
        dx_above = dtop
        for k in reversed(range(L)):
            xh, i, f, o, g, c_prev, tc = caches[k]
            dh = dh_next[k] + dx_above
            dc = dc_next[k] + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ])
            W = arrays[f"lstm.{k}.W"]
            grads[f"lstm.{k}.W"] += np.outer(dz, xh)
            grads[f"lstm.{k}.b"] += dz
            dxh = W.T @ dz
            n_in = xh.shape[0] - hd
            dx_above = dxh[:n_in]
            dh_next[k] = dxh[n_in:]
            dc_next[k] = dc * f
        table, row = rec.embed
        if table == "start_embed":
            grads[table] += dx_above
        else:
            grads[table][row] += dx_above
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFault(f"non-finite gradient for {k}")
    return grads


def _head_backward(arrays, grads, s: Step, h, cfg) -> np.ndarray:
    if s.kind == RATIO_CONT:
        mu, rho = s.dist
        x = s.raw
        var = math.exp(rho)
        dmu = (x - mu) / var
        drho = -0.5 + 0.5 * (x - mu) ** 2 / var
        rho_raw = float(_head(h, (arrays[f"rho.{s.cell}.W"], arrays[f"rho.{s.cell}.b"]))[0])
        if not cfg.rho_min < rho_raw < cfg.rho_max:
            drho = 0.0  # clamped
        dh = np.zeros_like(h)
        for name, d in ((f"mu.{s.cell}", dmu), (f"rho.{s.cell}", drho)):
            grads[name + ".W"][0] += d * h
            grads[name + ".b"][0] += d
            dh += d * arrays[name + ".W"][0]
        return dh
    name = f"block.{s.cell}" if s.kind == BLOCK else f"ratio.{s.cell}"
    dz = -np.asarray(s.dist)
    dz[int(s.raw)] += 1.0
    grads[name + ".W"] += np.outer(dz, h)
    grads[name + ".b"] += dz
    return arrays[name + ".W"].T @ dz
