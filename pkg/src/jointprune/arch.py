"""Architecture description of residual CNNs, FLOPs accounting and mask resolution.

A network is an ordered list of convolutional layers. Every layer is one of
four kinds:

* ``Ordinary``     plain conv layer on the main stream
* ``GroupFirst``   entry conv of a residual group (usually strided)
* ``BlockFirst``   first conv of a residual block
* ``BlockSecond``  second conv of a residual block, output added to the block input

Residual blocks always come in ``BlockFirst``/``BlockSecond`` pairs. A maximal
run of consecutive blocks is preceded by an *entry* layer (``GroupFirst`` or
``Ordinary``); the entry layer and the second layer of every kept block in the
run are coupled through the shortcut additions and must keep the same number
of channels.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument, VersionMismatch

ORDINARY = "Ordinary"
GROUP_FIRST = "GroupFirst"
BLOCK_FIRST = "BlockFirst"
BLOCK_SECOND = "BlockSecond"
KINDS = (ORDINARY, GROUP_FIRST, BLOCK_FIRST, BLOCK_SECOND)
BLOCK_KINDS = (BLOCK_FIRST, BLOCK_SECOND)

ARCH_SCHEMA = "abcp-arch/1"
MAX_RATIO = 0.9
PRUNE = 1
KEEP = 0

# guards floor(r * C) against products such as 0.57 * 100 = 56.99999999999999
_FLOOR_EPS = 1e-9

PARAM_KEYS = ("weight", "gamma", "beta")


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    kernel: int
    in_ch: int
    out_ch: int
    in_h: int
    in_w: int
    stride: int = 1
    block_id: int | None = None
    group_id: int | None = None

    @property
    def out_h(self) -> int:
        # "same" padding of kernel // 2
        return (self.in_h - 1) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w - 1) // self.stride + 1

    @property
    def is_block(self) -> bool:
        return self.kind in BLOCK_KINDS


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    s_frb: frozenset[int]
    head_ids: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def build(cls, layers: Iterable[LayerSpec], head_ids: Iterable[int] = ()) -> "NetworkSpec":
        """Create a spec whose ``s_frb`` is derived from the layer kinds."""
        layers = tuple(layers)
        s_frb = frozenset(l.id for l in layers if l.kind == BLOCK_FIRST)
        return cls(layers, s_frb, frozenset(head_ids))

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def T(self) -> int:
        return len(self.layers)

    @property
    def input_channels(self) -> int:
        return self.layers[0].in_ch

    @property
    def output_channels(self) -> int:
        return self.layers[-1].out_ch

    def to_dict(self) -> dict:
        return {
            "schema": ARCH_SCHEMA,
            "layers": [asdict(l) for l in self.layers],
            "s_frb": sorted(self.s_frb),
            "head_ids": sorted(self.head_ids),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NetworkSpec":
        if doc.get("schema") != ARCH_SCHEMA:
            raise VersionMismatch(
                f"expected schema {ARCH_SCHEMA!r}, got {doc.get('schema')!r}")
        try:
            layers = tuple(LayerSpec(**l) for l in doc["layers"])
            return cls(layers, frozenset(doc["s_frb"]), frozenset(doc.get("head_ids", ())))
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed network document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def residual_net(in_ch: int, size: int | tuple[int, int],
                 stem: Sequence[tuple[int, int, int]],
                 groups: Sequence[tuple[int, int, int, int, int]],
                 head_ids: Iterable[int] = ()) -> NetworkSpec:
    """Assemble a spec from a compact description.

    ``stem`` holds ``(kernel, out_ch, stride)`` ordinary layers. Each group is
    ``(entry_kernel, width, stride, n_blocks, bottleneck)``; blocks are a 1x1
    bottleneck conv followed by a 3x3 conv back to ``width``.
    """
    h, w = (size, size) if isinstance(size, int) else size
    layers: list[LayerSpec] = []
    ch = in_ch

    def add(kind, kernel, out, stride=1, block=None, group=None):
        nonlocal ch, h, w
        layer = LayerSpec(len(layers), kind, kernel, ch, out, h, w, stride, block, group)
        layers.append(layer)
        ch, h, w = out, layer.out_h, layer.out_w

    for kernel, out, stride in stem:
        add(ORDINARY, kernel, out, stride)
    block = 0
    for g, (kernel, width, stride, n_blocks, bottleneck) in enumerate(groups):
        add(GROUP_FIRST, kernel, width, stride, group=g)
        for _ in range(n_blocks):
            add(BLOCK_FIRST, 1, bottleneck, block=block, group=g)
            add(BLOCK_SECOND, 3, width, block=block, group=g)
            block += 1
    return NetworkSpec.build(layers, head_ids)


def reference_spec(in_ch: int = 1, size: int = 32) -> NetworkSpec:
    """The 11-layer reference child: a 1x1/3x3 block shape at toy scale."""
    return residual_net(in_ch, size, stem=[(3, 16, 1)],
                        groups=[(3, 32, 2, 2, 16), (3, 64, 2, 2, 32)])


def residual_runs(spec: NetworkSpec) -> list[tuple[int | None, list[tuple[int, int]]]]:
    """Maximal runs of consecutive blocks as ``(entry_id, [(first, second), ...])``.

    ``entry_id`` is the layer feeding the run, or None when the run starts the
    network.
    """
    runs: list[tuple[int | None, list[tuple[int, int]]]] = []
    layers = spec.layers
    i = 0
    while i < len(layers):
        if layers[i].kind == BLOCK_FIRST:
            entry = i - 1 if i > 0 else None
            pairs = []
            while i + 1 < len(layers) and layers[i].kind == BLOCK_FIRST \
                    and layers[i + 1].kind == BLOCK_SECOND:
                pairs.append((i, i + 1))
                i += 2
            runs.append((entry, pairs))
            if not pairs:
                i += 1
        else:
            i += 1
    return runs


def validate_network(spec: NetworkSpec) -> list[str]:
    """Return every invariant violation found in ``spec``; empty means valid."""
    v: list[str] = []
    layers = spec.layers
    if not layers:
        return ["empty network"]
    seen_blocks: dict[int, int] = {}
    for j, l in enumerate(layers):
        if l.id != j:
            v.append(f"layer {j}: id {l.id} out of order")
        if l.kind not in KINDS:
            v.append(f"layer {j}: unknown kind {l.kind!r}")
            continue
        if min(l.kernel, l.in_ch, l.out_ch, l.in_h, l.in_w, l.stride) < 1:
            v.append(f"layer {j}: non-positive dimension")
        if l.kernel % 2 == 0:
            v.append(f"layer {j}: even kernel {l.kernel}")
        if l.is_block:
            if l.block_id is None:
                v.append(f"layer {j}: block layer without block_id")
            if l.stride != 1:
                v.append(f"layer {j}: strided block layer")
        elif l.block_id is not None:
            v.append(f"layer {j}: block_id on non-block layer")
        if l.kind == GROUP_FIRST and l.group_id is None:
            v.append(f"layer {j}: GroupFirst without group_id")
        if l.kind == BLOCK_FIRST:
            if l.block_id in seen_blocks:
                v.append(f"layer {j}: block_id {l.block_id} reused")
            seen_blocks[l.block_id] = j
            nxt = layers[j + 1] if j + 1 < len(layers) else None
            if nxt is None or nxt.kind != BLOCK_SECOND or nxt.block_id != l.block_id:
                v.append(f"layer {j}: BlockFirst not followed by its BlockSecond")
            elif nxt.out_ch != l.in_ch:
                v.append(f"layer {j + 1}: residual shape mismatch "
                         f"({nxt.out_ch} != block input {l.in_ch})")
            if j == 0:
                v.append(f"layer {j}: block without entry layer")
        if l.kind == BLOCK_SECOND:
            prev = layers[j - 1] if j > 0 else None
            if prev is None or prev.kind != BLOCK_FIRST or prev.block_id != l.block_id:
                v.append(f"layer {j}: BlockSecond without its BlockFirst")
        if j > 0:
            p = layers[j - 1]
            if l.in_ch != p.out_ch:
                v.append(f"layer {j}: channel flow mismatch ({l.in_ch} != {p.out_ch})")
            if (l.in_h, l.in_w) != (p.out_h, p.out_w):
                v.append(f"layer {j}: spatial flow mismatch")

    for entry, pairs in residual_runs(spec):
        if entry is None:
            continue
        entry_layer = layers[entry]
        gid = entry_layer.group_id if entry_layer.kind == GROUP_FIRST else None
        for first, second in pairs:
            for k in (first, second):
                if layers[k].group_id != gid:
                    v.append(f"layer {k}: group_id {layers[k].group_id} "
                             f"does not match its group entry ({gid})")

    frb = {l.id for l in layers if l.kind == BLOCK_FIRST}
    if not frb <= set(spec.s_frb):
        v.append("s_frb incomplete")
    if not set(spec.s_frb) <= frb:
        v.append("s_frb contains non-BlockFirst ids")
    if not set(spec.head_ids) <= set(range(len(layers))):
        v.append("head_ids out of range")
    return v


def check_network(spec: NetworkSpec) -> None:
    problems = validate_network(spec)
    if problems:
        raise InvalidArgument("invalid network: " + "; ".join(problems))


def layer_flops(S: int, H: int, W: int, Cin: int, Cout: int) -> int:
    """FLOPs of one conv layer: ``H * W * S * S * Cin * Cout`` on the input map."""
    args = (S, H, W, Cin, Cout)
    if any(int(a) != a or a < 1 for a in args):
        raise InvalidArgument(f"layer_flops needs positive integers, got {args}")
    return int(H) * int(W) * int(S) * int(S) * int(Cin) * int(Cout)


# --- pruning actions ------------------------------------------------------

def is_block_choice(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _norm_element(x):
    if isinstance(x, bool):
        raise InvalidArgument("booleans are not action elements")
    if is_block_choice(x):
        return int(x)
    return float(x)


@dataclass(frozen=True)
class PruningAction:
    """Length-T sequence of block choices (``int`` 0/1) and ratios (``float``).

    A pruned block shows ``1`` at both of its positions. A kept block shows
    either two ratios or, when no ratio was searched, ``0`` at both positions.
    """
    elements: tuple

    def __init__(self, elements: Iterable):
        object.__setattr__(self, "elements", tuple(_norm_element(x) for x in elements))

    def __len__(self):
        return len(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    def __iter__(self):
        return iter(self.elements)

    def block_pruned(self, i: int) -> bool:
        x = self.elements[i]
        return is_block_choice(x) and x == PRUNE

    def ratio(self, i: int) -> float:
        """Channel ratio at ``i``; a kept-block choice counts as 0."""
        x = self.elements[i]
        if is_block_choice(x):
            if x == PRUNE:
                raise InvalidArgument(f"position {i} is a pruned block")
            return 0.0
        return x

    def to_list(self) -> list:
        return list(self.elements)

    @classmethod
    def from_list(cls, items: Sequence) -> "PruningAction":
        return cls(items)


def action_violations(spec: NetworkSpec, action: PruningAction) -> list[str]:
    v = []
    if len(action) != spec.T:
        return [f"action length {len(action)} != T={spec.T}"]
    for i, l in enumerate(spec.layers):
        x = action[i]
        if is_block_choice(x):
            if not l.is_block:
                v.append(f"position {i}: block choice on {l.kind} layer")
            elif x not in (KEEP, PRUNE):
                v.append(f"position {i}: block choice {x} not in {{0, 1}}")
            else:
                mate = i + 1 if l.kind == BLOCK_FIRST else i - 1
                if action[mate] != x or not is_block_choice(action[mate]):
                    v.append(f"position {i}: block choice not mirrored at {mate}")
        else:
            if not (0.0 <= x <= MAX_RATIO):
                v.append(f"position {i}: ratio {x} outside [0, {MAX_RATIO}]")
            if l.kind == BLOCK_FIRST and is_block_choice(action[i + 1]):
                v.append(f"position {i + 1}: block choice after a kept-block ratio")
    return v


def check_action(spec: NetworkSpec, action: PruningAction) -> None:
    problems = action_violations(spec, action)
    if problems:
        raise InvalidArgument("invalid action: " + "; ".join(problems))


def coupled_sets(spec: NetworkSpec, action: PruningAction | None = None) -> list[list[int]]:
    """Shortcut-coupled layer ids: run entry plus second layers of kept blocks."""
    out = []
    for entry, pairs in residual_runs(spec):
        if entry is None:
            continue
        members = [entry] + [s for f, s in pairs
                             if action is None or not action.block_pruned(f)]
        out.append(members)
    return out


def enforce_group_constraint(spec: NetworkSpec, action: PruningAction) -> PruningAction:
    """Raise every ratio of a shortcut-coupled set to the set's maximum."""
    check_action(spec, action)
    elems = list(action.elements)
    for members in coupled_sets(spec, action):
        top = max(action.ratio(k) for k in members)
        for k in members:
            if is_block_choice(elems[k]):
                # kept block searched without ratios; only touched if it must shrink
                if top > 0.0:
                    elems[k - 1] = 0.0
                    elems[k] = top
            else:
                elems[k] = top
    return PruningAction(elems)


# --- masks ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerMask:
    removed: bool
    kept: tuple[int, ...]


@dataclass(frozen=True)
class PruneMask:
    layers: tuple[LayerMask, ...]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerMask:
        return self.layers[i]

    @classmethod
    def identity(cls, spec: NetworkSpec) -> "PruneMask":
        return cls(tuple(LayerMask(False, tuple(range(l.out_ch))) for l in spec.layers))

    def kept_counts(self) -> list[int]:
        return [0 if m.removed else len(m.kept) for m in self.layers]

    def to_list(self) -> list:
        return [{"removed": m.removed, "kept": list(m.kept)} for m in self.layers]

    @classmethod
    def from_list(cls, items: Sequence[Mapping]) -> "PruneMask":
        return cls(tuple(LayerMask(bool(d["removed"]), tuple(int(k) for k in d["kept"]))
                         for d in items))


def mask_violations(spec: NetworkSpec, mask: PruneMask) -> list[str]:
    if len(mask) != spec.T:
        return [f"mask length {len(mask)} != T={spec.T}"]
    v = []
    for i, (l, m) in enumerate(zip(spec.layers, mask.layers)):
        if m.removed:
            if not l.is_block:
                v.append(f"layer {i}: removed but not a block layer")
            else:
                mate = i + 1 if l.kind == BLOCK_FIRST else i - 1
                if not mask[mate].removed:
                    v.append(f"layer {i}: block half-removed")
            continue
        if not (1 <= len(m.kept) <= l.out_ch):
            v.append(f"layer {i}: {len(m.kept)} kept channels of {l.out_ch}")
        if list(m.kept) != sorted(set(m.kept)) or (m.kept and not 0 <= m.kept[0] <= m.kept[-1] < l.out_ch):
            v.append(f"layer {i}: kept channels not a sorted subset")
    return v


def check_mask(spec: NetworkSpec, mask: PruneMask) -> None:
    problems = mask_violations(spec, mask)
    if problems:
        raise InvalidArgument("mask does not fit network: " + "; ".join(problems))


def prune_count(ratio: float, out_ch: int) -> int:
    """floor(ratio * out_ch), clamped so that one channel survives."""
    return max(0, min(int(math.floor(ratio * out_ch + _FLOOR_EPS)), out_ch - 1))


def resolve_mask(spec: NetworkSpec, action: PruningAction,
                 gammas: Sequence[np.ndarray]) -> PruneMask:
    """Turn an action into per-layer channel masks ranked by ``|gamma|``.

    Channels with the smallest ``|gamma|`` go first; equal magnitudes drop the
    lower channel index first.
    """
    check_action(spec, action)
    if len(gammas) != spec.T:
        raise InvalidArgument(f"{len(gammas)} gamma vectors for {spec.T} layers")
    out = []
    for i, l in enumerate(spec.layers):
        g = np.abs(np.asarray(gammas[i], dtype=np.float64)).ravel()
        if g.shape[0] != l.out_ch:
            raise InvalidArgument(f"layer {i}: gamma length {g.shape[0]} != out_ch {l.out_ch}")
        if action.block_pruned(i):
            out.append(LayerMask(True, ()))
            continue
        n = prune_count(action.ratio(i), l.out_ch)
        order = np.argsort(g, kind="stable")
        dropped = set(order[:n].tolist())
        out.append(LayerMask(False, tuple(c for c in range(l.out_ch) if c not in dropped)))
    return PruneMask(tuple(out))


def flops_by_layer(spec: NetworkSpec, mask: PruneMask) -> list[int]:
    """Per-layer conv FLOPs of the masked network; removed layers cost 0."""
    check_mask(spec, mask)
    out = []
    cin = spec.input_channels
    for l, m in zip(spec.layers, mask.layers):
        if m.removed:
            out.append(0)
            continue
        cout = len(m.kept)
        out.append(layer_flops(l.kernel, l.in_h, l.in_w, cin, cout))
        cin = cout
    return out


def total_flops(spec: NetworkSpec, mask: PruneMask) -> int:
    """Summed conv FLOPs of the masked network; removed blocks cost nothing."""
    return sum(flops_by_layer(spec, mask))


def apply_mask(weights: Sequence[Mapping[str, np.ndarray]], mask: PruneMask) -> list[dict]:
    """Return a copy of ``weights`` with dropped channels and removed blocks zeroed.

    Each entry maps ``weight`` (out, in, S, S), ``gamma`` and ``beta`` to arrays;
    other keys are copied untouched.
    """
    if len(weights) != len(mask):
        raise InvalidArgument(f"{len(weights)} weight entries for a {len(mask)}-layer mask")
    out = []
    for i, (entry, m) in enumerate(zip(weights, mask.layers)):
        new = {k: np.array(a, copy=True) for k, a in entry.items()}
        n_out = new["weight"].shape[0]
        for key in PARAM_KEYS:
            if new[key].shape[0] != n_out:
                raise InvalidArgument(f"layer {i}: {key} has {new[key].shape[0]} channels, "
                                      f"weight has {n_out}")
        if m.kept and m.kept[-1] >= n_out:
            raise InvalidArgument(f"layer {i}: mask keeps channel {m.kept[-1]} of {n_out}")
        if m.removed:
            for key in PARAM_KEYS:
                new[key][...] = 0
        else:
            drop = np.setdiff1d(np.arange(n_out), np.asarray(m.kept, dtype=int))
            for key in PARAM_KEYS:
                new[key][drop] = 0
        out.append(new)
    return out


def export_pruned(spec: NetworkSpec, mask: PruneMask) -> NetworkSpec:
    """Compact architecture: removed blocks deleted, widths shrunk to kept counts."""
    check_mask(spec, mask)
    layers = []
    remap = {}
    cin = spec.input_channels
    for l, m in zip(spec.layers, mask.layers):
        if m.removed:
            continue
        remap[l.id] = len(layers)
        cout = len(m.kept)
        layers.append(LayerSpec(len(layers), l.kind, l.kernel, cin, cout, l.in_h, l.in_w,
                                l.stride, l.block_id, l.group_id))
        cin = cout
    return NetworkSpec.build(layers, (remap[h] for h in spec.head_ids if h in remap))


def conv_param_count(spec: NetworkSpec) -> int:
    """Conv filter plus BN scale/shift parameters."""
    return sum(l.out_ch * l.in_ch * l.kernel ** 2 + 2 * l.out_ch for l in spec.layers)
