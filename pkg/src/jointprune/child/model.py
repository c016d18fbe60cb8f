"""Residual CNN with batch norm, trained with hand-written forward/backward passes.

Activations are kept channels-last (N, H, W, C); filters are stored as
(out, in, S, S). Every conv is followed by batch norm and a leaky rectifier;
the second layer of a block adds its output to the block input.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..arch import (BLOCK_FIRST, BLOCK_SECOND, NetworkSpec, PruneMask, apply_mask,
                    check_mask, check_network)
from ..errors import InvalidArgument, NumericalFault, VersionMismatch
from ..optim import AdamState, adam_step
from .data import Dataset

CHILD_SCHEMA = "abcp-child/1"
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAK = 0.1


@dataclass(frozen=True)
class ChildConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-4
    finetune_lr: float = 1e-3
    dtype: str = "float32"
    # the last ``decay_epochs`` epochs run at ``decay_factor * lr``
    decay_epochs: int = 0
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.lr <= 0 or self.finetune_lr <= 0:
            raise InvalidArgument("child config needs epochs >= 1, batch_size >= 2, lr > 0")
        if self.weight_decay < 0:
            raise InvalidArgument("weight_decay must be >= 0")
        if self.decay_epochs < 0 or not 0 < self.decay_factor <= 1:
            raise InvalidArgument("need decay_epochs >= 0 and 0 < decay_factor <= 1")


@dataclass
class ChildModel:
    spec: NetworkSpec
    num_classes: int
    params: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["fc.w"].dtype

    def copy(self) -> "ChildModel":
        return ChildModel(self.spec, self.num_classes,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.stats.items()})

    def layer_store(self) -> list[dict[str, np.ndarray]]:
        """Per-conv-layer view used by mask application."""
        return [{"weight": self.params[f"conv.{i}.weight"],
                 "gamma": self.params[f"conv.{i}.gamma"],
                 "beta": self.params[f"conv.{i}.beta"],
                 "running_mean": self.stats[f"conv.{i}.mean"],
                 "running_var": self.stats[f"conv.{i}.var"]} for i in range(self.spec.T)]

    def with_layer_store(self, store) -> "ChildModel":
        params = dict(self.params)
        stats = dict(self.stats)
        for i, entry in enumerate(store):
            for key in ("weight", "gamma", "beta"):
                params[f"conv.{i}.{key}"] = entry[key]
            stats[f"conv.{i}.mean"] = entry["running_mean"]
            stats[f"conv.{i}.var"] = entry["running_var"]
        return ChildModel(self.spec, self.num_classes, params, stats)

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def to_dict(self) -> dict:
        def pack(d):
            return {k: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
                    for k, a in d.items()}
        return {"schema": CHILD_SCHEMA, "spec": self.spec.to_dict(),
                "num_classes": self.num_classes, "dtype": str(self.dtype),
                "params": pack(self.params), "stats": pack(self.stats)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ChildModel":
        if doc.get("schema") != CHILD_SCHEMA:
            raise VersionMismatch(
                f"expected child checkpoint {CHILD_SCHEMA!r}, got {doc.get('schema')!r}")
        dt = np.dtype(doc["dtype"])

        def unpack(d):
            return {k: np.asarray(a["data"], dtype=dt).reshape(a["shape"]) for k, a in d.items()}
        return cls(NetworkSpec.from_dict(doc["spec"]), int(doc["num_classes"]),
                   unpack(doc["params"]), unpack(doc["stats"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "ChildModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise VersionMismatch(f"not a child checkpoint: {exc}") from exc
        return cls.from_dict(doc)


def parameter_count(spec: NetworkSpec, num_classes: int) -> int:
    """Trainable parameters: conv filters, BN scale/shift and the affine head."""
    conv = sum(l.out_ch * l.in_ch * l.kernel ** 2 + 2 * l.out_ch for l in spec.layers)
    return conv + num_classes * spec.output_channels + num_classes


def init_model(spec: NetworkSpec, num_classes: int, rng: np.random.Generator,
               dtype="float32") -> ChildModel:
    """He-normal filters, gamma = 1, beta = 0 and a zero affine head."""
    check_network(spec)
    dt = np.dtype(dtype)
    params, stats = {}, {}
    for i, l in enumerate(spec.layers):
        fan_in = l.in_ch * l.kernel ** 2
        std = math.sqrt(2.0 / ((1.0 + LEAK ** 2) * fan_in))
        params[f"conv.{i}.weight"] = (rng.standard_normal(
            (l.out_ch, l.in_ch, l.kernel, l.kernel)) * std).astype(dt)
        params[f"conv.{i}.gamma"] = np.ones(l.out_ch, dt)
        params[f"conv.{i}.beta"] = np.zeros(l.out_ch, dt)
        stats[f"conv.{i}.mean"] = np.zeros(l.out_ch, dt)
        stats[f"conv.{i}.var"] = np.ones(l.out_ch, dt)
    params["fc.w"] = np.zeros((num_classes, spec.output_channels), dt)
    params["fc.b"] = np.zeros(num_classes, dt)
    return ChildModel(spec, num_classes, params, stats)


def bn_gammas(model: ChildModel) -> list[np.ndarray]:
    return [model.params[f"conv.{i}.gamma"] for i in range(model.spec.T)]


# --- layers -------------------------------------------------------------------

def _im2col(x, S, stride):
    N, H, W, C = x.shape
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    if S == 1:
        return np.ascontiguousarray(x[:, ::stride, ::stride, :]).reshape(N * Ho * Wo, C), Ho, Wo
    p = S // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (S, S), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # (N, Ho, Wo, S, S, C): channels innermost keeps the copy cache-friendly
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, S * S * C), Ho, Wo


def _wmat(W):
    return W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1)


def conv_forward(x, W, stride):
    S = W.shape[2]
    cols, Ho, Wo = _im2col(x, S, stride)
    out = cols @ _wmat(W).T
    return out.reshape(x.shape[0], Ho, Wo, W.shape[0]), cols


def conv_backward(dout, cols, x_shape, W, stride):
    O, C, S, _ = W.shape
    N, H, Wd, _ = x_shape
    d2 = dout.reshape(-1, O)
    dW = (d2.T @ cols).reshape(O, S, S, C).transpose(0, 3, 1, 2)
    dcols = d2 @ _wmat(W)
    Ho, Wo = dout.shape[1], dout.shape[2]
    if S == 1:
        dx = np.zeros(x_shape, dout.dtype)
        dx[:, ::stride, ::stride, :] = dcols.reshape(N, Ho, Wo, C)
        return dx, dW
    p = S // 2
    dcols = dcols.reshape(N, Ho, Wo, S, S, C)
    dxp = np.zeros((N, H + 2 * p, Wd + 2 * p, C), dout.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for ki in range(S):
        for kj in range(S):
            dxp[:, ki:ki + hs:stride, kj:kj + ws:stride, :] += dcols[:, :, :, ki, kj, :]
    return dxp[:, p:p + H, p:p + Wd, :], dW


def bn_forward(z, gamma, beta, mean, var, train, keep_cache=True):
    if train:
        mu = z.mean(axis=(0, 1, 2))
        v = z.var(axis=(0, 1, 2))
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + BN_EPS)
    if not keep_cache:
        scale = gamma * inv
        y = z * scale
        y += beta - mu * scale
        return y, (None, inv, train, mu, v)
    xhat = (z - mu) * inv
    return gamma * xhat + beta, (xhat, inv, train, mu, v)


def bn_backward(dy, gamma, cache):
    xhat, inv, train, _, _ = cache
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    M = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dz = (inv / M) * (M * dxhat - dxhat.sum(axis=(0, 1, 2))
                      - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dz, dgamma, dbeta


def leaky(y):
    return np.maximum(y, LEAK * y)


def leaky_backward(dy, y):
    return np.where(y > 0, dy, LEAK * dy)


def to_input(images: np.ndarray, dtype) -> np.ndarray:
    """u8 (N, C, H, W) images to channels-last floats in [0, 1]."""
    return (images.transpose(0, 2, 3, 1).astype(dtype) / 255.0).astype(dtype)


def forward(model: ChildModel, x: np.ndarray, train: bool = False, keep_cache: bool = False):
    """Logits for a channels-last batch. In training mode BN uses batch stats
    and the running statistics are updated in place."""
    p, s = model.params, model.stats
    caches = []
    a = x
    shortcut = None
    for i, l in enumerate(model.spec.layers):
        if l.kind == BLOCK_FIRST:
            shortcut = a
        W = p[f"conv.{i}.weight"]
        z, cols = conv_forward(a, W, l.stride)
        y, bnc = bn_forward(z, p[f"conv.{i}.gamma"], p[f"conv.{i}.beta"],
                            s[f"conv.{i}.mean"], s[f"conv.{i}.var"], train,
                            keep_cache or train)
        if train:
            m = BN_MOMENTUM
            s[f"conv.{i}.mean"] = (m * s[f"conv.{i}.mean"] + (1 - m) * bnc[3]).astype(z.dtype)
            s[f"conv.{i}.var"] = (m * s[f"conv.{i}.var"] + (1 - m) * bnc[4]).astype(z.dtype)
        out = leaky(y)
        if l.kind == BLOCK_SECOND:
            out = out + shortcut
        if keep_cache:
            caches.append((a.shape, cols, bnc, y))
        a = out
    feat = a.mean(axis=(1, 2))
    logits = feat @ p["fc.w"].T + p["fc.b"]
    return logits, (caches, feat, a.shape)


def cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Per-sample softmax cross-entropy (float64) and softmax probabilities."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(len(y)), y]
    probs = np.exp(z - lse[:, None])
    return losses, probs


def backward(model: ChildModel, cache, probs, y, conv_layers=None):
    """Gradients of the mean cross-entropy; ``conv_layers`` limits which conv
    layers receive gradients (all by default). The backward pass stops below
    the lowest requested layer."""
    caches, feat, a_shape = cache
    p = model.params
    n = len(y)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits = (dlogits / n).astype(feat.dtype)
    grads = {"fc.w": dlogits.T @ feat, "fc.b": dlogits.sum(axis=0)}
    layers = model.spec.layers
    wanted = set(range(len(layers))) if conv_layers is None else set(conv_layers)
    if not wanted:
        return grads
    lowest = min(wanted)
    H, W = a_shape[1], a_shape[2]
    da = np.broadcast_to((dlogits @ p["fc.w"])[:, None, None, :] / (H * W), a_shape).copy()
    d_short = None
    for i in range(len(layers) - 1, lowest - 1, -1):
        l = layers[i]
        x_shape, cols, bnc, y_pre = caches[i]
        if l.kind == BLOCK_SECOND:
            d_short = da
        dy = leaky_backward(da, y_pre)
        dz, dgamma, dbeta = bn_backward(dy, p[f"conv.{i}.gamma"], bnc)
        if i in wanted:
            grads[f"conv.{i}.gamma"] = dgamma
            grads[f"conv.{i}.beta"] = dbeta
        dx, dW = conv_backward(dz, cols, x_shape, p[f"conv.{i}.weight"], l.stride)
        if i in wanted:
            grads[f"conv.{i}.weight"] = dW
        da = dx
        if l.kind == BLOCK_FIRST and i > lowest:
            da = da + d_short
    return grads


def loss_and_grads(model: ChildModel, x, y, train=True):
    logits, cache = forward(model, x, train=train, keep_cache=True)
    losses, probs = cross_entropy(logits, y)
    return float(losses.mean()), backward(model, cache, probs, y)


# --- training -----------------------------------------------------------------

def _decay_keys(params):
    return [k for k in params if k.endswith(".weight") or k == "fc.w"]


def _check_finite(loss):
    if not math.isfinite(loss):
        raise NumericalFault(f"training diverged (loss={loss})")


def train(model: ChildModel, data: Dataset, cfg: ChildConfig, rng: np.random.Generator,
          epochs: int | None = None) -> ChildModel:
    """Mini-batch Adam on all parameters with a final step decay; returns a trained copy."""
    model = model.copy()
    x_all = data.train_inputs(model.dtype)
    y_all = data.train_y.astype(np.int64)
    adam = AdamState.zeros_like(model.params, lr=cfg.lr)
    decayed = _decay_keys(model.params)
    n = len(y_all)
    total = cfg.epochs if epochs is None else epochs
    for epoch in range(total):
        adam.lr = cfg.lr * (cfg.decay_factor if epoch >= total - cfg.decay_epochs else 1.0)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, grads = loss_and_grads(model, x_all[idx], y_all[idx], train=True)
            _check_finite(loss)
            for k in decayed:
                grads[k] = grads[k] + cfg.weight_decay * model.params[k]
            adam_step(model.params, grads, adam, inplace=True)
    return model


def pretrain(spec: NetworkSpec, data: Dataset, cfg: ChildConfig,
             rng: np.random.Generator) -> ChildModel:
    if data.n_train == 0:
        raise InvalidArgument("empty training split")
    model = init_model(spec, data.num_classes, rng, cfg.dtype)
    return train(model, data, cfg, rng)


def retrain(pruned_spec: NetworkSpec, data: Dataset, cfg: ChildConfig,
            rng: np.random.Generator) -> ChildModel:
    """Train the compact architecture from a fresh initialization."""
    return pretrain(pruned_spec, data, cfg, rng)


def mask_model(model: ChildModel, mask: PruneMask) -> ChildModel:
    check_mask(model.spec, mask)
    return model.with_layer_store(apply_mask(model.layer_store(), mask))


def _mask_arrays(spec: NetworkSpec, mask: PruneMask, layers) -> dict[str, np.ndarray]:
    """0/1 multipliers for the parameters of ``layers`` under ``mask``."""
    out = {}
    for i in layers:
        l, m = spec.layers[i], mask[i]
        keep = np.zeros(l.out_ch)
        if not m.removed:
            keep[list(m.kept)] = 1.0
        out[f"conv.{i}.weight"] = keep[:, None, None, None]
        out[f"conv.{i}.gamma"] = keep
        out[f"conv.{i}.beta"] = keep
    return out


def features(model: ChildModel, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Pooled features of the final stream in inference mode."""
    chunks = []
    for s in range(0, len(x), batch):
        _, (_, feat, _) = forward(model, x[s:s + batch], train=False)
        chunks.append(feat)
    return np.concatenate(chunks) if chunks else np.zeros((0, model.spec.output_channels))


def fine_tune(model: ChildModel, mask: PruneMask, data: Dataset, cfg: ChildConfig,
              rng: np.random.Generator) -> ChildModel:
    """One epoch on the head layers only, with pruned weights held at zero.

    Trainable: the affine head plus the conv layers in ``spec.head_ids``.
    BN layers run on their frozen running statistics.
    """
    check_mask(model.spec, mask)
    model = model.copy()
    spec = model.spec
    heads = sorted(spec.head_ids)
    masks = _mask_arrays(spec, mask, heads)
    keys = ["fc.w", "fc.b"] + [k for k in model.params if k.split(".")[0] == "conv"
                               and int(k.split(".")[1]) in spec.head_ids]
    adam = AdamState.zeros_like({k: model.params[k] for k in keys}, lr=cfg.finetune_lr)
    decay = [k for k in _decay_keys(model.params) if k in keys]
    x_all = data.train_inputs(model.dtype)
    y_all = data.train_y.astype(np.int64)
    n = len(y_all)
    feats = features(model, x_all) if not heads else None
    order = rng.permutation(n)
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if heads:
            logits, cache = forward(model, x_all[idx], train=False, keep_cache=True)
            losses, probs = cross_entropy(logits, y_all[idx])
            grads = backward(model, cache, probs, y_all[idx], conv_layers=heads)
        else:
            f = feats[idx]
            logits = f @ model.params["fc.w"].T + model.params["fc.b"]
            losses, probs = cross_entropy(logits, y_all[idx])
            d = probs.copy()
            d[np.arange(len(idx)), y_all[idx]] -= 1.0
            d = (d / len(idx)).astype(f.dtype)
            grads = {"fc.w": d.T @ f, "fc.b": d.sum(axis=0)}
        _check_finite(float(losses.mean()))
        for k in decay:
            grads[k] = grads[k] + cfg.weight_decay * model.params[k]
        for k, mk in masks.items():
            grads[k] = grads[k] * mk.astype(grads[k].dtype)
        adam_step(model.params, grads, adam, inplace=True)
        for k, mk in masks.items():
            model.params[k] = model.params[k] * mk.astype(model.params[k].dtype)
    return model


def _eval_logits(model: ChildModel, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch):
        logits, _ = forward(model, x[s:s + batch], train=False)
        out.append(logits)
    return np.concatenate(out)


def test_loss(model: ChildModel, data: Dataset) -> float:
    """Mean cross-entropy over the test split, BN in inference mode."""
    if data.n_test == 0:
        raise InvalidArgument("empty test split")
    logits = _eval_logits(model, data.test_inputs(model.dtype))
    losses, _ = cross_entropy(logits, data.test_y.astype(np.int64))
    return math.fsum(losses.tolist()) / len(losses)


def accuracy(model: ChildModel, data: Dataset) -> float:
    if data.n_test == 0:
        raise InvalidArgument("empty test split")
    logits = _eval_logits(model, data.test_inputs(model.dtype))
    return float(np.mean(logits.argmax(axis=1) == data.test_y))
