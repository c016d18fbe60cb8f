"""Independent reference implementations used to check the library.

None of these import the code they check beyond plain data containers.
They favour obviousness over speed: explicit loops, no shared helpers.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# --- FLOPs ------------------------------------------------------------------

def brute_flops(layers, input_channels, removed, kept_counts):
    """Count multiply-accumulates one input pixel at a time.

    ``layers`` are objects with ``kernel``, ``in_h``, ``in_w``; a removed layer
    is skipped and the next layer reads whatever the last executed layer
    produced (the shortcut passes the stream through).
    """
    total = 0
    live = input_channels
    for layer, gone, kept in zip(layers, removed, kept_counts):
        if gone:
            continue
        per_pixel = 0
        for _ky in range(layer.kernel):
            for _kx in range(layer.kernel):
                per_pixel += live * kept
        for _y in range(layer.in_h):
            for _x in range(layer.in_w):
                total += per_pixel
        live = kept
    return total


# --- controller ---------------------------------------------------------------

DISCRETE_GRID = (0.0, 0.225, 0.45, 0.675, 0.9)


def enumerate_discrete_actions(kinds):
    """Every joint-mode discrete action for a layer-kind sequence.

    A ``BlockFirst``/``BlockSecond`` pair is either pruned (``1, 1``) or kept
    with a grid ratio at each position.
    """
    slots = []
    i = 0
    while i < len(kinds):
        if kinds[i] == "BlockFirst":
            pair = [(1, 1)] + [(a, b) for a in DISCRETE_GRID for b in DISCRETE_GRID]
            slots.append(pair)
            i += 2
        else:
            slots.append([(r,) for r in DISCRETE_GRID])
            i += 1
    for combo in itertools.product(*slots):
        yield [x for part in combo for x in part]


def central_difference(f, arrays, step=1e-4, keys=None):
    """Central finite differences of scalar ``f()`` w.r.t. every array entry (in place)."""
    out = {}
    for k in keys or list(arrays):
        a = arrays[k]
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + step
            up = f()
            a[idx] = old - step
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * step)
        out[k] = g
    return out


def normal_logpdf(x, mu, var):
    return -0.5 * math.log(2 * math.pi * var) - (x - mu) ** 2 / (2 * var)


# --- child network --------------------------------------------------------------

def naive_conv(x, w, stride):
    """Zero-padded 'same' convolution by explicit loops.

    ``x`` is (N, H, W, C) and ``w`` is (O, C, S, S); output (N, Ho, Wo, O).
    """
    n, h, wd, c = x.shape
    o, _, s, _ = w.shape
    pad = s // 2
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, o))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for f in range(o):
                    acc = 0.0
                    for dy in range(s):
                        for dx in range(s):
                            y, xx = i * stride + dy - pad, j * stride + dx - pad
                            if 0 <= y < h and 0 <= xx < wd:
                                for ch in range(c):
                                    acc += float(x[b, y, xx, ch]) * float(w[f, ch, dy, dx])
                    out[b, i, j, f] = acc
    return out


def naive_batchnorm(z, gamma, beta, eps=1e-5):
    """Training-mode batch norm over all axes but the last."""
    flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    return ((flat - mean) / np.sqrt(var + eps) * gamma + beta).reshape(z.shape)


def softmax_xent(logits, y):
    """Mean cross-entropy with an explicit log-sum-exp per row."""
    total = 0.0
    for row, label in zip(np.asarray(logits, dtype=np.float64), y):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[label]
    return total / len(y)
