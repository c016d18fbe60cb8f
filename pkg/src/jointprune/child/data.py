"""Image datasets: a seeded synthetic shape task and a flat binary container.

Container layout (little-endian)::

    b"ABCPDATA"
    u32 version, num_classes, channels, height, width, n_train, n_test
    u8  train pixels   n_train * C * H * W
    u8  train labels   n_train
    u8  test pixels    n_test * C * H * W
    u8  test labels    n_test

A JSON manifest next to the container records the same header fields and the
SHA-256 of the container file.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidArgument, VersionMismatch

MAGIC = b"ABCPDATA"
DATA_VERSION = 1
MANIFEST_SCHEMA = "abcp-data/1"
SHAPES = ("disk", "bar", "cross")
_HEADER = struct.Struct("<7I")


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for x, y, name in ((self.train_x, self.train_y, "train"), (self.test_x, self.test_y, "test")):
            if x.dtype != np.uint8 or x.ndim != 4:
                raise InvalidArgument(f"{name} images must be u8 (N, C, H, W)")
            if len(x) != len(y):
                raise InvalidArgument(f"{name}: {len(x)} images, {len(y)} labels")
            if len(y) and int(np.max(y)) >= self.num_classes:
                raise InvalidArgument(f"{name}: label out of range")

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_test(self) -> int:
        return len(self.test_y)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.train_x.shape[1:]

    def _inputs(self, which, dtype):
        from .model import to_input
        key = (which, np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = to_input(getattr(self, which), dtype)
        return self._cache[key]

    def train_inputs(self, dtype) -> np.ndarray:
        return self._inputs("train_x", dtype)

    def test_inputs(self, dtype) -> np.ndarray:
        return self._inputs("test_x", dtype)

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "Dataset":
        return Dataset(self.train_x[:n_train], self.train_y[:n_train],
                       self.test_x[:n_test], self.test_y[:n_test], self.num_classes)


def _render(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    scale = rng.uniform(0.18, 0.34) * size
    cy, cx = rng.uniform(scale * 0.8, size - scale * 0.8, 2)
    dy, dx = yy - cy, xx - cx
    theta = rng.uniform(0, np.pi)
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    half_w = rng.uniform(0.16, 0.24) * scale
    if SHAPES[kind] == "disk":
        shape = dx * dx + dy * dy <= scale * scale
    elif SHAPES[kind] == "bar":
        shape = (np.abs(u) <= scale) & (np.abs(v) <= half_w)
    else:
        shape = ((np.abs(u) <= scale) & (np.abs(v) <= half_w)) | \
                ((np.abs(v) <= scale) & (np.abs(u) <= half_w))
    fg = rng.uniform(0.55, 1.0)
    bg = rng.uniform(0.0, 0.3)
    img = np.where(shape, fg, bg) + rng.normal(0.0, 0.08, (size, size))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _render_split(n: int, size: int, rng: np.random.Generator):
    labels = rng.permutation(np.arange(n) % len(SHAPES)).astype(np.uint8)
    images = np.stack([_render(int(k), size, rng) for k in labels]) if n else \
        np.zeros((0, size, size), np.uint8)
    return images[:, None], labels


def make_shapes(n_train: int, n_test: int, seed: int = 0, size: int = 32) -> Dataset:
    """Balanced disk / bar / cross greyscale images with random pose and noise."""
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    tx, ty = _render_split(n_train, size, np.random.default_rng(train_ss))
    vx, vy = _render_split(n_test, size, np.random.default_rng(test_ss))
    return Dataset(tx, ty, vx, vy, len(SHAPES))


def write_dataset(data: Dataset, path: str | Path) -> Path:
    """Write the container to ``path`` and its manifest to ``path + '.json'``."""
    path = Path(path)
    C, H, W = data.image_shape
    header = MAGIC + _HEADER.pack(DATA_VERSION, data.num_classes, C, H, W,
                                  data.n_train, data.n_test)
    blob = b"".join([header, data.train_x.tobytes(), data.train_y.astype(np.uint8).tobytes(),
                     data.test_x.tobytes(), data.test_y.astype(np.uint8).tobytes()])
    path.write_bytes(blob)
    manifest = {
        "schema": MANIFEST_SCHEMA, "file": path.name, "num_classes": data.num_classes,
        "channels": C, "height": H, "width": W, "n_train": data.n_train,
        "n_test": data.n_test, "sha256": hashlib.sha256(blob).hexdigest(),
    }
    mpath = path.with_name(path.name + ".json")
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return mpath


def read_dataset(manifest_path: str | Path) -> Dataset:
    mpath = Path(manifest_path)
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise VersionMismatch(f"expected manifest {MANIFEST_SCHEMA!r}, got {manifest.get('schema')!r}")
    blob = (mpath.parent / manifest["file"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise InvalidArgument("dataset checksum mismatch")
    if blob[:8] != MAGIC:
        raise VersionMismatch("bad dataset magic")
    version, k, C, H, W, n_tr, n_te = _HEADER.unpack_from(blob, 8)
    if version != DATA_VERSION:
        raise VersionMismatch(f"dataset container version {version}, expected {DATA_VERSION}")
    if (k, C, H, W, n_tr, n_te) != tuple(manifest[f] for f in
                                          ("num_classes", "channels", "height", "width",
                                           "n_train", "n_test")):
        raise InvalidArgument("manifest disagrees with container header")
    off = 8 + _HEADER.size
    img = C * H * W

    def take(n):
        nonlocal off
        out = np.frombuffer(blob, np.uint8, n, off)
        off += n
        return out

    tx = take(n_tr * img).reshape(n_tr, C, H, W).copy()
    ty = take(n_tr).copy()
    vx = take(n_te * img).reshape(n_te, C, H, W).copy()
    vy = take(n_te).copy()
    if off != len(blob):
        raise InvalidArgument("trailing bytes in dataset container")
    return Dataset(tx, ty, vx, vy, k)
