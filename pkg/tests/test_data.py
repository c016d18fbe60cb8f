import json

import numpy as np
import pytest

from jointprune.child.data import MAGIC, Dataset, make_shapes, read_dataset, write_dataset
from jointprune.errors import InvalidArgument, VersionMismatch


def test_shapes_deterministic_and_balanced():
    a = make_shapes(30, 12, seed=4, size=16)
    b = make_shapes(30, 12, seed=4, size=16)
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.test_y, b.test_y)
    assert a.train_x.shape == (30, 1, 16, 16) and a.train_x.dtype == np.uint8
    assert np.bincount(a.train_y).tolist() == [10, 10, 10]
    assert not np.array_equal(a.train_x, make_shapes(30, 12, seed=5, size=16).train_x)


def test_test_split_independent_of_train_size():
    assert np.array_equal(make_shapes(10, 9, 1).test_x, make_shapes(40, 9, 1).test_x)


def test_roundtrip(tmp_path):
    d = make_shapes(7, 5, seed=0, size=8)
    manifest = write_dataset(d, tmp_path / "shapes.bin")
    assert manifest.name == "shapes.bin.json"
    doc = json.loads(manifest.read_text())
    assert doc["schema"] == "abcp-data/1" and doc["n_train"] == 7
    assert (tmp_path / "shapes.bin").read_bytes()[:8] == MAGIC
    back = read_dataset(manifest)
    for f in ("train_x", "train_y", "test_x", "test_y"):
        assert np.array_equal(getattr(back, f), getattr(d, f))
    assert back.num_classes == 3


def test_corruption_detected(tmp_path):
    manifest = write_dataset(make_shapes(4, 4, 0, 8), tmp_path / "d.bin")
    blob = bytearray((tmp_path / "d.bin").read_bytes())
    blob[-1] ^= 1
    (tmp_path / "d.bin").write_bytes(bytes(blob))
    with pytest.raises(InvalidArgument, match="checksum"):
        read_dataset(manifest)


def test_manifest_version(tmp_path):
    manifest = write_dataset(make_shapes(4, 4, 0, 8), tmp_path / "d.bin")
    doc = json.loads(manifest.read_text())
    doc["schema"] = "abcp-data/2"
    manifest.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        read_dataset(manifest)


def test_missing_container(tmp_path):
    manifest = write_dataset(make_shapes(4, 4, 0, 8), tmp_path / "d.bin")
    (tmp_path / "d.bin").unlink()
    with pytest.raises(FileNotFoundError):
        read_dataset(manifest)


@pytest.mark.parametrize("bad", ["dtype", "labels", "count"])
def test_dataset_validation(bad):
    x = np.zeros((3, 1, 4, 4), np.uint8)
    y = np.zeros(3, np.uint8)
    kw = dict(train_x=x, train_y=y, test_x=x, test_y=y, num_classes=2)
    if bad == "dtype":
        kw["train_x"] = x.astype(np.float32)
    elif bad == "labels":
        kw["test_y"] = np.array([0, 1, 2], np.uint8)
    else:
        kw["train_y"] = y[:2]
    with pytest.raises(InvalidArgument):
        Dataset(**kw)
