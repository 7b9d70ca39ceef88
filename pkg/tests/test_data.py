"""IDX parsing, split-stream construction, and the synthetic stream."""

import os

import numpy as np
import pytest
import torch

from gatedcl.data import (build_split_stream, load_idx_dataset, load_split_mnist,
                          read_idx, synthetic_stream, write_idx)
from gatedcl.errors import DataError

MNIST_DIR = os.environ.get("GATEDCL_DATA_DIR", "data/mnist")


def fake_dataset(n_per_class=120, classes=10, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    xs, ys = [], []
    for c in range(classes):
        xs.append(torch.rand(n_per_class, 1, size, size, generator=g))
        ys.append(torch.full((n_per_class,), c, dtype=torch.long))
    return torch.cat(xs), torch.cat(ys)


class TestIdx:
    def test_roundtrip_images_and_labels(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10, 5, 5), dtype=np.uint8)
        labels = rng.integers(0, 10, size=(10,), dtype=np.uint8)
        ip, lp = str(tmp_path / "img"), str(tmp_path / "lbl")
        write_idx(ip, images)
        write_idx(lp, labels)
        assert np.array_equal(read_idx(ip), images)
        assert np.array_equal(read_idx(lp), labels)
        x, y = load_idx_dataset(ip, lp)
        assert x.shape == (10, 1, 5, 5)
        assert x.dtype == torch.float32
        assert float(x.max()) <= 1.0
        assert torch.equal(y, torch.from_numpy(labels.astype(np.int64)))

    def test_truncated_file_names_byte_counts(self, tmp_path):
        images = np.zeros((4, 3, 3), dtype=np.uint8)
        path = str(tmp_path / "img")
        write_idx(path, images)
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[:-5])
        with pytest.raises(DataError, match="expected 52 bytes .* found 47"):
            read_idx(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "junk")
        with open(path, "wb") as f:
            f.write(b"\x00\x00\x12\x34" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            read_idx(path)

    def test_count_mismatch_rejected(self, tmp_path):
        ip, lp = str(tmp_path / "img"), str(tmp_path / "lbl")
        write_idx(ip, np.zeros((4, 3, 3), dtype=np.uint8))
        write_idx(lp, np.zeros(5, dtype=np.uint8))
        with pytest.raises(DataError, match="mismatch"):
            load_idx_dataset(ip, lp)

    def test_gzip_transparency(self, tmp_path):
        import gzip
        images = np.arange(9 * 4, dtype=np.uint8).reshape(4, 3, 3)
        raw_path = str(tmp_path / "img")
        write_idx(raw_path, images)
        gz_path = raw_path + ".gz"
        with open(raw_path, "rb") as f, gzip.open(gz_path, "wb") as z:
            z.write(f.read())
        assert np.array_equal(read_idx(gz_path), images)


class TestSplitStream:
    def test_consecutive_binary_tasks(self):
        x, y = fake_dataset()
        stream = build_split_stream(x, y, x.clone(), y.clone(),
                                    classes_per_task=2, seed=0)
        assert [t.classes for t in stream.tasks] == [
            [0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]

    def test_val_fraction_split(self):
        x, y = fake_dataset(n_per_class=500, classes=2)
        stream = build_split_stream(x, y, x.clone(), y.clone(),
                                    classes_per_task=2, val_fraction=0.1)
        td = stream.tasks[0]
        assert td.train_x.shape[0] == 900
        assert td.val_x.shape[0] == 100

    def test_label_remap_is_within_task(self):
        x, y = fake_dataset()
        stream = build_split_stream(x, y, x.clone(), y.clone(), 2)
        task4 = stream.task(4)
        assert task4.classes == [6, 7]
        assert task4.label_map()[7] == 1
        assert set(task4.train_y.tolist()) == {0, 1}

    def test_test_sets_partition_the_dataset(self):
        x, y = fake_dataset(n_per_class=50)
        stream = build_split_stream(x, y, x.clone(), y.clone(), 2)
        total = sum(t.test_x.shape[0] for t in stream.tasks)
        assert total == x.shape[0]

    def test_train_and_val_are_disjoint(self):
        x, y = fake_dataset(n_per_class=40, classes=2, size=6)
        stream = build_split_stream(x, y, x.clone(), y.clone(), 2)
        td = stream.tasks[0]
        train_keys = {hash(row.numpy().tobytes()) for row in td.train_x}
        val_keys = {hash(row.numpy().tobytes()) for row in td.val_x}
        assert not train_keys & val_keys

    def test_deterministic_given_seed_and_order(self):
        x, y = fake_dataset()
        a = build_split_stream(x, y, x.clone(), y.clone(), 2, seed=7)
        b = build_split_stream(x, y, x.clone(), y.clone(), 2, seed=7)
        for ta, tb in zip(a.tasks, b.tasks):
            assert torch.equal(ta.train_x, tb.train_x)
            assert torch.equal(ta.val_y, tb.val_y)

    def test_custom_order(self):
        x, y = fake_dataset(classes=4)
        stream = build_split_stream(x, y, x.clone(), y.clone(), 2,
                                    order=[3, 0, 2, 1])
        assert [t.classes for t in stream.tasks] == [[3, 0], [2, 1]]

    def test_indivisible_class_count_rejected(self):
        x, y = fake_dataset(classes=9)
        with pytest.raises(DataError):
            build_split_stream(x, y, x.clone(), y.clone(), 2)

    def test_bad_val_fraction_rejected(self):
        x, y = fake_dataset(classes=2)
        with pytest.raises(DataError):
            build_split_stream(x, y, x.clone(), y.clone(), 2, val_fraction=0.0)

    def test_manifest_is_json_friendly(self):
        import json
        x, y = fake_dataset(classes=2)
        stream = build_split_stream(x, y, x.clone(), y.clone(), 2, seed=3)
        manifest = stream.manifest()
        json.dumps(manifest)
        assert manifest["num_tasks"] == 1
        assert manifest["seed"] == 3


class TestSyntheticStream:
    def test_deterministic_given_seed(self):
        a = synthetic_stream(seed=4)
        b = synthetic_stream(seed=4)
        for ta, tb in zip(a.tasks, b.tasks):
            assert torch.equal(ta.train_x, tb.train_x)

    def test_classes_are_separable_by_mean_distance(self):
        stream = synthetic_stream(num_tasks=2, seed=0)
        td = stream.tasks[0]
        m0 = td.train_x[td.train_y == 0].mean(dim=0)
        m1 = td.train_x[td.train_y == 1].mean(dim=0)
        within = td.train_x[td.train_y == 0].std(dim=0).mean()
        assert (m0 - m1).norm() > within

    def test_shapes_and_disjoint_classes(self):
        stream = synthetic_stream(num_tasks=3, classes_per_task=2,
                                  n_train=16, n_val=8, n_test=8, image_size=12)
        seen = set()
        for td in stream.tasks:
            assert td.train_x.shape[1:] == (1, 12, 12)
            assert not (seen & set(td.classes))
            seen |= set(td.classes)


@pytest.mark.skipif(not os.path.isdir(MNIST_DIR),
                    reason="MNIST files not present")
class TestRealMnist:
    def test_loads_canonical_counts_and_shapes(self):
        stream = load_split_mnist(MNIST_DIR, seed=0)
        assert len(stream) == 5
        totals = sum(t.train_x.shape[0] + t.val_x.shape[0]
                     for t in stream.tasks)
        assert totals == 60000
        assert sum(t.test_x.shape[0] for t in stream.tasks) == 10000
        assert stream.tasks[0].train_x.shape[1:] == (1, 28, 28)
        assert [t.classes for t in stream.tasks] == [
            [0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
