"""Task-stream construction and dataset ingestion.

Supports the standard IDX binary format (magic 2051 for images, 2049 for
labels; gzip-compressed files are detected by their header) and a procedural
synthetic stream for fast tests. Streams split a labeled dataset into tasks of
disjoint classes, each with train/val/test tensors and within-task labels.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def read_idx(path: str) -> np.ndarray:
    """Parse one IDX file into a numpy array (uint8)."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise DataError(f"{path}: truncated image header")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        expected = 16 + n * rows * cols
        if len(raw) != expected:
            raise DataError(
                f"{path}: expected {expected} bytes for {n} images of "
                f"{rows}x{cols}, found {len(raw)}")
        return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    if magic == IDX_LABELS_MAGIC:
        n = struct.unpack(">I", raw[4:8])[0]
        expected = 8 + n
        if len(raw) != expected:
            raise DataError(
                f"{path}: expected {expected} bytes for {n} labels, "
                f"found {len(raw)}")
        return np.frombuffer(raw, dtype=np.uint8, offset=8)
    raise DataError(f"{path}: bad IDX magic number {magic} "
                    f"(expected {IDX_IMAGES_MAGIC} or {IDX_LABELS_MAGIC})")


def write_idx(path: str, array: np.ndarray):
    """Inverse of read_idx, for round-trip tests and fixtures."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        if arr.ndim == 3:
            f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape))
        elif arr.ndim == 1:
            f.write(struct.pack(">II", IDX_LABELS_MAGIC, arr.shape[0]))
        else:
            raise DataError(f"cannot serialize array of rank {arr.ndim} as IDX")
        f.write(arr.tobytes())


def load_idx_dataset(images_path: str, labels_path: str):
    """Images as float32 in [0,1], shaped (N, 1, H, W); labels as int64."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected a label file")
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    return x, y


def mnist_paths(data_dir: str) -> dict[str, str]:
    """Locate the four MNIST files (raw or .gz) under a directory."""
    out = {}
    for key, stem in MNIST_FILES.items():
        for cand in (stem, stem + ".gz"):
            path = os.path.join(data_dir, cand)
            if os.path.exists(path):
                out[key] = path
                break
        else:
            raise DataError(f"missing {stem}[.gz] under {data_dir}")
    return out


@dataclass
class TaskData:
    """One task: its original classes plus tensors with within-task labels."""

    task_id: int
    classes: list[int]
    train_x: torch.Tensor
    train_y: torch.Tensor
    val_x: torch.Tensor
    val_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def label_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.classes)}


@dataclass
class TaskStream:
    """Ordered task sequence over disjoint class sets."""

    tasks: list[TaskData]
    seed: int
    source: str = "unknown"
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, task_id: int) -> TaskData:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise DataError(f"stream has no task {task_id}")

    def manifest(self) -> dict:
        return {
            "source": self.source,
            "seed": self.seed,
            "num_tasks": len(self.tasks),
            "tasks": [{
                "task_id": t.task_id,
                "classes": t.classes,
                "train": int(t.train_x.shape[0]),
                "val": int(t.val_x.shape[0]),
                "test": int(t.test_x.shape[0]),
            } for t in self.tasks],
            **self.extra,
        }


def build_split_stream(train_x: torch.Tensor, train_y: torch.Tensor,
                       test_x: torch.Tensor, test_y: torch.Tensor,
                       classes_per_task: int = 2,
                       order: list[int] | None = None,
                       val_fraction: float = 0.1,
                       seed: int = 0,
                       source: str = "split") -> TaskStream:
    """Split a dataset into tasks of disjoint consecutive (or given-order)
    classes, carving per-task validation data out of the training set only."""
    if not 0 < val_fraction < 1:
        raise DataError(f"val_fraction must be in (0,1), got {val_fraction}")
    classes = sorted(torch.unique(train_y).tolist())
    if order is None:
        order = classes
    if sorted(order) != classes:
        raise DataError("class order must be a permutation of the dataset classes")
    if len(order) % classes_per_task != 0:
        raise DataError(
            f"{len(order)} classes not divisible into tasks of {classes_per_task}")
    gen = torch.Generator().manual_seed(seed)
    tasks = []
    for i in range(0, len(order), classes_per_task):
        task_classes = [int(c) for c in order[i:i + classes_per_task]]
        task_id = i // classes_per_task + 1
        tr_x, tr_y = _select_remap(train_x, train_y, task_classes)
        te_x, te_y = _select_remap(test_x, test_y, task_classes)
        n_val = int(round(tr_x.shape[0] * val_fraction))
        if n_val == 0 or n_val == tr_x.shape[0]:
            raise DataError(f"task {task_id}: validation split would be degenerate")
        perm = torch.randperm(tr_x.shape[0], generator=gen)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        tasks.append(TaskData(
            task_id=task_id, classes=task_classes,
            train_x=tr_x[train_idx], train_y=tr_y[train_idx],
            val_x=tr_x[val_idx], val_y=tr_y[val_idx],
            test_x=te_x, test_y=te_y))
    return TaskStream(tasks=tasks, seed=seed, source=source,
                      extra={"classes_per_task": classes_per_task,
                             "order": [int(c) for c in order],
                             "val_fraction": val_fraction})


def _select_remap(x: torch.Tensor, y: torch.Tensor, task_classes: list[int]):
    remap = {c: i for i, c in enumerate(task_classes)}
    mask = torch.zeros_like(y, dtype=torch.bool)
    for c in task_classes:
        mask |= y == c
    xs, ys = x[mask], y[mask]
    ys = torch.tensor([remap[int(v)] for v in ys], dtype=torch.long)
    return xs, ys


def load_split_mnist(data_dir: str, classes_per_task: int = 2,
                     order: list[int] | None = None,
                     val_fraction: float = 0.1, seed: int = 0) -> TaskStream:
    paths = mnist_paths(data_dir)
    train_x, train_y = load_idx_dataset(paths["train_images"], paths["train_labels"])
    test_x, test_y = load_idx_dataset(paths["test_images"], paths["test_labels"])
    return build_split_stream(train_x, train_y, test_x, test_y,
                              classes_per_task=classes_per_task, order=order,
                              val_fraction=val_fraction, seed=seed,
                              source="split_mnist")


def synthetic_stream(num_tasks: int = 3, classes_per_task: int = 2,
                     n_train: int = 128, n_val: int = 32, n_test: int = 64,
                     image_size: int = 16, noise: float = 0.15,
                     seed: int = 0) -> TaskStream:
    """Procedural image-like stream: one smooth random prototype per class
    plus pixel noise. Deterministic given the seed and separable by
    construction; exists so the training machinery can be exercised without
    dataset files."""
    gen = torch.Generator().manual_seed(seed)
    tasks = []
    total_classes = num_tasks * classes_per_task
    protos = _smooth_prototypes(total_classes, image_size, gen)
    for t in range(num_tasks):
        cls = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        xs, ys = [], []
        for n in (n_train, n_val, n_test):
            bx, by = [], []
            for local, c in enumerate(cls):
                base = protos[c].expand(n, 1, image_size, image_size)
                pert = torch.randn(n, 1, image_size, image_size, generator=gen)
                bx.append((base + noise * pert).clamp(0, 1))
                by.append(torch.full((n,), local, dtype=torch.long))
            xs.append(torch.cat(bx))
            ys.append(torch.cat(by))
        tasks.append(TaskData(task_id=t + 1, classes=cls,
                              train_x=xs[0], train_y=ys[0],
                              val_x=xs[1], val_y=ys[1],
                              test_x=xs[2], test_y=ys[2]))
    return TaskStream(tasks=tasks, seed=seed, source="synthetic",
                      extra={"classes_per_task": classes_per_task,
                             "image_size": image_size})


def _smooth_prototypes(n: int, size: int, gen: torch.Generator) -> torch.Tensor:
    # Low-frequency random fields, upsampled; visually blob-like and far apart.
    coarse = torch.rand(n, 1, 4, 4, generator=gen)
    protos = torch.nn.functional.interpolate(
        coarse, size=(size, size), mode="bilinear", align_corners=False)
    return protos.clamp(0, 1)
