"""Readers for CIFAR10/100 (python or binary distribution) and FashionMNIST (IDX).

Nothing is downloaded; a missing file raises :class:`MissingDataError` with
instructions. The data root comes from ``$LATENT_REPLAY_DATA`` (default
``./data``) unless passed explicitly.
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from latent_replay.errors import ConfigError, MissingDataError

DATA_ENV = "LATENT_REPLAY_DATA"

DOWNLOAD_HINTS = {
    "CIFAR10": "download https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz (or the binary version) "
               "and extract it so that <root>/cifar-10-batches-py/ (or cifar-10-batches-bin/) exists",
    "CIFAR100": "download https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz (or the binary version) "
                "and extract it so that <root>/cifar-100-python/ (or cifar-100-binary/) exists",
    "FMNIST": "download the four *-ubyte.gz files from https://github.com/zalandoresearch/fashion-mnist "
              "into <root>/fashion-mnist/",
}


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ENV, "data"))


@dataclass
class Dataset:
    """Train/test split with uint8 images of shape (N, C, H, W)."""

    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = self.train_x.astype(np.float64) / 255.0
        # per-channel statistics of the training split, fixed at load time
        self.channel_mean = x.mean(axis=(0, 2, 3))
        self.channel_std = x.std(axis=(0, 2, 3))
        self.channel_std[self.channel_std == 0] = 1.0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def normalize(self, x: np.ndarray) -> torch.Tensor:
        out = (x.astype(np.float32) / 255.0 - self.channel_mean[None, :, None, None].astype(np.float32))
        out /= self.channel_std[None, :, None, None].astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(out))

    def subset(self, classes, split: str = "train") -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized images and labels of ``classes`` from the train or test split."""
        x, y = (self.train_x, self.train_y) if split == "train" else (self.test_x, self.test_y)
        mask = np.isin(y, np.asarray(list(classes)))
        return self.normalize(x[mask]), torch.from_numpy(y[mask].astype(np.int64))


def _missing(name: str, path: Path) -> MissingDataError:
    return MissingDataError(f"{name} not found under {path}: {DOWNLOAD_HINTS[name]}")


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as f:
        return pickle.load(f, encoding="bytes")


def _cifar_records(path: Path, label_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, label_bytes + 3072)
    return raw[:, label_bytes:].reshape(-1, 3, 32, 32), raw[:, label_bytes - 1].astype(np.int64)


def load_cifar10(root=None) -> Dataset:
    root = data_root(root)
    py, bin_ = root / "cifar-10-batches-py", root / "cifar-10-batches-bin"
    if py.is_dir():
        parts = [_unpickle(py / f"data_batch_{i}") for i in range(1, 6)]
        test = _unpickle(py / "test_batch")
        train_x = np.concatenate([p[b"data"] for p in parts]).reshape(-1, 3, 32, 32)
        train_y = np.concatenate([np.asarray(p[b"labels"]) for p in parts])
        test_x, test_y = np.asarray(test[b"data"]).reshape(-1, 3, 32, 32), np.asarray(test[b"labels"])
    elif bin_.is_dir():
        parts = [_cifar_records(bin_ / f"data_batch_{i}.bin", 1) for i in range(1, 6)]
        train_x = np.concatenate([p[0] for p in parts])
        train_y = np.concatenate([p[1] for p in parts])
        test_x, test_y = _cifar_records(bin_ / "test_batch.bin", 1)
    else:
        raise _missing("CIFAR10", root)
    return Dataset("CIFAR10", train_x, train_y.astype(np.int64), test_x, test_y.astype(np.int64), 10)


def load_cifar100(root=None) -> Dataset:
    root = data_root(root)
    py, bin_ = root / "cifar-100-python", root / "cifar-100-binary"
    if py.is_dir():
        train, test = _unpickle(py / "train"), _unpickle(py / "test")
        train_x = np.asarray(train[b"data"]).reshape(-1, 3, 32, 32)
        test_x = np.asarray(test[b"data"]).reshape(-1, 3, 32, 32)
        train_y, test_y = np.asarray(train[b"fine_labels"]), np.asarray(test[b"fine_labels"])
    elif bin_.is_dir():
        # coarse label byte, fine label byte, pixels
        train_x, train_y = _cifar_records(bin_ / "train.bin", 2)
        test_x, test_y = _cifar_records(bin_ / "test.bin", 2)
    else:
        raise _missing("CIFAR100", root)
    return Dataset("CIFAR100", train_x, train_y.astype(np.int64), test_x, test_y.astype(np.int64), 100)


def read_idx(path: Path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) of unsigned bytes."""
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    zero, dtype, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype != 0x08:
        raise ValueError(f"{path} is not an unsigned-byte IDX file")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find_idx(folder: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (folder / name).is_file():
            return folder / name
    raise FileNotFoundError(folder / stem)


def load_fashion_mnist(root=None) -> Dataset:
    root = data_root(root)
    for folder in (root / "fashion-mnist", root / "FashionMNIST" / "raw", root):
        try:
            files = {k: _find_idx(folder, f"{k}-ubyte") for k in
                     ("train-images-idx3", "train-labels-idx1", "t10k-images-idx3", "t10k-labels-idx1")}
            break
        except FileNotFoundError:
            continue
    else:
        raise _missing("FMNIST", root)
    train_x = read_idx(files["train-images-idx3"])[:, None]
    test_x = read_idx(files["t10k-images-idx3"])[:, None]
    train_y = read_idx(files["train-labels-idx1"]).astype(np.int64)
    test_y = read_idx(files["t10k-labels-idx1"]).astype(np.int64)
    return Dataset("FMNIST", train_x, train_y, test_x, test_y, 10)


def synthetic(num_classes: int = 6, per_class: int = 300, test_per_class: int = 100, size: int = 8,
              seed: int = 1234) -> Dataset:
    """Small separable image dataset: one random prototype per class plus pixel noise."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(40, 215, size=(num_classes, 1, size, size))

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        x = protos[y] + rng.normal(0, 30, size=(len(y), 1, size, size))
        return np.clip(x, 0, 255).astype(np.uint8), y.astype(np.int64)

    train_x, train_y = draw(per_class)
    test_x, test_y = draw(test_per_class)
    return Dataset("SYNTH", train_x, train_y, test_x, test_y, num_classes)


LOADERS = {
    "CIFAR10": load_cifar10,
    "CIFAR100": load_cifar100,
    "FMNIST": load_fashion_mnist,
    "SYNTH": lambda root=None: synthetic(),
}


def load_dataset(name: str, root=None) -> Dataset:
    try:
        loader = LOADERS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}") from None
    return loader(root)
