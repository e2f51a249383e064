"""Datasets: IDX ingestion, synthetic Gaussian blobs, and the bundled MNIST subset."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, SetupError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "ACTMARK_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise InputError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if np.isnan(self.inputs).any():
            raise InputError("dataset contains NaN features")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, split or self.split)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str):
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{what}: payload is {len(raw) - header} bytes, header implies "
                          f"{expected - header}", offset=min(len(raw), expected))
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path, n_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped) into a Dataset."""
    (n_img, rows, cols), pixels = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, "images")
    (n_lab,), labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}", offset=4)
    inputs = pixels.reshape(n_img, rows * cols).astype(np.float32) / np.float32(255.0)
    return Dataset(inputs, labels.astype(np.int64), n_classes, split)


def write_idx(dataset: Dataset, images_path, labels_path, shape=(28, 28)):
    """Write a Dataset back to IDX; features are quantised to bytes."""
    rows, cols = shape
    if rows * cols != dataset.dim:
        raise InputError(f"shape {shape} does not cover {dataset.dim} features")
    pixels = np.rint(np.clip(dataset.inputs, 0, 1) * 255).astype(np.uint8)
    n = len(dataset)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


@dataclass
class SyntheticSpec:
    """Gaussian blobs with a shared isotropic sigma.

    ``means`` is (C, d); when omitted, C means are drawn uniformly from
    [mean_low, mean_high]^d from ``seed``.
    """

    n_classes: int = 10
    dim: int = 64
    n_per_class: int = 200
    sigma: float = 0.1
    seed: int = 0
    means: np.ndarray | None = None
    mean_low: float = 0.2
    mean_high: float = 0.8

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InputError("sigma must be non-negative")
        if self.means is not None:
            self.means = np.asarray(self.means, dtype=np.float64)
            self.n_classes, self.dim = self.means.shape


def gen_synthetic(spec: SyntheticSpec, split: str = "train") -> Dataset:
    rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1])
    means = spec.means
    if means is None:
        means = np.random.default_rng(spec.seed).uniform(spec.mean_low, spec.mean_high,
                                                         size=(spec.n_classes, spec.dim))
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    noise = rng.standard_normal((len(labels), spec.dim)) * spec.sigma
    inputs = np.clip(means[labels] + noise, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], spec.n_classes, split)


def stratified_split(dataset: Dataset, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        k = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")


def mnist_subset_path() -> Path:
    """Location of the 5,000-sample MNIST CSV that ships with mlxtend."""
    import importlib.util

    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise SetupError("the bundled MNIST subset needs `pip install mlxtend` "
                         "(or place real IDX files in $" + DATA_DIR_ENV + ")")
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise SetupError(f"mlxtend is installed but {path} is missing")
    return path


def export_mnist_subset(out_dir, test_fraction: float = 0.2, seed: int = 0) -> Path:
    """Write the mlxtend MNIST subset as IDX train/t10k files under ``out_dir``."""
    table = np.loadtxt(mnist_subset_path(), delimiter=",", dtype=np.float64)
    full = Dataset(table[:, :-1] / 255.0, table[:, -1].astype(np.int64), 10)
    train, test = stratified_split(full, test_fraction, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in (("train", train), ("test", test)):
        write_idx(ds, *(out / name for name in MNIST_FILES[split]))
    return out


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "actmark" / "mnist"))


def _find(directory: Path, name: str) -> Path | None:
    for candidate in (directory / name, directory / (name + ".gz"),
                      directory / name.replace("-idx", ".idx")):
        if candidate.exists():
            return candidate
    return None


def load_mnist(data_dir=None, max_train: int | None = None, seed: int = 0):
    """Load MNIST train/test from IDX files in ``data_dir``.

    ``max_train`` draws a stratified, seeded subsample of the training split.
    """
    directory = Path(data_dir) if data_dir is not None else default_data_dir()
    splits = {}
    for split, (img, lab) in MNIST_FILES.items():
        img_path, lab_path = _find(directory, img), _find(directory, lab)
        if img_path is None or lab_path is None:
            raise SetupError(f"MNIST {split} files not found in {directory}; fetch them with "
                             f"`actmark fetch-mnist --out {directory}`")
        splits[split] = load_idx(img_path, lab_path, 10, split)
    train = splits["train"]
    if max_train is not None and max_train < len(train):
        train, _ = stratified_split(train, 1.0 - max_train / len(train), seed)
    return train, splits["test"]
