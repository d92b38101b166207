"""IDX files, dataset splits and dataset discovery for FashionMNIST / MNIST."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..models import INPUT_SHAPE, NUM_CLASSES

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATASET_DIRS = {"fashionmnist": ("FashionMNIST", "fashion-mnist", "fashionmnist", "fashion"),
                "mnist": ("MNIST", "mnist")}


class IDXError(ValueError):
    """Malformed IDX content; ``offset`` is the byte position where parsing failed."""

    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: offset {offset}: {msg}")
        self.path, self.offset = path, offset


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, path="<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise IDXError(path, 0, f"header needs 4 bytes, got {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in IDX_DTYPES:
        raise IDXError(path, 0, f"bad magic 0x{raw[:4].hex()}")
    dims_end = 4 + 4 * ndim
    if len(raw) < dims_end:
        raise IDXError(path, len(raw), f"dimension header needs {dims_end} bytes, got {len(raw)}")
    shape = struct.unpack(f">{ndim}I", raw[4:dims_end])
    dtype = np.dtype(IDX_DTYPES[code])
    expected = dims_end + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "trailing bytes"
        raise IDXError(path, min(len(raw), expected), f"{kind}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(shape).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    """Array stored in an IDX file (plain or gzip-compressed)."""
    return parse_idx(_read_bytes(path), path)


def idx_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(IDX_DTYPES[code]).tobytes()


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write ``array`` as IDX; gzip when ``compress`` or the name ends in .gz."""
    data = idx_bytes(array)
    if compress or (compress is None and str(path).endswith(".gz")):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


@dataclass
class DatasetSplit:
    images: np.ndarray  # float32 [n, 1, 28, 28] in [0, 1]
    labels: np.ndarray  # int64 class ids
    provenance: str = "unknown"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in 0..9")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, provenance: str | None = None) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], provenance or self.provenance)


def load_idx(images_path, labels_path, provenance: str = "unknown") -> DatasetSplit:
    """Paired image/label IDX files as a split with pixels scaled by 1/255."""
    raw = _read_bytes(images_path)
    magic = struct.unpack(">I", raw[:4])[0] if len(raw) >= 4 else None
    if magic != IMAGES_MAGIC:
        raise IDXError(images_path, 0, f"expected image magic 0x{IMAGES_MAGIC:08x}")
    images = parse_idx(raw, images_path)
    raw = _read_bytes(labels_path)
    magic = struct.unpack(">I", raw[:4])[0] if len(raw) >= 4 else None
    if magic != LABELS_MAGIC:
        raise IDXError(labels_path, 0, f"expected label magic 0x{LABELS_MAGIC:08x}")
    labels = parse_idx(raw, labels_path)
    if images.shape[1:] != INPUT_SHAPE[1:]:
        raise IDXError(images_path, 8, f"expected {INPUT_SHAPE[1]}x{INPUT_SHAPE[2]} images, got {images.shape[1:]}")
    if len(images) != len(labels):
        raise IDXError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    pixels = (images.astype(np.float32) / np.float32(255.0)).reshape((-1, *INPUT_SHAPE))
    return DatasetSplit(pixels, labels.astype(np.int64), provenance)


def _candidates(root: Path, dataset: str):
    yield root
    for name in DATASET_DIRS[dataset]:
        yield root / name
        yield root / name / "raw"


def find_split_files(root, dataset: str, split: str) -> tuple[Path, Path]:
    """Locate the standard IDX file pair below ``root`` (raw or .gz)."""
    if dataset not in DATASET_DIRS:
        raise ValueError(f"unknown dataset {dataset!r}; expected one of {sorted(DATASET_DIRS)}")
    names = SPLIT_FILES[split]
    for folder in _candidates(Path(root), dataset):
        found = []
        for name in names:
            for suffix in ("", ".gz"):
                if (folder / (name + suffix)).is_file():
                    found.append(folder / (name + suffix))
                    break
        if len(found) == 2:
            return found[0], found[1]
    raise FileNotFoundError(f"no {dataset} {split} IDX files under {root}")


def load_dataset(root, dataset: str = "fashionmnist") -> tuple[DatasetSplit, DatasetSplit]:
    """Official (train, test) splits."""
    return tuple(load_idx(*find_split_files(root, dataset, split), provenance=f"{dataset}-{split}")
                 for split in ("train", "test"))


def limited_pool(split: DatasetSplit, size: int = 20, seed: int = 0) -> np.ndarray:
    """``size`` images drawn without replacement, labels discarded."""
    if size > len(split):
        raise ValueError(f"pool of {size} requested from {len(split)} images")
    idx = np.random.default_rng([seed, 6]).choice(len(split), size=size, replace=False)
    return split.images[np.sort(idx)]
