"""Datasets, the one-label-per-class split, and labeled/unlabeled batch pairing."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed dataset input. ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class Dataset:
    images: np.ndarray              # (N, H, W, c) in [0, 1]
    labels: np.ndarray              # (N,) ints in [0, Y)
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if len(self.images) != len(self.labels):
            raise DataError("shape", f"{len(self.images)} images but {len(self.labels)} labels")
        y = self.num_classes
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= y):
            raise DataError("label-range", f"labels must lie in [0, {y})")
        missing = sorted(set(range(y)) - set(self.labels.tolist()))
        if missing:
            raise DataError("empty-class", f"classes without samples: {missing}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 IDX file (magic 0x0000080<ndim>, big-endian dims)."""
    arr = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x800 + arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def read_idx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DataError("header", f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic >> 8 != 0x08:
        raise DataError("header", f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if ndim < 1 or len(buf) < 4 + 4 * ndim:
        raise DataError("header", f"{path}: bad IDX rank {ndim}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = buf[4 + 4 * ndim:]
    if len(body) < count:
        raise DataError("truncated", f"{path}: expected {count} bytes of data, found {len(body)}")
    return np.frombuffer(body[:count], dtype=np.uint8).reshape(dims)


def read_class_names(path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise DataError("class-names", f"{path}: duplicate class names")
    return names


def write_class_names(path, names) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def load_dataset(path, fmt: str = "idx-binary", class_names=None) -> Dataset:
    """Load a dataset directory.

    ``idx-binary``: ``images.idx`` (magic 0x803, N x H x W) and ``labels.idx``
    (magic 0x801). ``png-dir``: ``images/*.png`` listed by ``labels.csv``
    (header ``filename,label``), in csv order. Class names come from
    ``classes.txt`` when not given.
    """
    path = Path(path)
    if class_names is None:
        names_file = path / "classes.txt"
        class_names = read_class_names(names_file) if names_file.exists() else None
    if fmt == "idx-binary":
        raw = read_idx(path / "images.idx")
        labels = read_idx(path / "labels.idx").astype(np.int64)
        if raw.ndim not in (3, 4):
            raise DataError("header", f"image IDX must be rank 3 or 4, got {raw.ndim}")
        if len(labels) != len(raw):
            raise DataError("shape", f"{len(raw)} images vs {len(labels)} labels")
        images = raw.astype(np.float32) / 255.0
    elif fmt == "png-dir":
        from PIL import Image

        rows = _read_label_csv(path / "labels.csv")
        imgs = []
        for fname, _ in rows:
            with Image.open(path / "images" / fname) as im:
                imgs.append(np.asarray(im.convert("L"), dtype=np.float32) / 255.0)
        images = np.stack(imgs) if imgs else np.zeros((0, 1, 1), np.float32)
        labels = np.array([lab for _, lab in rows], dtype=np.int64)
    else:
        raise DataError("format", f"unknown dataset format {fmt!r}")
    if class_names is None:
        class_names = [str(i) for i in range(int(labels.max()) + 1)] if len(labels) else []
    if len(labels) and labels.max() >= len(class_names):
        raise DataError("label-range", f"label {int(labels.max())} >= class count {len(class_names)}")
    return Dataset(images, labels, list(class_names))


def _read_label_csv(path) -> list[tuple[str, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["filename", "label"]:
            raise DataError("header", f"{path}: expected header 'filename,label'")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError("csv", f"{path}:{line_no}: expected 2 fields")
            try:
                rows.append((row[0].strip(), int(row[1])))
            except ValueError as exc:
                raise DataError("csv", f"{path}:{line_no}: bad label {row[1]!r}") from exc
    return rows


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(ds.images[..., 0] if ds.images.shape[-1] == 1 else ds.images, 0, 1) * 255)
    write_idx(path / "images.idx", pixels)
    write_idx(path / "labels.idx", ds.labels)
    write_class_names(path / "classes.txt", ds.class_names)


# ---------------------------------------------------------------------------
# split and sampling
# ---------------------------------------------------------------------------

@dataclass
class SslSplit:
    labeled: np.ndarray             # indices into the training pool
    unlabeled: np.ndarray
    seed: int
    labels_per_class: int = 1


def make_one_shot_split(ds: Dataset, labels_per_class: int = 1, seed: int = 0) -> SslSplit:
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < labels_per_class + 1:
            raise DataError("class-too-small",
                            f"class {c} ({ds.class_names[c]}) has {len(members)} samples, "
                            f"needs {labels_per_class + 1}")
        chosen.extend(rng.choice(members, size=labels_per_class, replace=False).tolist())
    labeled = np.array(sorted(chosen), dtype=np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[labeled] = False
    return SslSplit(labeled, np.flatnonzero(mask), seed, labels_per_class)


@dataclass
class BatchPair:
    labeled_idx: np.ndarray
    labeled_onehot: np.ndarray
    unlabeled_idx: np.ndarray
    B: int
    mu: float

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.labeled_onehot, axis=1)


@dataclass
class BatchSampler:
    """Draws labeled batches with replacement and unlabeled batches by epoch passes.

    Within one pass over U every index is drawn at most once; the permutation is
    redrawn when fewer than ``mu * B`` samples remain.
    """

    split: SslSplit
    labels: np.ndarray
    num_classes: int
    B: int
    mu: float
    rng: np.random.Generator
    _perm: np.ndarray = field(default=None, repr=False)
    _pos: int = 0
    epoch: int = 0

    def __post_init__(self):
        ub = self.mu * self.B
        if abs(ub - round(ub)) > 1e-9:
            raise ValueError(f"mu * B = {ub} is not an integer")
        if round(ub) < 1:
            raise ValueError("mu * B must be at least 1")
        if len(self.split.unlabeled) < round(ub):
            raise ValueError("unlabeled pool smaller than one batch")
        self.ub = int(round(ub))
        self._reshuffle()

    def _reshuffle(self):
        self._perm = self.rng.permutation(self.split.unlabeled)
        self._pos = 0

    @property
    def steps_per_epoch(self) -> int:
        return len(self.split.unlabeled) // self.ub

    def sample(self) -> BatchPair:
        if self._pos + self.ub > len(self._perm):
            self._reshuffle()
            self.epoch += 1
        u = self._perm[self._pos:self._pos + self.ub]
        self._pos += self.ub
        lab = self.rng.choice(self.split.labeled, size=self.B, replace=True)
        onehot = np.eye(self.num_classes, dtype=np.float32)[self.labels[lab]]
        return BatchPair(lab, onehot, u, self.B, self.mu)


def sample_batch_pair(split: SslSplit, labels: np.ndarray, num_classes: int, B: int, mu: float,
                      rng: np.random.Generator) -> BatchPair:
    """One-off batch pair (fresh pass over U)."""
    return BatchSampler(split, labels, num_classes, B, mu, rng).sample()
