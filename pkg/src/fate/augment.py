"""Seeded weak and strong image augmentation for [0, 1] images (H, W, c)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel

STRONG_OPS = ("translate", "rotate", "invert", "solarize", "contrast", "brightness", "sharpen", "posterize")

DEFAULT_RANGES = {
    "translate": (0.0, 0.3),      # fraction of side length
    "rotate": (-30.0, 30.0),      # degrees
    "invert": (0.0, 0.0),
    "solarize": (0.5, 1.0),       # threshold
    "contrast": (0.3, 1.7),       # factor
    "brightness": (0.3, 1.7),     # factor
    "sharpen": (0.0, 2.0),        # unsharp amount
    "posterize": (2.0, 4.0),      # bits
}


@dataclass
class AugmentPolicy:
    kind: str = "strong"
    n_ops: int = 2
    ops: tuple = STRONG_OPS
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    cutout: int = 7
    cutout_fill: float = 0.5
    flip_prob: float = 0.5
    max_shift_frac: float = 0.125

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ops"] = list(self.ops)
        d["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        return d


WEAK = AugmentPolicy(kind="weak")
STRONG = AugmentPolicy(kind="strong")


def derive_rng(global_seed: int, sample_index: int, epoch: int, view: int) -> np.random.Generator:
    """Per-(sample, epoch, view) generator; the SeedSequence hash mixes all four."""
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), int(sample_index), int(epoch), int(view)]))


def translate(image: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    """``out[y, x] = image[y - dy, x - dx]``, ``fill`` where that falls outside."""
    h, w = image.shape[:2]
    out = np.full_like(image, fill)
    ys, ye = max(0, dy), min(h, h + dy)
    xs, xe = max(0, dx), min(w, w + dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = image[ys - dy:ye - dy, xs - dx:xe - dx]
    return out


def rotate(image: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    # inverse map: output -> input is rotation by -a
    inv = np.array([[c, s, 0.0], [-s, c, 0.0]])
    return _accel.warp_nearest(image, inv, fill)


def _box_blur(image: np.ndarray) -> np.ndarray:
    p = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = image.shape[:2]
    acc = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / 9.0


def apply_op(image: np.ndarray, op: str, mag: float, rng: np.random.Generator) -> np.ndarray:
    if op == "translate":
        h, w = image.shape[:2]
        dy = int(round(mag * h)) * (1 if rng.random() < 0.5 else -1)
        dx = int(round(rng.uniform(0, mag) * w)) * (1 if rng.random() < 0.5 else -1)
        return translate(image, dy, dx)
    if op == "rotate":
        return rotate(image, mag)
    if op == "invert":
        return 1.0 - image
    if op == "solarize":
        return np.where(image >= mag, 1.0 - image, image)
    if op == "contrast":
        mu = image.mean()
        return (image - mu) * mag + mu
    if op == "brightness":
        return image * mag
    if op == "sharpen":
        return image + mag * (image - _box_blur(image))
    if op == "posterize":
        levels = 2 ** int(round(mag)) - 1
        return np.round(image * levels) / levels
    raise ValueError(f"unknown augmentation op {op!r}")


def cutout(image: np.ndarray, size: int, rng: np.random.Generator, fill: float = 0.5) -> np.ndarray:
    h, w = image.shape[:2]
    size = min(size, h, w)
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    out = image.copy()
    out[y0:y0 + size, x0:x0 + size] = fill
    return out


def weak_augment(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = WEAK) -> np.ndarray:
    """Random horizontal flip, then an integer shift with zero padding."""
    h, w = image.shape[:2]
    out = image[:, ::-1] if rng.random() < policy.flip_prob else image
    max_dy = int(math.floor(policy.max_shift_frac * h))
    max_dx = int(math.floor(policy.max_shift_frac * w))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    return translate(np.ascontiguousarray(out), dy, dx)


def strong_augment(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = STRONG) -> np.ndarray:
    """``n_ops`` random ops at random magnitudes, then a gray cutout square."""
    out = image
    picks = rng.choice(len(policy.ops), size=policy.n_ops, replace=True)
    for j in picks:
        op = policy.ops[int(j)]
        lo, hi = policy.ranges[op]
        out = np.clip(apply_op(out, op, float(rng.uniform(lo, hi)), rng), 0.0, 1.0)
    out = cutout(out, policy.cutout, rng, policy.cutout_fill)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def augment_batch(images: np.ndarray, indices, epoch: int, view, seed: int, kind: str,
                  policy: AugmentPolicy | None = None) -> np.ndarray:
    """Augment a batch; sample ``i`` uses ``derive_rng(seed, indices[i], epoch, view[i])``.

    ``view`` may be a single id or one id per sample (so repeated draws of the
    same index within a batch can still get distinct augmentations).
    """
    if kind not in ("weak", "strong"):
        raise ValueError(f"kind must be weak or strong, got {kind!r}")
    fn = weak_augment if kind == "weak" else strong_augment
    pol = policy or (WEAK if kind == "weak" else STRONG)
    views = np.broadcast_to(np.asarray(view, dtype=np.int64), (len(images),))
    out = [fn(img, derive_rng(seed, int(i), epoch, int(v)), pol) for img, i, v in zip(images, indices, views)]
    return np.stack(out).astype(images.dtype, copy=False)
