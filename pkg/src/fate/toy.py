"""Procedural textured-shape images for desk-scale experiments.

Every class is a (texture, shape) pair named ``"<texture> <shape>"``. The
auxiliary (pretraining) task and the downstream task use disjoint pairs drawn
from the same vocabulary, and the downstream images come from a shifted
rendering domain (a consistently brighter, lower-contrast, cluttered look).
"""

from __future__ import annotations

import math

import numpy as np

from .data import Dataset

SHAPES = ("circle", "square", "triangle", "cross", "ring")
TEXTURES = ("solid", "striped", "barred", "checkered")

# one held-out texture per shape; every word still occurs in the auxiliary set
DOWNSTREAM = ("checkered circle", "solid square", "striped triangle", "barred cross", "solid ring")

DOMAINS = {
    "source": dict(bg=(0.0, 0.15), fg=(0.75, 1.0), noise=0.04, clutter=0),
    "target": dict(bg=(0.4, 0.5), fg=(0.75, 0.9), noise=0.06, clutter=2),
}


def all_classes() -> list[str]:
    return [f"{t} {s}" for s in SHAPES for t in TEXTURES]


def auxiliary_classes() -> list[str]:
    return [c for c in all_classes() if c not in DOWNSTREAM]


def _shape_mask(shape: str, xs, ys, r: float) -> np.ndarray:
    if shape == "circle":
        return xs ** 2 + ys ** 2 <= r ** 2
    if shape == "ring":
        d2 = xs ** 2 + ys ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        s = 0.8 * r
        return (np.abs(xs) <= s) & (np.abs(ys) <= s)
    if shape == "cross":
        arm = 0.35 * r
        inside = (np.abs(xs) <= r) & (np.abs(ys) <= r)
        return inside & ((np.abs(xs) <= arm) | (np.abs(ys) <= arm))
    if shape == "triangle":
        # upward triangle with circumradius r
        h = 1.5 * r
        top = -r
        frac = (ys - top) / h
        return (ys >= top) & (ys <= top + h) & (np.abs(xs) <= frac * r * math.sqrt(3) / 2 * 1.15)
    raise ValueError(f"unknown shape {shape!r}")


def _texture(texture: str, yy, xx, phase: int) -> np.ndarray:
    if texture == "solid":
        return np.ones(yy.shape)
    if texture == "striped":
        return (((yy + phase) // 2) % 2 == 0).astype(float)
    if texture == "barred":
        return (((xx + phase) // 2) % 2 == 0).astype(float)
    if texture == "checkered":
        return ((((yy + phase) // 3) + ((xx + phase) // 3)) % 2 == 0).astype(float)
    raise ValueError(f"unknown texture {texture!r}")


def render(name: str, rng: np.random.Generator, size: int = 28, domain: str = "source") -> np.ndarray:
    texture, shape = name.split(" ")
    dom = DOMAINS[domain]
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    cy = c + rng.uniform(-3, 3)
    cx = c + rng.uniform(-3, 3)
    r = rng.uniform(0.26, 0.36) * size
    a = rng.uniform(-0.35, 0.35)
    ys = (yy - cy) * math.cos(a) - (xx - cx) * math.sin(a)
    xs = (yy - cy) * math.sin(a) + (xx - cx) * math.cos(a)
    mask = _shape_mask(shape, xs, ys, r)
    tex = _texture(texture, yy.astype(int), xx.astype(int), int(rng.integers(0, 4)))
    bg = rng.uniform(*dom["bg"])
    fg = rng.uniform(*dom["fg"])
    img = np.full((size, size), bg)
    lo = bg + 0.25 * (fg - bg)
    img = np.where(mask, np.where(tex > 0, fg, lo), img)
    for _ in range(dom["clutter"]):
        # thin random line segment
        t = np.linspace(0, 1, 2 * size)
        x0, y0, x1, y1 = rng.uniform(0, size - 1, size=4)
        px = np.clip(np.round(x0 + t * (x1 - x0)).astype(int), 0, size - 1)
        py = np.clip(np.round(y0 + t * (y1 - y0)).astype(int), 0, size - 1)
        img[py, px] = rng.uniform(0.4, 0.9) * fg
    img = img + rng.normal(0.0, dom["noise"], size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]


def make_dataset(class_names, per_class: int, seed: int, size: int = 28, domain: str = "source") -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(class_names)), per_class)
    rng.shuffle(labels)
    imgs = np.stack([render(class_names[y], rng, size, domain) for y in labels])
    return Dataset(imgs, labels, list(class_names))


def make_toy_task(seed: int = 0, aux_per_class: int = 200, train_per_class: int = 400,
                  test_per_class: int = 100, size: int = 28):
    """(auxiliary, downstream-train, downstream-test) datasets."""
    aux = make_dataset(auxiliary_classes(), aux_per_class, seed * 3 + 1, size, "source")
    train = make_dataset(list(DOWNSTREAM), train_per_class, seed * 3 + 2, size, "target")
    test = make_dataset(list(DOWNSTREAM), test_per_class, seed * 3 + 3, size, "target")
    return aux, train, test
